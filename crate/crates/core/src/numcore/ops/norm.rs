use crate::numcore::scalar::Scalar;
use crate::numcore::tape::{Mode, Tape, Var};
use crate::numcore::tensor::{NumError, NumResult, Tensor};

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// Statistics measured over the valid frames of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n − 1) variance, the quantity tracked by the running estimate.
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving average update.
    pub fn update(&mut self, stats: &BatchStats<T>) {
        let m = T::lit(self.momentum);
        for (r, &s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * s;
        }
        for (r, &s) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (T::one() - m) * *r + m * s;
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Standardizes each trailing-dimension row, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> NumResult<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NumError::Shape {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let eps = T::lit(eps);
        let inv_d = T::one() / T::lit(d as f64);
        let rows = self.value(x).len() / d.max(1);
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        {
            let (g, b) = (self.value(gamma).data(), self.value(beta).data());
            for (r, row) in self.value(x).data().chunks(d).enumerate() {
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for i in 0..d {
                    let h = (row[i] - mean) * is;
                    xhat[r * d + i] = h;
                    out[r * d + i] = g[i] * h + b[i];
                }
            }
        }
        let value = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(
            "layer_norm",
            value,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gamma = ctx.inputs[1].data();
                let mut dx = vec![T::zero(); rows * d];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for i in 0..d {
                        let dh = gr[i] * gamma[i];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[i];
                        dgamma[i] += gr[i] * hr[i];
                        dbeta[i] += gr[i];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    for i in 0..d {
                        let dh = gr[i] * gamma[i];
                        dx[r * d + i] = inv_std[r] * (dh - mean_dh - hr[i] * mean_dh_h);
                    }
                }
                vec![
                    ctx.needs[0].then(|| Tensor::from_vec(ctx.inputs[0].shape(), dx).expect("shape")),
                    ctx.needs[1].then(|| Tensor::from_vec(&[d], dgamma).expect("shape")),
                    ctx.needs[2].then(|| Tensor::from_vec(&[d], dbeta).expect("shape")),
                ]
            }),
        ))
    }

    /// Batch normalization of `[B, T, D]` over frames marked valid in
    /// `valid` (`B·T` flags). Padded frames come out as exact zeros. In train
    /// mode the batch statistics are returned for the caller to fold into the
    /// running estimate; eval mode reads `state` only.
    pub fn batch_norm_1d(
        &mut self,
        x: Var,
        valid: &[bool],
        gamma: Var,
        beta: Var,
        state: &BatchNormState<T>,
        mode: Mode,
    ) -> NumResult<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || valid.len() != shape[0] * shape[1] {
            return Err(NumError::Dimension {
                op: "batch_norm_1d",
                detail: format!("input {shape:?} with mask of length {}", valid.len()),
            });
        }
        let d = shape[2];
        if self.shape(gamma) != [d] || self.shape(beta) != [d] || state.channels() != d {
            return Err(NumError::Shape {
                op: "batch_norm_1d",
                left: shape,
                right: self.shape(gamma).to_vec(),
            });
        }
        let eps = T::lit(state.eps);
        let valid = valid.to_vec();
        let n = valid.iter().filter(|&&v| v).count();
        let xd = self.value(x).data();

        let (mean, inv_std, stats) = match mode {
            Mode::Train => {
                if n == 0 {
                    return Err(NumError::Precondition {
                        op: "batch_norm_1d",
                        detail: "no valid frames in batch".into(),
                    });
                }
                let mut mean = vec![T::zero(); d];
                for (row, _) in xd.chunks(d).zip(&valid).filter(|(_, &v)| v) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                let inv_n = T::one() / T::lit(n as f64);
                mean.iter_mut().for_each(|m| *m *= inv_n);
                let mut ss = vec![T::zero(); d];
                for (row, _) in xd.chunks(d).zip(&valid).filter(|(_, &v)| v) {
                    for ((s, &v), &m) in ss.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let inv_std: Vec<T> = ss.iter().map(|&s| T::one() / (s * inv_n + eps).sqrt()).collect();
                let unbiased = T::one() / T::lit((n.max(2) - 1) as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: ss.iter().map(|&s| s * unbiased).collect(),
                    count: n,
                };
                (mean, inv_std, Some(stats))
            }
            Mode::Eval => (
                state.running_mean.clone(),
                state.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
                None,
            ),
        };

        let rows = valid.len();
        let mut xhat = vec![T::zero(); rows * d];
        let mut out = vec![T::zero(); rows * d];
        {
            let (g, b) = (self.value(gamma).data(), self.value(beta).data());
            for r in (0..rows).filter(|&r| valid[r]) {
                for i in 0..d {
                    let h = (xd[r * d + i] - mean[i]) * inv_std[i];
                    xhat[r * d + i] = h;
                    out[r * d + i] = g[i] * h + b[i];
                }
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        let batch_stats = mode == Mode::Train;
        let var = self.push(
            "batch_norm_1d",
            value,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gamma = ctx.inputs[1].data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut sum_dh = vec![T::zero(); d];
                let mut sum_dh_h = vec![T::zero(); d];
                for r in (0..rows).filter(|&r| valid[r]) {
                    for i in 0..d {
                        let gi = g[r * d + i];
                        let h = xhat[r * d + i];
                        dgamma[i] += gi * h;
                        dbeta[i] += gi;
                        sum_dh[i] += gi * gamma[i];
                        sum_dh_h[i] += gi * gamma[i] * h;
                    }
                }
                let mut dx = vec![T::zero(); rows * d];
                let inv_n = T::one() / T::lit(n.max(1) as f64);
                for r in (0..rows).filter(|&r| valid[r]) {
                    for i in 0..d {
                        let dh = g[r * d + i] * gamma[i];
                        dx[r * d + i] = if batch_stats {
                            inv_std[i] * (dh - sum_dh[i] * inv_n - xhat[r * d + i] * sum_dh_h[i] * inv_n)
                        } else {
                            inv_std[i] * dh
                        };
                    }
                }
                vec![
                    ctx.needs[0].then(|| Tensor::from_vec(ctx.inputs[0].shape(), dx).expect("shape")),
                    ctx.needs[1].then(|| Tensor::from_vec(&[d], dgamma).expect("shape")),
                    ctx.needs[2].then(|| Tensor::from_vec(&[d], dbeta).expect("shape")),
                ]
            }),
        );
        Ok((var, stats))
    }
}
