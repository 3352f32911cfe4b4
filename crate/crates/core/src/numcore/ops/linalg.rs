use crate::numcore::scalar::Scalar;
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::{NumError, NumResult, Tensor};

fn shape_err(op: &'static str, l: &[usize], r: &[usize]) -> NumError {
    NumError::Shape {
        op,
        left: l.to_vec(),
        right: r.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    /// Matrix product `a · b` with `b` of shape `[K, N]`. Leading dimensions
    /// of `a` are flattened into rows, so `[B, T, K] · [K, N] -> [B, T, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> NumResult<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m: usize = sa[..sa.len() - 1].iter().product();
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let value = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(
            "matmul",
            value,
            &[a, b],
            Box::new(move |ctx| {
                let (av, bv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let da = ctx.needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), false, bv.data(), true, T::zero(), &mut d);
                    Tensor::from_vec(av.shape(), d).expect("shape")
                });
                let db = ctx.needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), av.data(), true, g.data(), false, T::zero(), &mut d);
                    Tensor::from_vec(bv.shape(), d).expect("shape")
                });
                vec![da, db]
            }),
        ))
    }

    /// Batched product over the leading axis: `[G, M, K] · [G, K, N]`, or
    /// `[G, M, K] · [G, N, K]ᵀ` when `transpose_b`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> NumResult<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batched_matmul", &sa, &sb));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("batched_matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); groups * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for g in 0..groups {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &ad[g * m * k..(g + 1) * m * k],
                    false,
                    &bd[g * k * n..(g + 1) * k * n],
                    transpose_b,
                    T::zero(),
                    &mut out[g * m * n..(g + 1) * m * n],
                );
            }
        }
        let value = Tensor::from_vec(&[groups, m, n], out)?;
        Ok(self.push(
            "batched_matmul",
            value,
            &[a, b],
            Box::new(move |ctx| {
                let (ad, bd, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let da = ctx.needs[0].then(|| {
                    let mut d = vec![T::zero(); groups * m * k];
                    for g in 0..groups {
                        let gs = &gd[g * m * n..(g + 1) * m * n];
                        let bs = &bd[g * k * n..(g + 1) * k * n];
                        // da = g · op(b)ᵀ
                        T::gemm(m, n, k, T::one(), gs, false, bs, !transpose_b, T::zero(), &mut d[g * m * k..(g + 1) * m * k]);
                    }
                    Tensor::from_vec(ctx.inputs[0].shape(), d).expect("shape")
                });
                let db = ctx.needs[1].then(|| {
                    let mut d = vec![T::zero(); groups * k * n];
                    for g in 0..groups {
                        let gs = &gd[g * m * n..(g + 1) * m * n];
                        let as_ = &ad[g * m * k..(g + 1) * m * k];
                        let dst = &mut d[g * k * n..(g + 1) * k * n];
                        if transpose_b {
                            // b is [N, K]: db = gᵀ · a
                            T::gemm(n, m, k, T::one(), gs, true, as_, false, T::zero(), dst);
                        } else {
                            T::gemm(k, m, n, T::one(), as_, true, gs, false, T::zero(), dst);
                        }
                    }
                    Tensor::from_vec(ctx.inputs[1].shape(), d).expect("shape")
                });
                vec![da, db]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> NumResult<Var> {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .map_err(|_| shape_err("add", self.shape(a), self.shape(b)))?;
        Ok(self.push(
            "add",
            value,
            &[a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.clone()),
                ]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> NumResult<Var> {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| shape_err("mul", self.shape(a), self.shape(b)))?;
        Ok(self.push(
            "mul",
            value,
            &[a, b],
            Box::new(|ctx| {
                let (x, y, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                vec![
                    ctx.needs[0].then(|| g.zip_map(y, |g, y| g * y).expect("shape")),
                    ctx.needs[1].then(|| g.zip_map(x, |g, x| g * x).expect("shape")),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(
            "scale",
            value,
            &[a],
            Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * c))]),
        )
    }

    /// `x + bias` with `bias` broadcast along the trailing dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> NumResult<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut value = self.value(x).clone();
        let bd = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(&bd) {
                *v += b;
            }
        }
        Ok(self.push(
            "add_bias",
            value,
            &[x, bias],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let db = ctx.needs[1].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for row in g.data().chunks(d) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_vec(&[d], acc).expect("shape")
                });
                vec![ctx.needs[0].then(|| g.clone()), db]
            }),
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(
            "sum_all",
            value,
            &[x],
            Box::new(|ctx| {
                let g = ctx.grad.data()[0];
                vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// `Σ x ⊙ w` against a constant weight tensor; a convenient scalar probe
    /// for gradient checks of non-scalar ops.
    pub fn dot_const(&mut self, x: Var, w: &Tensor<T>) -> NumResult<Var> {
        if self.shape(x) != w.shape() {
            return Err(shape_err("dot_const", self.shape(x), w.shape()));
        }
        let total: T = self
            .value(x)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let w = w.clone();
        Ok(self.push(
            "dot_const",
            Tensor::scalar(total),
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0];
                vec![Some(w.map(|v| v * g))]
            }),
        ))
    }

    /// Per-trial affine map `out[b] = x[b] · W_b + c_b` where trial `b` uses
    /// the matrix `weights[b]` and bias `biases[b]`. Several trials may share
    /// one parameter pair; gradients accumulate only into pairs that are used.
    pub fn routed_affine(&mut self, x: Var, weights: &[Var], biases: &[Var]) -> NumResult<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || weights.len() != sx[0] || biases.len() != sx[0] {
            return Err(NumError::Dimension {
                op: "routed_affine",
                detail: format!(
                    "input {sx:?} with {} weights and {} biases",
                    weights.len(),
                    biases.len()
                ),
            });
        }
        let (batch, frames, ch) = (sx[0], sx[1], sx[2]);
        let mut uniq_w: Vec<Var> = Vec::new();
        let mut uniq_b: Vec<Var> = Vec::new();
        let mut route: Vec<(usize, usize)> = Vec::with_capacity(batch);
        for (&w, &b) in weights.iter().zip(biases) {
            if self.shape(w) != [ch, ch] {
                return Err(shape_err("routed_affine", &sx, self.shape(w)));
            }
            if self.shape(b) != [ch] {
                return Err(shape_err("routed_affine", &sx, self.shape(b)));
            }
            let wi = uniq_w.iter().position(|&u| u == w).unwrap_or_else(|| {
                uniq_w.push(w);
                uniq_w.len() - 1
            });
            let bi = uniq_b.iter().position(|&u| u == b).unwrap_or_else(|| {
                uniq_b.push(b);
                uniq_b.len() - 1
            });
            route.push((wi, bi));
        }
        let per = frames * ch;
        let mut out = vec![T::zero(); batch * per];
        {
            let xd = self.value(x).data();
            for (t, &(wi, bi)) in route.iter().enumerate() {
                let dst = &mut out[t * per..(t + 1) * per];
                T::gemm(
                    frames,
                    ch,
                    ch,
                    T::one(),
                    &xd[t * per..(t + 1) * per],
                    false,
                    self.value(uniq_w[wi]).data(),
                    false,
                    T::zero(),
                    dst,
                );
                let bias = self.value(uniq_b[bi]).data();
                for row in dst.chunks_mut(ch) {
                    for (v, &c) in row.iter_mut().zip(bias) {
                        *v += c;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&sx, out)?;
        let n_w = uniq_w.len();
        let n_b = uniq_b.len();
        let mut parents = vec![x];
        parents.extend_from_slice(&uniq_w);
        parents.extend_from_slice(&uniq_b);
        Ok(self.push(
            "routed_affine",
            value,
            &parents,
            Box::new(move |ctx| {
                let xd = ctx.inputs[0].data();
                let gd = ctx.grad.data();
                let mut dx = ctx.needs[0].then(|| vec![T::zero(); batch * per]);
                let mut dw: Vec<Option<Vec<T>>> = (0..n_w)
                    .map(|i| ctx.needs[1 + i].then(|| vec![T::zero(); ch * ch]))
                    .collect();
                let mut db: Vec<Option<Vec<T>>> = (0..n_b)
                    .map(|i| ctx.needs[1 + n_w + i].then(|| vec![T::zero(); ch]))
                    .collect();
                for (t, &(wi, bi)) in route.iter().enumerate() {
                    let gs = &gd[t * per..(t + 1) * per];
                    if let Some(dx) = dx.as_mut() {
                        let w = ctx.inputs[1 + wi].data();
                        T::gemm(frames, ch, ch, T::one(), gs, false, w, true, T::zero(), &mut dx[t * per..(t + 1) * per]);
                    }
                    if let Some(acc) = dw[wi].as_mut() {
                        T::gemm(ch, frames, ch, T::one(), &xd[t * per..(t + 1) * per], true, gs, false, T::one(), acc);
                    }
                    if let Some(acc) = db[bi].as_mut() {
                        for row in gs.chunks(ch) {
                            for (a, &v) in acc.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
                let mut res = Vec::with_capacity(1 + n_w + n_b);
                res.push(dx.map(|d| Tensor::from_vec(&[batch, frames, ch], d).expect("shape")));
                res.extend(dw.into_iter().map(|d| d.map(|d| Tensor::from_vec(&[ch, ch], d).expect("shape"))));
                res.extend(db.into_iter().map(|d| d.map(|d| Tensor::from_vec(&[ch], d).expect("shape"))));
                res
            }),
        ))
    }
}
