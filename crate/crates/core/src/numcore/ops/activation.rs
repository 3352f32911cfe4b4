use crate::numcore::rng::RngStream;
use crate::numcore::scalar::Scalar;
use crate::numcore::tape::{Mode, Tape, Var};
use crate::numcore::tensor::{NumError, NumResult, Tensor};

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

impl<T: Scalar> Tape<T> {
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(
            "sigmoid",
            value,
            &[x],
            Box::new(|ctx| {
                let y = ctx.output;
                vec![Some(ctx.grad.zip_map(y, |g, s| g * s * (T::one() - s)).expect("shape"))]
            }),
        )
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(silu);
        self.push(
            "silu",
            value,
            &[x],
            Box::new(|ctx| {
                let d = ctx
                    .grad
                    .zip_map(ctx.inputs[0], |g, x| {
                        let s = sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .expect("shape");
                vec![Some(d)]
            }),
        )
    }

    /// Gated linear unit over the trailing dimension: the first half gated by
    /// the sigmoid of the second half.
    pub fn glu(&mut self, x: Var) -> NumResult<Var> {
        let shape = self.shape(x).to_vec();
        let two_d = shape.last().copied().unwrap_or(0);
        if two_d == 0 || two_d % 2 != 0 {
            return Err(NumError::Dimension {
                op: "glu",
                detail: format!("last dimension must be even and non-zero, got {shape:?}"),
            });
        }
        let d = two_d / 2;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().expect("rank >= 1") = d;
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(two_d)
            .flat_map(|row| (0..d).map(move |i| row[i] * sigmoid(row[d + i])))
            .collect();
        let value = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(
            "glu",
            value,
            &[x],
            Box::new(move |ctx| {
                let mut dx = vec![T::zero(); ctx.inputs[0].len()];
                for ((row, drow), g) in ctx.inputs[0]
                    .data()
                    .chunks(two_d)
                    .zip(dx.chunks_mut(two_d))
                    .zip(ctx.grad.data().chunks(d))
                {
                    for i in 0..d {
                        let s = sigmoid(row[d + i]);
                        drow[i] = g[i] * s;
                        drow[d + i] = g[i] * row[i] * s * (T::one() - s);
                    }
                }
                vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), dx).expect("shape"))]
            }),
        ))
    }

    /// Max-shifted log-softmax over the trailing dimension.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x).last_dim();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(v) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
            for z in row.iter_mut() {
                *z -= lse;
            }
        }
        self.push(
            "log_softmax",
            value,
            &[x],
            Box::new(move |ctx| {
                let mut dx = ctx.grad.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(v).zip(ctx.output.data().chunks(v)) {
                    let gsum: T = drow.iter().copied().sum();
                    for (d, &y) in drow.iter_mut().zip(yrow) {
                        *d -= y.exp() * gsum;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Softmax over the trailing axis of `[G, Q, K]` scores where keys marked
    /// invalid receive exactly zero weight. Group `g` reads mask row
    /// `g / groups_per_row` of `key_valid` (`[rows, K]`, row-major).
    pub fn masked_softmax(
        &mut self,
        scores: Var,
        key_valid: &[bool],
        groups_per_row: usize,
    ) -> NumResult<Var> {
        let shape = self.shape(scores).to_vec();
        if shape.len() != 3 || groups_per_row == 0 || shape[0] % groups_per_row != 0 {
            return Err(NumError::Dimension {
                op: "masked_softmax",
                detail: format!("scores {shape:?} with {groups_per_row} groups per mask row"),
            });
        }
        let (groups, q, k) = (shape[0], shape[1], shape[2]);
        if key_valid.len() != (groups / groups_per_row) * k {
            return Err(NumError::Dimension {
                op: "masked_softmax",
                detail: format!("mask of length {} for scores {shape:?}", key_valid.len()),
            });
        }
        let mask = key_valid.to_vec();
        let mut value = self.value(scores).clone();
        for g in 0..groups {
            let keys = &mask[(g / groups_per_row) * k..(g / groups_per_row + 1) * k];
            for row in value.data_mut()[g * q * k..(g + 1) * q * k].chunks_mut(k) {
                let m = row
                    .iter()
                    .zip(keys)
                    .filter(|(_, &ok)| ok)
                    .map(|(&s, _)| s)
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for (s, &ok) in row.iter_mut().zip(keys) {
                    *s = if ok { (*s - m).exp() } else { T::zero() };
                    total += *s;
                }
                if total > T::zero() {
                    for s in row.iter_mut() {
                        *s /= total;
                    }
                }
            }
        }
        Ok(self.push(
            "masked_softmax",
            value,
            &[scores],
            Box::new(move |ctx| {
                let mut dx = ctx.grad.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(k).zip(ctx.output.data().chunks(k)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    for (d, &y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dot);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 − p)` in train mode; identity otherwise.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngStream, mode: Mode) -> NumResult<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumError::Parameter {
                op: "dropout",
                detail: format!("probability must lie in [0, 1), got {p}"),
            });
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
            .collect();
        let mask = Tensor::from_vec(self.shape(x), mask)?;
        let value = self.value(x).zip_map(&mask, |a, m| a * m)?;
        Ok(self.push(
            "dropout",
            value,
            &[x],
            Box::new(move |ctx| vec![Some(ctx.grad.zip_map(&mask, |g, m| g * m).expect("shape"))]),
        ))
    }
}
