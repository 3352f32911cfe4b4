use crate::numcore::scalar::Scalar;
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::{NumError, NumResult, Tensor};

/// Number of windows of `patch` frames at `stride` that fit in `frames`.
pub fn patch_count(frames: usize, patch: usize, stride: usize) -> Option<usize> {
    (frames >= patch && stride > 0).then(|| (frames - patch) / stride + 1)
}

impl<T: Scalar> Tape<T> {
    /// Metadata-only reshape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> NumResult<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(
            "reshape",
            value,
            &[x],
            Box::new(|ctx| {
                vec![Some(
                    ctx.grad
                        .clone()
                        .reshape(ctx.inputs[0].shape())
                        .expect("shape"),
                )]
            }),
        ))
    }

    /// `[A, B, C, D] -> [A, C, B, D]`; self-inverse.
    pub fn transpose12(&mut self, x: Var) -> NumResult<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(NumError::Dimension {
                op: "transpose12",
                detail: format!("expected rank 4, got {s:?}"),
            });
        }
        let value = swap12(self.value(x), &s);
        Ok(self.push(
            "transpose12",
            value,
            &[x],
            Box::new(|ctx| {
                let gs = ctx.grad.shape().to_vec();
                vec![Some(swap12(ctx.grad, &gs))]
            }),
        ))
    }

    /// Strided windows along time: `[B, T, C] -> [B, N, P·C]` with
    /// `N = ⌊(T − P)/S⌋ + 1`; each window is flattened frame-major.
    pub fn unfold_patches(&mut self, x: Var, patch: usize, stride: usize) -> NumResult<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(NumError::Dimension {
                op: "unfold_patches",
                detail: format!("expected [B, T, C], got {s:?}"),
            });
        }
        let (batch, frames, ch) = (s[0], s[1], s[2]);
        let n = patch_count(frames, patch, stride).ok_or_else(|| NumError::Precondition {
            op: "unfold_patches",
            detail: format!("{frames} frames cannot hold a patch of {patch} at stride {stride}"),
        })?;
        let width = patch * ch;
        let mut out = Vec::with_capacity(batch * n * width);
        {
            let xd = self.value(x).data();
            for b in 0..batch {
                for w in 0..n {
                    let start = (b * frames + w * stride) * ch;
                    out.extend_from_slice(&xd[start..start + width]);
                }
            }
        }
        let value = Tensor::from_vec(&[batch, n, width], out)?;
        Ok(self.push(
            "unfold_patches",
            value,
            &[x],
            Box::new(move |ctx| {
                let gd = ctx.grad.data();
                let mut dx = vec![T::zero(); batch * frames * ch];
                for b in 0..batch {
                    for w in 0..n {
                        let start = (b * frames + w * stride) * ch;
                        let src = &gd[(b * n + w) * width..(b * n + w + 1) * width];
                        for (d, &g) in dx[start..start + width].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), dx).expect("shape"))]
            }),
        ))
    }

    /// Writes exact zeros into rows `t ≥ lengths[b]` of a `[B, T, D]` tensor,
    /// whatever they held (NaN included). Gradient flows only through kept rows.
    pub fn zero_padded(&mut self, x: Var, lengths: &[usize]) -> NumResult<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || lengths.len() != s[0] {
            return Err(NumError::Dimension {
                op: "zero_padded",
                detail: format!("input {s:?} with {} lengths", lengths.len()),
            });
        }
        let (frames, d) = (s[1], s[2]);
        if lengths.iter().all(|&l| l >= frames) {
            return Ok(x);
        }
        let lengths = lengths.to_vec();
        let mask_rows = move |t: &mut Tensor<T>| {
            for (b, &len) in lengths.iter().enumerate() {
                let start = (b * frames + len.min(frames)) * d;
                let end = (b + 1) * frames * d;
                t.data_mut()[start..end].iter_mut().for_each(|v| *v = T::zero());
            }
        };
        let mut value = self.value(x).clone();
        mask_rows(&mut value);
        Ok(self.push(
            "zero_padded",
            value,
            &[x],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                mask_rows(&mut g);
                vec![Some(g)]
            }),
        ))
    }
}

fn swap12<T: Scalar>(x: &Tensor<T>, s: &[usize]) -> Tensor<T> {
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let from = ((i * b + j) * c + k) * d;
                let to = ((i * c + k) * b + j) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    Tensor::from_vec(&[a, c, b, d], out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::gradient_check;
    use crate::numcore::rng::RngStream;

    fn rand_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn patch_count_law() {
        assert_eq!(patch_count(100, 14, 4), Some(22));
        assert_eq!(patch_count(14, 14, 4), Some(1));
        assert_eq!(patch_count(13, 14, 4), None);
    }

    #[test]
    fn unfold_layout_and_gradient() {
        let mut rng = RngStream::new(2);
        let x = rand_tensor(&[2, 7, 2], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let u = tape.unfold_patches(xv, 3, 2).unwrap();
        assert_eq!(tape.shape(u), &[2, 3, 6]);
        // window 1 of trial 1 starts at frame 2
        assert_eq!(tape.value(u).get(&[1, 1, 0]), x.get(&[1, 2, 0]));
        assert_eq!(tape.value(u).get(&[1, 1, 5]), x.get(&[1, 4, 1]));

        let probe = rand_tensor(&[2, 3, 6], &mut rng);
        let err = gradient_check(
            |t, v| {
                let u = t.unfold_patches(v, 3, 2)?;
                t.dot_const(u, &probe)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn transpose_round_trip_and_gradient() {
        let mut rng = RngStream::new(3);
        let x = rand_tensor(&[2, 3, 4, 2], &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let t1 = tape.transpose12(v).unwrap();
        assert_eq!(tape.shape(t1), &[2, 4, 3, 2]);
        assert_eq!(tape.value(t1).get(&[1, 3, 2, 1]), x.get(&[1, 2, 3, 1]));
        let t2 = tape.transpose12(t1).unwrap();
        assert_eq!(tape.value(t2), &x);
        let probe = rand_tensor(&[2, 4, 3, 2], &mut rng);
        let err = gradient_check(
            |t, v| {
                let y = t.transpose12(v)?;
                t.dot_const(y, &probe)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn zero_padded_clears_nan_rows() {
        let mut x = Tensor::<f64>::ones(&[2, 3, 2]);
        x.set(&[0, 2, 0], f64::NAN);
        let mut tape = Tape::new();
        let v = tape.leaf(x, true);
        let y = tape.zero_padded(v, &[2, 3]).unwrap();
        assert!(tape.value(y).all_finite());
        assert_eq!(tape.value(y).get(&[0, 2, 1]), 0.0);
        assert_eq!(tape.value(y).get(&[1, 2, 1]), 1.0);
        let s = tape.sum_all(y);
        let g = tape.backward(s);
        assert_eq!(g.get(v).unwrap().get(&[0, 2, 0]), 0.0);
        assert_eq!(g.get(v).unwrap().get(&[0, 1, 0]), 1.0);
    }
}
