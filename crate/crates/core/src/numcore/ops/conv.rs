use crate::numcore::scalar::Scalar;
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::{NumError, NumResult, Tensor};

/// Left and right zero padding giving "same" output length for a kernel of
/// `k` taps. Even kernels pad one more frame on the left.
pub fn same_padding(k: usize) -> (usize, usize) {
    (k / 2, k.saturating_sub(1) / 2)
}

impl<T: Scalar> Tape<T> {
    /// Per-channel 1-D correlation over time with "same" zero padding:
    /// `out[b,t,d] = Σ_j x[b, t + j − left, d] · kernel[j, d]`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> NumResult<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sk.len() != 2 || sk[1] != sx[2] || sk[0] == 0 {
            return Err(NumError::Shape {
                op: "depthwise_conv1d",
                left: sx,
                right: sk,
            });
        }
        let (batch, frames, ch) = (sx[0], sx[1], sx[2]);
        let taps = sk[0];
        let (left, _) = same_padding(taps);
        let mut out = vec![T::zero(); batch * frames * ch];
        {
            let xd = self.value(x).data();
            let wd = self.value(kernel).data();
            for b in 0..batch {
                let base = b * frames * ch;
                for t in 0..frames {
                    let dst = &mut out[base + t * ch..base + (t + 1) * ch];
                    for j in 0..taps {
                        let src = t as isize + j as isize - left as isize;
                        if src < 0 || src >= frames as isize {
                            continue;
                        }
                        let xs = &xd[base + src as usize * ch..base + (src as usize + 1) * ch];
                        let ws = &wd[j * ch..(j + 1) * ch];
                        for ((o, &xv), &wv) in dst.iter_mut().zip(xs).zip(ws) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&sx, out)?;
        Ok(self.push(
            "depthwise_conv1d",
            value,
            &[x, kernel],
            Box::new(move |ctx| {
                let xd = ctx.inputs[0].data();
                let wd = ctx.inputs[1].data();
                let gd = ctx.grad.data();
                let mut dx = vec![T::zero(); xd.len()];
                let mut dw = vec![T::zero(); wd.len()];
                for b in 0..batch {
                    let base = b * frames * ch;
                    for t in 0..frames {
                        let gs = &gd[base + t * ch..base + (t + 1) * ch];
                        for j in 0..taps {
                            let src = t as isize + j as isize - left as isize;
                            if src < 0 || src >= frames as isize {
                                continue;
                            }
                            let so = base + src as usize * ch;
                            for c in 0..ch {
                                dx[so + c] += gs[c] * wd[j * ch + c];
                                dw[j * ch + c] += gs[c] * xd[so + c];
                            }
                        }
                    }
                }
                vec![
                    ctx.needs[0].then(|| Tensor::from_vec(ctx.inputs[0].shape(), dx).expect("shape")),
                    ctx.needs[1].then(|| Tensor::from_vec(ctx.inputs[1].shape(), dw).expect("shape")),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::gradient_check_multi;
    use crate::numcore::rng::RngStream;

    fn rand_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn padding_convention() {
        assert_eq!(same_padding(31), (15, 15));
        assert_eq!(same_padding(4), (2, 1));
        assert_eq!(same_padding(100), (50, 49));
        assert_eq!(same_padding(1), (0, 0));
    }

    #[test]
    fn delta_kernel_is_identity() {
        for taps in [1usize, 3, 4, 31] {
            let mut rng = RngStream::new(taps as u64);
            let raw = rand_tensor(&[2, 9, 3], &mut rng);
            let mut k = Tensor::<f64>::zeros(&[taps, 3]);
            let center = same_padding(taps).0;
            for c in 0..3 {
                k.set(&[center, c], 1.0);
            }
            let mut tape = Tape::new();
            let x = tape.constant(raw.clone());
            let kv = tape.constant(k);
            let y = tape.depthwise_conv1d(x, kv).unwrap();
            assert_eq!(tape.value(y), &raw, "taps={taps}");
        }
    }

    #[test]
    fn box_kernel_preserves_constant_interior() {
        let taps = 5;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 20, 2], 2.5));
        let k = tape.constant(Tensor::full(&[taps, 2], 1.0 / taps as f64));
        let y = tape.depthwise_conv1d(x, k).unwrap();
        for t in 2..18 {
            for c in 0..2 {
                assert!((tape.value(y).get(&[0, t, c]) - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_longer_than_sequence_is_accepted() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 3, 1]));
        let k = tape.constant(Tensor::ones(&[7, 1]));
        let y = tape.depthwise_conv1d(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn gradient_check_odd_and_even_kernels() {
        for taps in [3usize, 4] {
            let mut rng = RngStream::new(40 + taps as u64);
            let x = rand_tensor(&[2, 6, 3], &mut rng);
            let k = rand_tensor(&[taps, 3], &mut rng);
            let probe = rand_tensor(&[2, 6, 3], &mut rng);
            let err = gradient_check_multi(
                |t, v| {
                    let y = t.depthwise_conv1d(v[0], v[1])?;
                    t.dot_const(y, &probe)
                },
                &[x, k],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-5, "taps={taps}: {err}");
        }
    }
}
