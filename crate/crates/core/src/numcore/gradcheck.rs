//! Central-difference gradient oracle.

use super::tape::{Tape, Var};
use super::tensor::{NumError, NumResult, Tensor};

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> NumResult<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> NumResult<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.check_finite()?;
    Ok(tape.value(out).data()[0])
}

/// Maximum over coordinates of `|analytic − numeric| / max(1, |analytic|)`
/// for a scalar function of several tensors.
pub fn gradient_check_multi<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> NumResult<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> NumResult<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(NumError::Dimension {
            op: "gradient_check",
            detail: format!("function output has shape {:?}, expected a scalar", tape.shape(out)),
        });
    }
    tape.check_finite()?;
    let grads = tape.backward(out);

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input form of [`gradient_check_multi`].
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, h: f64) -> NumResult<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> NumResult<Var>,
{
    gradient_check_multi(|t, v| f(t, v[0]), std::slice::from_ref(x), h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_closed_form() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum_all(sq);
        let g = tape.backward(s);
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);
        let err = gradient_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum_all(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_f64(&[3], &[0.3, -1.2, 4.0]).unwrap();
        let w = Tensor::from_f64(&[3], &[2.0, -0.5, 1.5]).unwrap();
        let err = gradient_check(|t, v| t.dot_const(v, &w), &x, 1e-3).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn non_finite_values_name_the_op() {
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let err = gradient_check(
            |t, v| {
                let big = t.scale(v, f64::INFINITY);
                Ok(t.sum_all(big))
            },
            &x,
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, NumError::NonFinite { op: "scale" }), "{err}");
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        assert!(gradient_check(|t, v| Ok(t.scale(v, 2.0)), &x, 1e-3).is_err());
    }
}
