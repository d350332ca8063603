use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare tape gradients of a scalar function against central differences.
///
/// Returns the maximum over all entries of all inputs of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &vars)?;
    if root.shape() != [1] {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }
    let grads = tape.backward(&root)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<f64>> = inputs.iter().cloned().map(Var::constant).collect();
        Ok(f(&tape, &vars)?.value().data()[0])
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        for i in 0..probe[which].len() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn sigmoid_sum_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let x = Tensor::randn(&[4, 3], &mut rng);
        let err = grad_check(|t, v| Ok(t.sum(&t.sigmoid(&v[0]))), &[x], 1e-5).unwrap();
        assert!(err <= 1e-6, "error {err}");
    }

    #[test]
    fn linear_case_is_exact() {
        let mut rng = Rng::new(6);
        let x = Tensor::randn(&[5], &mut rng);
        let err = grad_check(|t, v| Ok(t.sum(&v[0])), &[x], 1e-5).unwrap();
        assert!(err < 1e-9, "error {err}");
    }

    #[test]
    fn non_scalar_function_rejected() {
        let x = Tensor::<f64>::zeros(&[3]);
        let res = grad_check(|t, v| Ok(t.tanh(&v[0])), &[x], 1e-5);
        assert!(matches!(res, Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn elementwise_ops_pass() {
        let mut rng = Rng::new(8);
        let a = Tensor::randn(&[2, 3], &mut rng);
        let b = Tensor::randn(&[2, 3], &mut rng);
        let err = grad_check(
            |t, v| {
                let p = t.mul(&v[0], &v[1])?;
                let q = t.sub(&t.tanh(&p), &v[0])?;
                let r = t.add(&q, &t.scale(&v[1], 0.7))?;
                Ok(t.sum(&t.abs(&r)))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "error {err}");
    }
}
