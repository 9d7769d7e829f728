//! Finite-difference verification of backward rules (double precision only).

use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Maximum over all input elements of
/// `|g_analytic - g_fd| / max(1, |g_analytic|, |g_fd|)`.
///
/// `inputs` are `(shape, values)` pairs; `f` receives one gradient-tracking
/// leaf per input and must return a single-element tensor.
pub fn grad_check<F>(f: F, inputs: &[(Vec<usize>, Vec<f64>)]) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    Ok(grad_check_per_input(f, inputs)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Like [`grad_check`] but reports the maximum error separately per input.
pub fn grad_check_per_input<F>(f: F, inputs: &[(Vec<usize>, Vec<f64>)]) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves = inputs
        .iter()
        .map(|(s, v)| Tensor::param(s, v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&leaves)?;
    if out.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            out.shape()
        )));
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad_vec().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();
    drop(out);

    let eval = |which: usize, values: &[f64]| -> Result<f64> {
        let ts = inputs
            .iter()
            .enumerate()
            .map(|(i, (s, v))| {
                if i == which {
                    Tensor::constant(s, values.to_vec())
                } else {
                    Tensor::constant(s, v.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        f(&ts)?.item()
    };

    let h = GRAD_CHECK_STEP;
    let mut errors = Vec::with_capacity(inputs.len());
    for (which, (_, values)) in inputs.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut probe = values.clone();
        for j in 0..values.len() {
            let orig = probe[j];
            probe[j] = orig + h;
            let plus = eval(which, &probe)?;
            probe[j] = orig - h;
            let minus = eval(which, &probe)?;
            probe[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[which][j];
            let err = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            worst = worst.max(err);
        }
        errors.push(worst);
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[Tensor<f64>]| Ok(x[0].mul(&x[0])?.sum());
        let err = grad_check(f, &[(vec![2], vec![1.0, 2.0])]).unwrap();
        assert!(err < 1e-8, "{err}");

        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(*x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn linear_maps_are_exact() {
        let f = |x: &[Tensor<f64>]| {
            let w = Tensor::constant(&[3, 1], vec![0.5, -2.0, 0.25])?;
            Ok(x[0].matmul(&w)?.scale(0.5).sum())
        };
        let err = grad_check(f, &[(vec![2, 3], vec![0.1, 0.2, -0.3, 0.4, 0.05, -0.6])]).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let f = |x: &[Tensor<f64>]| Ok(x[0].scale(2.0));
        assert!(matches!(
            grad_check(f, &[(vec![2], vec![1.0, 2.0])]),
            Err(Error::Contract(_))
        ));
    }
}
