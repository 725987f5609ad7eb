//! Finite-difference verification of tape gradients.

use super::{NoGradGuard, Tensor};
use crate::error::{Result, TfkError};
use crate::scalar::Real;

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate, and returns the maximum
/// relative error `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `f` is re-evaluated with `x` perturbed in place, so it must read `x` (or
/// a model containing `x`) fresh on every call.
pub fn grad_check<T: Real, F>(mut f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    if !x.requires_grad() {
        return Err(TfkError::contract(
            "grad_check",
            "input tensor must require grad",
        ));
    }
    x.zero_grad();
    let y = f(x)?;
    if y.len() != 1 {
        return Err(TfkError::contract(
            "grad_check",
            format!("f must be scalar-valued, got {} elements", y.len()),
        ));
    }
    y.backward()?;
    let analytic = x
        .grad()
        .unwrap_or_else(|| vec![T::zero(); x.len()]);

    let _guard = NoGradGuard::new();
    let epsv = T::from_f64(eps);
    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let orig = x.with_data(|d| d[i]);
        x.with_data_mut(|d| d[i] = orig + epsv);
        let y_plus = f(x)?.item().as_f64();
        x.with_data_mut(|d| d[i] = orig - epsv);
        let y_minus = f(x)?.item().as_f64();
        x.with_data_mut(|d| d[i] = orig);
        let numeric = (y_plus - y_minus) / (2.0 * eps);
        let a = analytic[i].as_f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(x) = sum x^2, grad = 2x.
        let x = Tensor::from_vec(&[2], vec![1.0f64, 2.0])
            .unwrap()
            .with_grad();
        let err = grad_check(|x| x.mul(x)?.sum_all().reshape(&[1]), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "rel err {err}");
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_vec(&[3], vec![0.5f64, -0.2, 1.0])
            .unwrap()
            .with_grad();
        let err = grad_check(|x| Ok(x.scale(0.0).sum_all()), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let x = Tensor::from_vec(&[2], vec![1.0f64, 2.0])
            .unwrap()
            .with_grad();
        let err = grad_check(|x| Ok(x.scale(1.0)), &x, 1e-5).unwrap_err();
        assert!(matches!(err, TfkError::Contract { .. }));
    }
}
