//! Finite-difference gradient oracle.
//!
//! The oracle only ever evaluates the scalar function; it never looks at the
//! tape's reverse pass, so it stays independent of the gradients it checks.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `p`:
/// `(f(p + step·e_i) − f(p − step·e_i)) / (2·step)` per coordinate.
pub fn finite_difference_grad<F: Scalar>(
    f: &mut dyn FnMut(&Tensor<F>) -> F,
    p: &Tensor<F>,
    step: f64,
) -> Tensor<F> {
    assert!(step > 0.0, "finite differences need a positive step");
    let h = F::cst(step);
    let two_h = F::cst(2.0 * step);
    let mut grad = vec![F::zero(); p.numel()];
    let mut probe = p.clone();
    for i in 0..p.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / two_h;
    }
    Tensor::new(p.shape().to_vec(), grad).unwrap()
}

/// Largest relative discrepancy, with denominator `max(1, |analytic_i|)`.
pub fn max_rel_err<F: Scalar>(analytic: &[F], numeric: &[F]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.as_f64().abs().max(1.0);
        let err = (a.as_f64() - n.as_f64()).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}
