//! Central finite-difference gradient oracle.
//!
//! Used by tests to validate every backward rule against an independent
//! numeric derivative: perturb one input element at a time and evaluate the
//! scalar function twice. Slow by design; run it on tiny shapes.

use super::Tensor;
use crate::Result;

/// Central difference `(f(x+h) - f(x-h)) / 2h` per element of `x`.
///
/// `f` must be a pure function of the tensor value (re-seed any internal
/// RNG per call so stochastic ops see identical draws).
pub fn finite_difference_grad(
    x: &Tensor,
    h: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// `|a-b| / max(|a|, |b|, 1e-6)`: relative error with a floor so that two
/// near-zero gradients compare as equal instead of as noise.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest elementwise [`relative_error`] between two gradient buffers.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient buffers must align");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn matches_analytic_gradient_of_a_quadratic() {
        // f(x) = sum(x^2) => df/dx_i = 2 x_i
        let x = Tensor::from_vec(&[3], vec![0.5, -1.25, 2.0]).unwrap();
        let fd = finite_difference_grad(&x, 1e-5, |t| {
            Ok(t.data().iter().map(|v| v * v).sum())
        })
        .unwrap();
        let analytic: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert!(max_relative_error(&fd, &analytic) < 1e-8);
    }

    #[test]
    fn catches_a_wrong_backward_rule() {
        // Pretend d(relu)/dx were 2 everywhere: the oracle must disagree.
        let x = Tensor::from_vec(&[2], vec![0.7, 0.9]).unwrap();
        let fd = finite_difference_grad(&x, 1e-5, |t| {
            let mut tape = Tape::new();
            let xt = tape.leaf(&t.clone().with_grad());
            let y = tape.relu(xt);
            Ok(tape.value(y).iter().sum())
        })
        .unwrap();
        let wrong = vec![2.0, 2.0];
        assert!(max_relative_error(&fd, &wrong) > 0.4);
    }
}
