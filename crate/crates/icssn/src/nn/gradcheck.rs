//! Central finite-difference gradient oracle.
//!
//! Every hand-written backward pass in the crate is validated against
//! [`central_diff`]; the acceptance tests reuse the same two helpers.

use ndarray::ArrayD;

/// Central-difference gradient of scalar `f` at `x`:
/// `(f(x+εe_i) − f(x−εe_i)) / 2ε` per coordinate.
pub fn central_diff<F>(x: &ArrayD<f64>, eps: f64, mut f: F) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    // Iterate the flat layout; arrays here are always standard-layout.
    let n = x.len();
    for i in 0..n {
        let orig = *probe.as_slice().expect("standard layout").get(i).unwrap();
        probe.as_slice_mut().unwrap()[i] = orig + eps;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - eps;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Worst relative disagreement between an analytic and a numeric gradient:
/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-6)`.  The floor keeps
/// negligibly small coordinates from dominating the ratio.
pub fn max_rel_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn quadratic_gradient_is_recovered() {
        // f(x) = Σ c_i x_i², ∇f = 2 c x.
        let x = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let c = [1.0, 2.0, 3.0, 4.0];
        let fd = central_diff(&x, 1e-6, |v| {
            v.iter().zip(c).map(|(xi, ci)| ci * xi * xi).sum()
        });
        let analytic = ArrayD::from_shape_vec(
            IxDyn(&[4]),
            x.iter().zip(c).map(|(xi, ci)| 2.0 * ci * xi).collect(),
        )
        .unwrap();
        assert!(max_rel_error(&analytic, &fd) < 1e-7);
    }

    #[test]
    fn rel_error_flags_disagreement() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 1.0]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 1.1]).unwrap();
        let err = max_rel_error(&a, &b);
        assert!(err > 0.09 && err < 0.1);
    }
}
