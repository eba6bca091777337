//! Central-difference gradient oracle.

use super::{Scalar, Tensor};

/// Fourth-order central differences for every coordinate:
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.
///
/// The truncation error is `O(h⁴)`, so a step around `1e-3` keeps both
/// truncation and cancellation error far below the tolerances used in tests.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: f64) -> Tensor<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut eval = |k: f64| {
            probe.data_mut()[i] = orig + T::of(k * h);
            f(&probe).as_f64()
        };
        let (p1, m1, p2, m2) = (eval(1.0), eval(-1.0), eval(2.0), eval(-2.0));
        probe.data_mut()[i] = orig;
        grad.push(T::of((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape")
}

/// `|a − b| / max(|a|, |b|, floor)`. The floor keeps coordinates whose true
/// gradient is ~0 from reporting noise-dominated ratios.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

pub fn max_relative_error<T: Scalar>(analytic: &[T], numeric: &[T], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(a.as_f64(), n.as_f64(), floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::from_f64([1], &[3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-4);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1e-12, 0.0, 1e-6), 1e-6);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert_eq!(relative_error(0.0, 0.0, 0.0), 0.0);
    }
}
