//! Central finite differences for verifying tape gradients.

use ndarray::Array2;

/// Numerical gradient of `f` at `x` via central differences,
/// (f(x + eps) - f(x - eps)) / (2 eps) per element.
///
/// `f` must be a pure function of its argument: it is re-run 2 * x.len()
/// times, typically rebuilding a fresh tape each call.
pub fn finite_diff_grad<F>(x: &Array2<f64>, eps: f64, mut f: F) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + eps;
        let fp = f(&probe);
        probe[[r, c]] = orig - eps;
        let fm = f(&probe);
        probe[[r, c]] = orig;
        grad[[r, c]] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Worst-case relative error between two gradients:
/// max over elements of |a - n| / max(floor, |a|, |n|).
///
/// `floor` keeps near-zero entries from blowing up the ratio; 1e-3 is a
/// reasonable choice when gradients are O(1).
pub fn max_rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>, floor: f64) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim(), "max_rel_err: shape mismatch");
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(floor);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn finite_diff_of_quadratic_is_linear() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let g = finite_diff_grad(&x, 1e-6, |v| v.iter().map(|&e| e * e).sum());
        let expect = &x * 2.0;
        assert!(max_rel_err(&expect, &g, 1e-6) < 1e-8);
    }

    #[test]
    fn rel_err_uses_floor_for_tiny_entries() {
        let a = array![[0.0]];
        let b = array![[1e-9]];
        assert!(max_rel_err(&a, &b, 1e-3) < 1e-5);
    }
}
