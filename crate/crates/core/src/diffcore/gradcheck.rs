//! Central finite-difference checks for analytic gradients.

/// Maximum over coordinates of `|analytic - fd| / (|fd| + 1e-8)`, where `fd`
/// is the central difference `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// `f` returns the function value and its analytic gradient at a point; the
/// gradient is only requested at `point` itself.
pub fn finite_diff_check<F>(mut f: F, point: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    assert!(h > 0.0, "step must be positive");
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length");
    let numeric = central_differences(|x| f(x).0, point, h);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Norm-wise relative error `‖analytic - fd‖₂ / max(‖analytic‖₂, ‖fd‖₂)`.
///
/// Coordinates whose gradient sits many orders of magnitude below the rest
/// are swamped by round-off in `fd` (about `ε_mach·|f| / h`), which makes the
/// coordinate-wise ratio above meaningless for them; this measure is not.
pub fn finite_diff_rel_error<F>(mut f: F, point: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    assert!(h > 0.0, "step must be positive");
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length");
    let numeric = central_differences(|x| f(x).0, point, h);
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(&numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn central_differences<F>(mut f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_linear_functions() {
        let g = [0.5, -3.0, 2.25];
        let err = finite_diff_check(
            |x| (x.iter().zip(&g).map(|(a, b)| a * b).sum(), g.to_vec()),
            &[1.0, 2.0, -0.5],
            1e-5,
        );
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let err = finite_diff_check(|x| (x[0] * x[0], vec![x[0]]), &[1.0], 1e-5);
        assert!(err > 0.4);
    }

    #[test]
    fn norm_wise_error_accepts_exact_and_rejects_wrong() {
        let f = |x: &[f64]| (x[0] * x[0] + 3.0 * x[1], vec![2.0 * x[0], 3.0]);
        assert!(finite_diff_rel_error(f, &[0.7, -1.2], 1e-5) < 1e-9);
        assert!(finite_diff_rel_error(|x| (x[0] * x[0], vec![x[0]]), &[1.0], 1e-5) > 0.4);
        assert_eq!(finite_diff_rel_error(|_: &[f64]| (1.0, vec![0.0]), &[2.0], 1e-5), 0.0);
    }
}
