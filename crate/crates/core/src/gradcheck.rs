//! Central finite-difference gradient checking.

/// Largest relative discrepancy between `analytic` and the central
/// difference `(f(w + eps e_i) - f(w - eps e_i)) / 2 eps` over all
/// coordinates, using `max(1e-12, |central|)` as the denominator.
pub fn finite_diff_check<F>(loss: F, params: &[f64], analytic: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let all: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_at(loss, params, analytic, eps, &all)
}

/// [`finite_diff_check`] restricted to the listed coordinates.
pub fn finite_diff_check_at<F>(
    loss: F,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: &[usize],
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let central = central_differences(loss, params, eps, coords);
    coords
        .iter()
        .zip(&central)
        .map(|(&i, c)| (analytic[i] - c).abs() / c.abs().max(1e-12))
        .fold(0.0, f64::max)
}

/// Central differences at the listed coordinates, in `coords` order.
pub fn central_differences<F>(mut loss: F, params: &[f64], eps: f64, coords: &[usize]) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = params.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = params[i] + eps;
            let up = loss(&probe);
            probe[i] = params[i] - eps;
            let down = loss(&probe);
            probe[i] = params[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Relative error with a scale-aware floor: `|a - c| / max(|c|, floor * max_j |c_j|)`.
///
/// The central difference of a loss `L` carries rounding noise of order
/// `ulp(L) / eps`, which can exceed a small fraction of tiny components and
/// is all there is for components that vanish exactly (e.g. parameters the
/// loss is invariant to). Components below `floor` of the largest one are
/// therefore compared at that scale instead of their own.
pub fn scaled_relative_error(analytic: &[f64], central: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), central.len());
    let scale = central.iter().fold(0.0_f64, |m, c| m.max(c.abs())) * floor;
    analytic
        .iter()
        .zip(central)
        .map(|(a, c)| (a - c).abs() / c.abs().max(scale).max(1e-300))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        // f(w) = sum (i+1) w_i^2 + w_0 w_1
        let f = |w: &[f64]| -> f64 {
            w.iter()
                .enumerate()
                .map(|(i, v)| (i + 1) as f64 * v * v)
                .sum::<f64>()
                + w[0] * w[1]
        };
        let w = [0.7, -1.3, 2.1];
        let grad = [2.0 * 0.7 + -1.3, 4.0 * -1.3 + 0.7, 6.0 * 2.1];
        assert!(finite_diff_check(f, &w, &grad, 1e-5) < 1e-7);
    }

    #[test]
    fn linear_is_exact() {
        let f = |w: &[f64]| 3.0 * w[0] - 2.0 * w[1];
        let err = finite_diff_check(f, &[0.5, 0.25], &[3.0, -2.0], 1e-3);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn floor_absorbs_vanishing_components() {
        let central = [1.0, 2e-10, 0.5];
        let analytic = [1.0, 0.0, 0.5];
        assert_eq!(
            finite_diff_check_at(|_| 0.0, &[0.0; 3], &[0.0; 3], 1.0, &[]),
            0.0
        );
        assert!(scaled_relative_error(&analytic, &central, 1e-3) < 1e-6);
        let off = [1.0, 0.0, 0.49];
        assert!(scaled_relative_error(&off, &central, 1e-3) > 1e-3);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let f = |w: &[f64]| w[0] * w[0];
        assert!(finite_diff_check(f, &[1.0], &[3.0], 1e-5) > 0.4);
    }
}
