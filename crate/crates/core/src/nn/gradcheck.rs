/// Compares an analytic gradient with central finite differences.
///
/// Returns the worst relative error over all coordinates, where the relative
/// error of one coordinate is `|a - n| / max(|a|, |n|, scale_floor)`. The floor
/// keeps coordinates whose true gradient is zero from dominating through
/// round-off.
pub fn gradient_check<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length must match params");
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Magnitude below which gradient coordinates are compared absolutely.
pub const GRAD_SCALE_FLOOR: f64 = 1e-6;
