//! Central finite-difference oracle used to verify the hand-written gradients.

/// Central differences of `f` at `x` for every coordinate listed in `coords`.
pub fn central_difference<F>(x: &mut [f64], coords: &[usize], eps: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + eps;
            let plus = f(x);
            x[i] = orig - eps;
            let minus = f(x);
            x[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
///
/// The floor keeps coordinates whose true gradient is essentially zero from
/// dominating through round-off.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Every coordinate when `n <= limit`, otherwise an evenly strided subset that
/// always includes the first and last coordinate.
pub fn coordinate_sample(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    let mut v: Vec<usize> = (0..limit).map(|i| i * (n - 1) / (limit - 1)).collect();
    v.dedup();
    v
}
