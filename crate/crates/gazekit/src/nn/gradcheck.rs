//! Central finite differences for gradient verification.

/// Numeric gradient of `f` at `x` via central differences with step `h`.
pub fn numeric_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let lp = f(&xp);
        xp[i] = orig - h;
        let lm = f(&xp);
        xp[i] = orig;
        g.push((lp - lm) / (2.0 * h));
    }
    g
}

/// Worst per-component relative error `|a - n| / max(|a|, |n|)`.
/// Components where both magnitudes are below `floor` count as matching.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs());
        if denom < floor {
            continue;
        }
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
