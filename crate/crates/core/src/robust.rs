//! Small robust-statistics helpers shared by the IRLS loops.

/// Consistency factor turning a median absolute deviation into a Gaussian sigma.
pub const MAD_TO_SIGMA: f64 = 1.482_602_218_505_602;

/// Median of the values; `None` for an empty slice. NaNs sort last.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Robust sigma of residual magnitudes, `1.4826 * median(|r|)`.
pub fn robust_scale(residuals: &[f64]) -> f64 {
    let abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    median(&abs).map_or(0.0, |m| MAD_TO_SIGMA * m)
}

/// IRLS weight of the Huber loss for a residual of magnitude `r`.
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    let r = r.abs();
    if r <= delta {
        1.0
    } else {
        delta / r
    }
}

/// Huber loss `rho(r)` scaled so that it equals `r^2` inside the threshold.
pub fn huber_cost(r: f64, delta: f64) -> f64 {
    let r = r.abs();
    if r <= delta {
        r * r
    } else {
        2.0 * delta * r - delta * delta
    }
}

/// Tukey biweight: `(1 - (r/c)^2)^2` inside `c`, zero outside.
pub fn tukey_weight(residual: f64, c: f64) -> f64 {
    let u = residual / c;
    if u.abs() >= 1.0 {
        0.0
    } else {
        let v = 1.0 - u * u;
        v * v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even_empty() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn huber_is_continuous_at_threshold() {
        let d = 2.0;
        assert_eq!(huber_weight(1.0, d), 1.0);
        assert_eq!(huber_weight(4.0, d), 0.5);
        assert!((huber_cost(d, d) - huber_cost(d + 1e-12, d)).abs() < 1e-10);
        assert_eq!(huber_cost(4.0, d), 12.0);
    }
}
