use std::f64::consts::PI;

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Huber loss of the error `pred − target`.
pub fn huber(pred: f64, target: f64, delta: f64) -> f64 {
    let e = pred - target;
    if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * (e.abs() - 0.5 * delta)
    }
}

/// Derivative of [`huber`] with respect to `pred`.
pub fn huber_grad(pred: f64, target: f64, delta: f64) -> f64 {
    let e = pred - target;
    e.clamp(-delta, delta)
}

pub fn clamp_log_std(x: f64) -> f64 {
    x.clamp(LOG_STD_MIN, LOG_STD_MAX)
}

/// Negative log-density of a diagonal Gaussian, summed over dimensions.
/// `log_std` is clamped to `[-10, 2]` first.
pub fn gaussian_nll(mean: &[f64], log_std: &[f64], target: &[f64]) -> f64 {
    assert!(mean.len() == log_std.len() && mean.len() == target.len());
    mean.iter()
        .zip(log_std)
        .zip(target)
        .map(|((&m, &ls), &y)| gaussian_nll_1d(m, ls, y))
        .sum()
}

#[inline]
pub fn gaussian_nll_1d(mean: f64, log_std: f64, target: f64) -> f64 {
    let ls = clamp_log_std(log_std);
    let z = (target - mean) * (-ls).exp();
    0.5 * z * z + ls + 0.5 * (2.0 * PI).ln()
}

/// `(d/dmean, d/dlog_std)` of [`gaussian_nll_1d`]; the log-std derivative
/// vanishes where the clamp is active.
#[inline]
pub fn gaussian_nll_1d_grad(mean: f64, log_std: f64, target: f64) -> (f64, f64) {
    let ls = clamp_log_std(log_std);
    let inv_var = (-2.0 * ls).exp();
    let diff = target - mean;
    let d_mean = -diff * inv_var;
    let d_ls = if (LOG_STD_MIN..=LOG_STD_MAX).contains(&log_std) {
        1.0 - diff * diff * inv_var
    } else {
        0.0
    };
    (d_mean, d_ls)
}
