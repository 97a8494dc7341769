//! Central finite differences, the reference every analytic gradient in the
//! crate is checked against.

/// A scalar loss over a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &[f64]) -> f64;
    fn value_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>);
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], step: f64) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Fourth-order central stencil
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, which tolerates a larger
/// step and so loses less to rounding on large loss values.
pub fn finite_difference_4th<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], step: f64) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            let mut at = |d: f64| {
                x[i] = orig + d;
                f(&x)
            };
            let (p2, p1, m1, m2) = (at(2.0 * step), at(step), at(-step), at(-2.0 * step));
            x[i] = orig;
            (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * step)
        })
        .collect()
}

/// Largest coordinatewise `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is numerically zero from
/// dominating through cancellation noise in the differences.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub n_params: usize,
    pub loss: f64,
}

pub const FD_STEP: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-6;

/// Compares an objective's analytic gradient with central differences.
pub fn check_gradient<O: Objective + ?Sized>(objective: &O, params: &[f64]) -> GradCheck {
    let (loss, analytic) = objective.value_and_grad(params);
    let numeric = finite_difference_4th(|p| objective.value(p), params, FD_STEP);
    GradCheck {
        max_rel_error: max_relative_error(&analytic, &numeric, REL_FLOOR),
        n_params: params.len(),
        loss,
    }
}
