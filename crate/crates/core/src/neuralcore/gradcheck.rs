use super::FlatParams;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max_i |analytic_i - fd_i| / max(|analytic_i|, |fd_i|, 1e-8)`
    pub max_relative_error: f64,
    /// Flat index of the parameter attaining the maximum.
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error of one analytic derivative against a central difference of
/// `loss_fn` with step `step` in parameter `index`.
pub fn relative_error_at<S, P, G, F>(
    params: &P,
    analytic: &G,
    loss_fn: &mut F,
    index: usize,
    step: f64,
) -> f64
where
    S: Scalar,
    P: FlatParams<S> + Clone,
    G: FlatParams<S>,
    F: FnMut(&P) -> S,
{
    let mut probe = params.clone();
    let original = probe.param(index);
    let h = S::c(step);
    probe.set_param(index, original + h);
    let up = loss_fn(&probe).as_f64();
    probe.set_param(index, original - h);
    let down = loss_fn(&probe).as_f64();
    let fd = (up - down) / (2.0 * step);
    let a = analytic.param(index).as_f64();
    let denom = a.abs().max(fd.abs()).max(1e-8);
    (a - fd).abs() / denom
}

/// Per-parameter relative errors, in flat order. See
/// [`finite_difference_check`].
pub fn relative_errors<S, P, G, F>(params: &P, analytic: &G, mut loss_fn: F, step: f64) -> Vec<f64>
where
    S: Scalar,
    P: FlatParams<S> + Clone,
    G: FlatParams<S>,
    F: FnMut(&P) -> S,
{
    assert_eq!(
        params.num_params(),
        analytic.num_params(),
        "gradient and parameters differ in size"
    );
    let mut probe = params.clone();
    let mut errors = Vec::with_capacity(params.num_params());
    for i in 0..params.num_params() {
        let original = probe.param(i);
        let h = S::c(step);
        probe.set_param(i, original + h);
        let up = loss_fn(&probe).as_f64();
        probe.set_param(i, original - h);
        let down = loss_fn(&probe).as_f64();
        probe.set_param(i, original);

        let fd = (up - down) / (2.0 * step);
        let a = analytic.param(i).as_f64();
        let denom = a.abs().max(fd.abs()).max(1e-8);
        errors.push((a - fd).abs() / denom);
    }
    errors
}

/// Compares `analytic` against central differences of `loss_fn` taken at
/// `params`, perturbing one flat parameter at a time by `±step`.
///
/// `loss_fn` must be deterministic: freeze any sampling noise and dropout
/// masks before calling this.
pub fn finite_difference_check<S, P, G, F>(
    params: &P,
    analytic: &G,
    loss_fn: F,
    step: f64,
) -> GradCheck
where
    S: Scalar,
    P: FlatParams<S> + Clone,
    G: FlatParams<S>,
    F: FnMut(&P) -> S,
{
    summarize(&relative_errors(params, analytic, loss_fn, step))
}

pub fn summarize(errors: &[f64]) -> GradCheck {
    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst_index: 0,
        checked: errors.len(),
    };
    for (i, &rel) in errors.iter().enumerate() {
        if rel > report.max_relative_error || rel.is_nan() {
            report.max_relative_error = rel;
            report.worst_index = i;
        }
    }
    report
}
