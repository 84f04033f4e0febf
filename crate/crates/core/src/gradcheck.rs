//! Central-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass, so it stays
//! independent of the backward implementation it is checking.

use crate::tensor::{Graph, Gradients, ParamStore, Var};

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor for the relative error; below it the comparison is
/// effectively absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Runs `build` on a fresh evaluation-mode tape and returns the scalar loss
/// together with the parameter gradients.
pub fn loss_and_grads(store: &ParamStore, build: impl FnOnce(&mut Graph<'_>) -> Var) -> (f64, Gradients) {
    let mut g = Graph::new(store);
    let loss = build(&mut g);
    let mut grads = Gradients::zeros_like(store);
    g.backward(loss, &mut grads);
    (g.value(loss).data()[0], grads)
}

pub fn check_param_gradients<F>(store: &mut ParamStore, f: F, step: f64) -> GradCheckReport
where
    F: Fn(&ParamStore) -> (f64, Gradients),
{
    check_param_gradients_filtered(store, f, step, |_| true)
}

/// Compares analytic and central-difference gradients for every scalar of
/// every parameter whose name passes `filter`.
pub fn check_param_gradients_filtered<F, P>(
    store: &mut ParamStore,
    f: F,
    step: f64,
    filter: P,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> (f64, Gradients),
    P: Fn(&str) -> bool,
{
    let (_, analytic) = f(store);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !filter(store.name(id)) {
            continue;
        }
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let (plus, _) = f(store);
            store.get_mut(id).data_mut()[i] = orig - step;
            let (minus, _) = f(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id).data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                if err >= report.max_rel_error {
                    report.worst_param = store.name(id).to_string();
                    report.worst_index = i;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    report
}
