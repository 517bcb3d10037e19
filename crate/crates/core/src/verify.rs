//! Finite-difference gradient verification over a whole parameter store.

use etts_autograd::gradcheck::{rel_error, GradMismatch};
use etts_autograd::{Gradients, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }
}

/// Checks up to `budget` scalar entries spread evenly over every trainable
/// parameter that received a gradient, using central differences of `f`.
pub fn gradient_check(
    store: &ParamStore,
    analytic: &Gradients,
    budget: usize,
    eps: f64,
    tol: f64,
    floor: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let ids: Vec<_> = store.ids().filter(|&id| !store.is_frozen(id) && analytic.get(id).is_some()).collect();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, failures: Vec::new() };
    if ids.is_empty() || budget == 0 {
        return report;
    }
    let per = budget.div_ceil(ids.len()).max(1);
    let mut probe = store.clone();
    'outer: for id in ids {
        let n = store.value(id).len();
        let take = per.min(n);
        for j in 0..take {
            if report.checked >= budget {
                break 'outer;
            }
            let k = j * n / take;
            let orig = probe.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = orig + eps;
            let up = f(&probe);
            probe.value_mut(id).data_mut()[k] = orig - eps;
            let down = f(&probe);
            probe.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).expect("filtered").data()[k];
            let err = rel_error(a, numeric, floor);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
            if err > tol {
                report.failures.push(GradMismatch { label: store.name(id).to_string(), index: k, analytic: a, numeric });
            }
        }
    }
    report
}
