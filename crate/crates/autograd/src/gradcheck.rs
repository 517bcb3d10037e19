//! Central finite-difference checks.
//!
//! The checks only evaluate the scalar function itself, so they stay
//! independent of the backward pass they are used to verify.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub label: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error that tolerates values near zero via `floor`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` with respect to every element of `x`.
pub fn numeric_gradient(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[k] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (up - down) / (2.0 * eps);
    }
    out
}

/// Compares `analytic` against central differences of `f` over the elements of
/// parameter `id`. Returns every element whose relative error exceeds `tol`.
pub fn check_param(
    store: &ParamStore,
    id: ParamId,
    analytic: &Tensor,
    eps: f64,
    tol: f64,
    floor: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Vec<GradMismatch> {
    let mut probe = store.clone();
    let mut bad = Vec::new();
    let n = store.value(id).len();
    for k in 0..n {
        let orig = probe.value(id).data()[k];
        probe.value_mut(id).data_mut()[k] = orig + eps;
        let up = f(&probe);
        probe.value_mut(id).data_mut()[k] = orig - eps;
        let down = f(&probe);
        probe.value_mut(id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[k];
        if rel_error(a, numeric, floor) > tol {
            bad.push(GradMismatch { label: store.name(id).to_string(), index: k, analytic: a, numeric });
        }
    }
    bad
}
