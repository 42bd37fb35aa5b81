use super::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences `(f(θ+ε) − f(θ−ε)) / 2ε`, coordinate by coordinate.
///
/// The error of one coordinate is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check_params(store, &ids, eps, build)
}

/// As [`grad_check`], restricted to the listed parameters.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("grad_check needs eps > 0, got {eps}")));
    }
    let analytic = {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        g.gradients(loss, store)?
    };
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        let v = g
            .value(loss)
            .item()
            .ok_or_else(|| Error::contract("grad_check objective must be scalar"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric { op: "grad_check" })
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for &id in params {
        for i in 0..store.get(id).len() {
            let original = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = original + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = original - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.get(id).data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
