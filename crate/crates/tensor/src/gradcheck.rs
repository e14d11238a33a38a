//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward closure, so it stays
//! independent of the reverse pass it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Parameter name and flat index where it occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative error used throughout: `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar returned by `f` against central
/// differences with step `eps`, for every trainable parameter in `store`.
/// At most `max_coords` coordinates per parameter are probed (evenly strided).
pub fn check<Fwd>(store: &mut ParamStore<f64>, eps: f64, floor: f64, max_coords: usize, f: Fwd) -> Result<GradCheckReport>
where
    Fwd: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    store.zero_grads();
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(store);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    for id in ids {
        let n = store.value(id).numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - eps;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let e = rel_err(analytic, numeric, floor);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                if e >= report.max_rel_err {
                    report.worst = Some((store.get(id).name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
