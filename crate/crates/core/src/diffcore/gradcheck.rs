use serde::Serialize;

use super::params::{ParamId, ParameterStore};
use super::tape::{NodeId, Tape};
use crate::error::Result;
use crate::scalar::Scalar;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Below this magnitude a gradient is compared in absolute terms. Central
/// differences at h = 1e-5 on an O(1) loss carry roundoff near 1e-11, which
/// would swamp a relative comparison of gradients around 1e-9.
pub const FLOOR: f64 = 1e-6;

/// Checks `f`'s reverse-mode gradient at the current point of `store`.
///
/// Each coordinate is compared to `(f(θ+h) − f(θ−h)) / 2h`; the reported
/// error is `|g_ad − g_fd| / max(FLOOR, |g_ad| + |g_fd|)`, maximized over all
/// coordinates. `store` is restored before returning.
pub fn grad_check<S, F>(mut f: F, store: &mut ParameterStore<S>, step: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, &ParameterStore<S>) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    store.set_grads(&grads);

    let h = S::lit(step);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for k in 0..store.parameter(id).value.len() {
            let original = store.parameter(id).value[k];
            store.parameter_mut(id).value[k] = original + h;
            let plus = eval(&mut f, store)?;
            store.parameter_mut(id).value[k] = original - h;
            let minus = eval(&mut f, store)?;
            store.parameter_mut(id).value[k] = original;

            let fd = (plus - minus) / (2.0 * step);
            let ad = store.parameter(id).grad[k].as_f64();
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(FLOOR);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((store.parameter(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

fn eval<S, F>(f: &mut F, store: &ParameterStore<S>) -> Result<f64>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, &ParameterStore<S>) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    Ok(tape.scalar(loss).as_f64())
}
