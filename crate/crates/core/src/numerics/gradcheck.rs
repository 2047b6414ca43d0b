use super::{Graph, ParamStore, Var};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-12)`.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// Compare reverse-mode gradients of a scalar-valued `forward` with central
/// finite differences of step `eps`, for every entry of every parameter.
pub fn grad_check<Fwd>(
    forward: Fwd,
    params: &mut ParamStore<f64>,
    eps: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    Fwd: for<'p> Fn(&mut Graph<'p, f64>) -> Var,
{
    let eval = |params: &ParamStore<f64>| {
        let mut g = Graph::new(params);
        let l = forward(&mut g);
        g.value(l).item()
    };
    let analytic = {
        let mut g = Graph::new(params);
        let l = forward(&mut g);
        g.backward(l)?
    };
    let ids: Vec<_> = params.ids().collect();
    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.get(id).len();
        let mut max_diff: f64 = 0.0;
        let mut max_a: f64 = 0.0;
        let mut max_n: f64 = 0.0;
        for i in 0..n {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(params);
            params.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(params);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).data()[i];
            max_diff = max_diff.max((a - numeric).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
        }
        entries.push(GradCheckEntry {
            name: params.name(id).to_string(),
            rel_error: max_diff / max_a.max(max_n).max(1e-12),
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}
