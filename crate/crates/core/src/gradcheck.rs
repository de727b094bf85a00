//! Central finite-difference checks of tape gradients.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::nn::ParamStore;

/// One compared entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
    /// Parameter tensors visited.
    pub params_checked: usize,
    /// Entries skipped because a perturbation crossed a non-smooth point.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic and central-difference gradients of the scalar built by
/// `loss` for every parameter tensor in `store`. Per tensor, the entry with
/// the largest analytic gradient plus `random_per_param` random entries are
/// checked. An entry whose `±step` perturbation moves any ReLU, knee or
/// clamp to its other side is not differentiable at that resolution; it is
/// counted in `skipped_kinks` and another random entry is drawn in its place
/// (up to a bounded number of attempts).
pub fn check_params(
    store: &ParamStore<f64>,
    loss: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    step: f64,
    floor: f64,
    random_per_param: usize,
    rng: &mut impl Rng,
) -> GradCheckReport {
    let mut g = Graph::new().track_kinks();
    let l = loss(&mut g, store);
    let base_sig = g.kink_signature();
    let grads = g.param_grads(&g.backward(l));
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new().track_kinks();
        let l = loss(&mut g, s);
        (g.value(l).item(), g.kink_signature())
    };
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for (name, value) in store.params() {
        let Some(grad) = grads.get(name) else { continue };
        report.params_checked += 1;
        let n = value.numel();
        let gd = grad.data();
        let argmax = (0..n).max_by(|&a, &b| gd[a].abs().total_cmp(&gd[b].abs())).unwrap_or(0);
        let want = 1 + random_per_param.min(n.saturating_sub(1));
        let mut done = Vec::new();
        let mut attempts = 0;
        while done.len() < want && attempts < 8 * want {
            let idx = if attempts == 0 { argmax } else { rng.random_range(0..n) };
            attempts += 1;
            if done.contains(&idx) {
                continue;
            }
            let orig = value.data()[idx];
            probe.get_mut(name).expect("cloned store").data_mut()[idx] = orig + step;
            let (up, sig_up) = eval(&probe);
            probe.get_mut(name).expect("cloned store").data_mut()[idx] = orig - step;
            let (down, sig_down) = eval(&probe);
            probe.get_mut(name).expect("cloned store").data_mut()[idx] = orig;
            if sig_up != base_sig || sig_down != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            done.push(idx);
            let numeric = (up - down) / (2.0 * step);
            let analytic = gd[idx];
            report.entries.push(GradEntry {
                param: name.clone(),
                index: idx,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric, floor),
            });
        }
    }
    report
}
