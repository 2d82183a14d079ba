use rand::Rng as _;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;
use crate::rng::rng_from;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Central differences at `h` and `h / 2` agreeing to this relative level
/// mark a smooth neighbourhood. Larger disagreement means the window
/// straddles a ReLU or max-pool kink, where no finite difference is a valid
/// reference, so the coordinate is redrawn.
const SMOOTH_TOL: f64 = 1e-5;

/// Redraw budget per probe before giving up on smoothness.
const MAX_REDRAWS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// Coordinates redrawn because they sat next to a kink.
    pub redrawn: usize,
    /// Parameter name and flat index of the worst probe.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic parameter gradients with central differences on
/// `n_probes` randomly chosen coordinates (entries visited round-robin).
/// Coordinates whose loss is not smooth within the difference window are
/// redrawn and counted in [`GradCheckReport::redrawn`].
///
/// `forward` builds a fresh graph from the store and returns the scalar loss
/// node; it must be deterministic, including any dropout masks.
pub fn grad_check<F>(
    mut forward: F,
    store: &mut ParamStore<f64>,
    n_probes: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let names: Vec<String> = store
        .entries()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    if names.is_empty() || n_probes == 0 {
        return Ok(GradCheckReport {
            probes: 0,
            max_rel_err: 0.0,
            redrawn: 0,
            worst: None,
        });
    }

    store.zero_grads();
    let (graph, loss) = forward(store)?;
    let grads = graph.backward(loss)?;
    store.accumulate_grads(&graph, &grads)?;
    drop(graph);
    let analytic: Vec<Vec<f64>> = names
        .iter()
        .map(|n| store.entry(n).map(|e| e.grad.data().to_vec()))
        .collect::<Result<_>>()?;
    store.zero_grads();

    let mut rng = rng_from(&[seed]);
    let mut report = GradCheckReport {
        probes: 0,
        max_rel_err: 0.0,
        redrawn: 0,
        worst: None,
    };
    let mut central = |store: &mut ParamStore<f64>, name: &str, idx: usize, h: f64| -> Result<f64> {
        let orig = store.value(name)?.data()[idx];
        store.value_mut(name)?.data_mut()[idx] = orig + h;
        let (g, l) = forward(store)?;
        let plus = g.value(l).item();
        store.value_mut(name)?.data_mut()[idx] = orig - h;
        let (g, l) = forward(store)?;
        let minus = g.value(l).item();
        store.value_mut(name)?.data_mut()[idx] = orig;
        Ok((plus - minus) / (2.0 * h))
    };
    for p in 0..n_probes {
        let k = p % names.len();
        let name = &names[k];
        let mut redraws = 0;
        let (idx, numeric) = loop {
            let idx = rng.random_range(0..analytic[k].len());
            let coarse = central(store, name, idx, FD_STEP)?;
            let fine = central(store, name, idx, FD_STEP / 2.0)?;
            if relative_error(coarse, fine) <= SMOOTH_TOL || redraws == MAX_REDRAWS {
                break (idx, coarse);
            }
            redraws += 1;
            report.redrawn += 1;
        };

        let err = relative_error(analytic[k][idx], numeric);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((name.clone(), idx));
        }
        report.probes += 1;
    }
    Ok(report)
}
