//! Central-difference gradient checking.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked in full.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords_per_param: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink (max-pool
    /// selection, relu sign, clamp) or the base point sat on a max-pool tie.
    pub skipped: usize,
    pub worst: Option<(String, usize)>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backprop gradients of the scalar built by `loss_fn` against
/// central differences for the parameters in `ids`.
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&cfg.epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {} outside [1e-7, 1e-3]",
            cfg.epsilon
        )));
    }
    let mut graph = Graph::new();
    let loss = loss_fn(store, &mut graph)?;
    let grads = graph.backward(loss)?;
    let base_signature = graph.kink_signature();
    let base_ties = graph.tied_pool_windows();

    let eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let l = loss_fn(store, &mut g)?;
        Ok((g.scalar(l), g.kink_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.value(id).len();
        let analytic = grads
            .param(id)
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= cfg.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = index::sample(&mut rng, n, cfg.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + cfg.epsilon;
            let (plus, sig_plus) = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - cfg.epsilon;
            let (minus, sig_minus) = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;

            let crosses_kink = sig_plus != base_signature || sig_minus != base_signature;
            let on_tie = base_ties > 0 && (sig_plus != sig_minus);
            if crosses_kink || on_tie {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
