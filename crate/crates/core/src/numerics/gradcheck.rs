//! Central finite-difference checks of recorded adjoints.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so entries whose true derivative is
/// ~0 are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Which entries of each parameter tensor get perturbed.
#[derive(Debug, Clone, Copy)]
pub struct Sampling {
    /// Tensors with at most this many entries are checked exhaustively; larger
    /// ones get their largest-|grad| entries plus a random subset.
    pub max_per_tensor: usize,
    pub seed: u64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            max_per_tensor: usize::MAX,
            seed: 0,
        }
    }
}

/// Compares `Graph::gradients` of the scalar built by `loss` against central
/// differences for every parameter in `store`.
pub fn check_params<F>(store: &mut ParamStore, sampling: Sampling, mut loss: F) -> Result<CheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    let grads = g.gradients(l)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut report = CheckReport::default();
    for id in ids {
        let n = store.get(id).numel();
        let analytic = grads
            .param(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let entries = pick_entries(&analytic, sampling.max_per_tensor, &mut rng);
        let mut worst: f64 = 0.0;
        for &i in &entries {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(store, &mut loss)?;
            store.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(store, &mut loss)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        report.tensors.push(TensorCheck {
            name: store.name(id).to_string(),
            checked: entries.len(),
            max_rel_err: worst,
        });
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore, loss: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    Ok(g.scalar(l))
}

fn pick_entries(analytic: &[f64], max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = analytic.len();
    if n <= max {
        return (0..n).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
    let top = (max / 2).max(1);
    let mut picked: Vec<usize> = order[..top].to_vec();
    for i in sample(rng, n, max - top) {
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}
