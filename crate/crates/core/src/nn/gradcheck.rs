//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Minimum number of coordinates probed (all of them if fewer exist).
    pub min_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            min_coords: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Distinct parameter names that were probed.
    pub fn params_covered(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.coords.iter().map(|c| c.param.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Picks coordinates so every tensor contributes at least its fair share of
/// `min_coords` and the total reaches `min_coords`.
fn sample_coords(store: &ParamStore, cfg: &GradCheckConfig) -> Vec<(ParamId, usize)> {
    let total = store.numel();
    if total <= cfg.min_coords {
        return store
            .iter()
            .flat_map(|(id, _, t)| (0..t.len()).map(move |k| (id, k)))
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_tensor = cfg.min_coords.div_ceil(store.len().max(1));
    let mut picked = Vec::new();
    for (id, _, t) in store.iter() {
        let take = per_tensor.min(t.len());
        let mut chosen = index::sample(&mut rng, t.len(), take).into_vec();
        chosen.sort_unstable();
        picked.extend(chosen.into_iter().map(|k| (id, k)));
    }
    if picked.len() < cfg.min_coords {
        let taken: std::collections::HashSet<_> = picked.iter().copied().collect();
        let rest: Vec<_> = store
            .iter()
            .flat_map(|(id, _, t)| (0..t.len()).map(move |k| (id, k)))
            .filter(|c| !taken.contains(c))
            .collect();
        let extra = index::sample(&mut rng, rest.len(), cfg.min_coords - picked.len());
        picked.extend(extra.into_iter().map(|i| rest[i]));
        picked.sort_unstable();
    }
    picked
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` must build the same deterministic scalar each time it is called.
pub fn grad_check<F>(f: F, store: &mut ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        g.check_finite()?;
        Ok(g.scalar(out))
    };
    let grads = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        g.backward(out)?
    };
    let mut coords = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    for (id, k) in sample_coords(store, cfg) {
        let analytic = grads.get(id).map_or(0.0, |g| g[k]);
        let original = store.get(id).data()[k];
        store.get_mut(id).data_mut()[k] = original + cfg.step;
        let plus = eval(store);
        store.get_mut(id).data_mut()[k] = original - cfg.step;
        let minus = eval(store);
        store.get_mut(id).data_mut()[k] = original;
        let numeric = (plus? - minus?) / (2.0 * cfg.step);
        if !numeric.is_finite() {
            return Err(Error::Numerical(format!(
                "finite difference for {}[{k}] is not finite",
                store.name(id)
            )));
        }
        let rel_error = relative_error(analytic, numeric);
        max_rel_error = max_rel_error.max(rel_error);
        coords.push(CoordinateCheck {
            param: store.name(id).to_string(),
            index: k,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(GradCheckReport { max_rel_error, coords })
}
