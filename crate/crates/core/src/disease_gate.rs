//! The disease gate: a sigmoid-hidden MLP mapping a sub-network to a
//! probability vector over disease groups, and the convex combination of the
//! groups' representations under those weights.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{DenseLayer, Graph, ParamStore, Tensor, Var};

/// `softmax(W2 sigmoid(W1 x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiseaseGate {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

impl DiseaseGate {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden_dim: usize, n_diseases: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: DenseLayer::new(store, &format!("{prefix}.dense.0"), in_dim, hidden_dim, rng),
            output: DenseLayer::new(store, &format!("{prefix}.dense.1"), hidden_dim, n_diseases, rng),
        }
    }

    pub fn n_diseases(&self) -> usize {
        self.output.out_dim
    }

    /// Disease weights for every row of `x`, `[rows x K]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.sigmoid(h);
        let logits = self.output.forward(g, h);
        g.softmax_rows(logits)
    }

    /// Disease weights for one sub-network.
    pub fn disease_weights(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.hidden.in_dim {
            return Err(Error::shape(format!(
                "sub-network has {} entries, disease gate expects {}",
                x.len(),
                self.hidden.in_dim
            )));
        }
        let mut g = Graph::new(store);
        let xv = g.constant(Tensor::row(x.to_vec()));
        let w = self.forward(&mut g, xv);
        g.check_finite()?;
        Ok(g.value(w).data().to_vec())
    }
}

/// Row-wise `sum_k weights[:, k] * reps[k]` on the tape.
pub fn disease_informed_var(g: &mut Graph<'_>, weights: Var, reps: &[Var]) -> Var {
    assert_eq!(g.value(weights).cols(), reps.len(), "one weight column per group");
    let mut acc = None;
    for (k, &rep) in reps.iter().enumerate() {
        let w = g.slice_cols(weights, k, 1);
        let term = g.mul(rep, w);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    acc.expect("at least one group")
}

/// Convex combination of group representations for one sub-network.
pub fn disease_informed(weights: &[f64], group_reps: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != group_reps.len() || group_reps.is_empty() {
        return Err(Error::shape(format!(
            "{} weights for {} group representations",
            weights.len(),
            group_reps.len()
        )));
    }
    let dim = group_reps[0].len();
    if group_reps.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("group representations differ in length"));
    }
    let mut out = vec![0.0; dim];
    for (w, rep) in weights.iter().zip(group_reps) {
        for (o, r) in out.iter_mut().zip(rep) {
            *o += w * r;
        }
    }
    Ok(out)
}
