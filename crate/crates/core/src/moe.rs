//! Expert groups with dense softmax gating.
//!
//! Each group holds `E` two-layer GELU experts and an affine gate over the
//! raw sub-network vector. Every expert runs on every input; the group output
//! is the gate-probability-weighted sum of all expert outputs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{DenseLayer, Graph, ParamStore, Tensor, Var};

/// Two dense layers with a GELU in between: `in -> hidden -> out`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertNetwork {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

impl ExpertNetwork {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: DenseLayer::new(store, &format!("{prefix}.dense.0"), in_dim, hidden_dim, rng),
            output: DenseLayer::new(store, &format!("{prefix}.dense.1"), hidden_dim, out_dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.gelu(h);
        self.output.forward(g, h)
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }
}

/// Graph handles produced by one pass through an [`ExpertGroup`].
#[derive(Debug, Clone, Copy)]
pub struct GroupOutput {
    /// Mixture output, `[rows x out_dim]`.
    pub mixture: Var,
    /// Gate probabilities, `[rows x E]`.
    pub probs: Var,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertGroup {
    pub experts: Vec<ExpertNetwork>,
    pub gate: DenseLayer,
}

impl ExpertGroup {
    /// Registers experts `{prefix}.expert.{e}` and the gate `{prefix}.gate`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        n_experts: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_experts < 2 {
            return Err(Error::Spec(format!("an expert group needs at least 2 experts, got {n_experts}")));
        }
        let experts = (0..n_experts)
            .map(|e| ExpertNetwork::new(store, &format!("{prefix}.expert.{e}"), in_dim, hidden_dim, out_dim, rng))
            .collect();
        let gate = DenseLayer::new(store, &format!("{prefix}.gate"), in_dim, n_experts, rng);
        Ok(Self { experts, gate })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn in_dim(&self) -> usize {
        self.gate.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.experts[0].out_dim()
    }

    /// Gate logits `g(x)` for `x: [rows x in_dim]`.
    pub fn gate_logits(&self, g: &mut Graph<'_>, x: Var) -> Var {
        self.gate.forward(g, x)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> GroupOutput {
        let logits = self.gate_logits(g, x);
        let probs = g.softmax_rows(logits);
        let mut mixture = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let out = expert.forward(g, x);
            let weight = g.slice_cols(probs, e, 1);
            let weighted = g.mul(out, weight);
            mixture = Some(match mixture {
                None => weighted,
                Some(acc) => g.add(acc, weighted),
            });
        }
        GroupOutput {
            mixture: mixture.expect("group has experts"),
            probs,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::shape(format!(
                "sub-network has {} entries, group expects {}",
                x.len(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    /// Softmax gate distribution over this group's experts for one sub-network.
    pub fn gate_probs(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut g = Graph::new(store);
        let xv = g.constant(Tensor::row(x.to_vec()));
        let logits = self.gate_logits(&mut g, xv);
        let probs = g.softmax_rows(logits);
        g.check_finite()?;
        Ok(g.value(probs).data().to_vec())
    }

    /// Output of expert `e` alone.
    pub fn expert_output(&self, store: &ParamStore, e: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let expert = self
            .experts
            .get(e)
            .ok_or_else(|| Error::shape(format!("expert {e} out of range")))?;
        let mut g = Graph::new(store);
        let xv = g.constant(Tensor::row(x.to_vec()));
        let out = expert.forward(&mut g, xv);
        g.check_finite()?;
        Ok(g.value(out).data().to_vec())
    }

    /// Dense mixture `sum_e p_e(x) f_e(x)` for one sub-network.
    pub fn moe_forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut g = Graph::new(store);
        let xv = g.constant(Tensor::row(x.to_vec()));
        let out = self.forward(&mut g, xv);
        g.check_finite()?;
        Ok(g.value(out.mixture).data().to_vec())
    }
}

/// Gate distributions recorded during one forward pass.
///
/// Rows are ordered subject-major: row `s * n_regions + i` belongs to
/// sub-network `i` of subject `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    pub n_subjects: usize,
    pub n_regions: usize,
    pub n_experts: usize,
    pub n_diseases: usize,
    /// Per group: flat `[(n_subjects * n_regions) x n_experts]`.
    pub expert_probs: Vec<Vec<f64>>,
    /// Flat `[(n_subjects * n_regions) x n_diseases]`.
    pub disease_weights: Vec<f64>,
}

impl GateTrace {
    pub fn is_empty(&self) -> bool {
        self.n_subjects == 0 || self.n_regions == 0 || self.expert_probs.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.n_subjects * self.n_regions
    }

    /// Expert distribution of `group` for sub-network `region` of `subject`.
    pub fn expert_probs_at(&self, group: usize, subject: usize, region: usize) -> &[f64] {
        let row = subject * self.n_regions + region;
        &self.expert_probs[group][row * self.n_experts..(row + 1) * self.n_experts]
    }

    pub fn disease_weights_at(&self, subject: usize, region: usize) -> &[f64] {
        let row = subject * self.n_regions + region;
        &self.disease_weights[row * self.n_diseases..(row + 1) * self.n_diseases]
    }

    /// Concatenates traces of successive passes (subjects appended in order).
    pub fn merge(&mut self, other: GateTrace) -> Result<()> {
        if self.n_subjects == 0 {
            *self = other;
            return Ok(());
        }
        if (self.n_regions, self.n_experts, self.n_diseases, self.expert_probs.len())
            != (other.n_regions, other.n_experts, other.n_diseases, other.expert_probs.len())
        {
            return Err(Error::shape("cannot merge gate traces of different layouts"));
        }
        for (mine, theirs) in self.expert_probs.iter_mut().zip(other.expert_probs) {
            mine.extend(theirs);
        }
        self.disease_weights.extend(other.disease_weights);
        self.n_subjects += other.n_subjects;
        Ok(())
    }

    /// Checks that every stored vector is a probability vector.
    pub fn validate(&self) -> Result<()> {
        let check = |v: &[f64]| v.iter().all(|&p| p >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        for probs in &self.expert_probs {
            if !probs.chunks(self.n_experts).all(check) {
                return Err(Error::Value("expert gate row is not a probability vector".into()));
            }
        }
        if !self.disease_weights.chunks(self.n_diseases).all(check) {
            return Err(Error::Value("disease weight row is not a probability vector".into()));
        }
        Ok(())
    }
}
