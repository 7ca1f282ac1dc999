//! Specialization regularizers and the composite training objective.
//!
//! Every loss exists twice: a plain `f64` function working on recorded
//! values, and a tape version (`*_var`) used for training. The tape versions
//! are built from generic ops; tests hold the two routes against each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::GateTrace;
use crate::nn::{Graph, Tensor, Var};

/// Norm floor for cosine similarity.
pub const COSINE_NORM_FLOOR: f64 = 1e-8;

/// Coefficients of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Expert-diversity weight.
    pub alpha: f64,
    /// Disease-diversity weight.
    pub beta: f64,
    /// Expert-balance weight.
    pub gamma: f64,
    /// Entropy coefficient inside the expert-diversity term.
    pub lambda: f64,
    /// Subtract the entropy term instead of adding it.
    #[serde(default)]
    pub subtract_entropy: bool,
    /// Train `alpha`, `beta`, `gamma` through a softplus parameterization.
    #[serde(default)]
    pub learnable: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
            lambda: 0.1,
            subtract_entropy: false,
            learnable: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Spec(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        if self.learnable && [self.alpha, self.beta, self.gamma].contains(&0.0) {
            return Err(Error::Spec(
                "learnable loss weights must start strictly positive (softplus range)".into(),
            ));
        }
        Ok(())
    }

    /// Signed multiplier of the mean entropy inside each group term.
    pub fn entropy_coefficient(&self) -> f64 {
        if self.subtract_entropy {
            -self.lambda
        } else {
            self.lambda
        }
    }
}

/// Value of every objective term at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub expert_diversity: f64,
    pub disease_diversity: f64,
    pub expert_balance: f64,
    pub total: f64,
    /// Coefficients in effect (differ from the config when learnable).
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    /// `|total - (cls + a*ed + b*dd + g*eb)|`.
    pub fn identity_residual(&self) -> f64 {
        let recombined = self.cls
            + self.alpha * self.expert_diversity
            + self.beta * self.disease_diversity
            + self.gamma * self.expert_balance;
        (self.total - recombined).abs()
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if let Some(bad) = p.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Value(format!("probability entry {bad} is not a nonnegative number")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Value(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

/// Population standard deviation of the entries of `v`.
fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// 1-D optimal transport cost between two distributions on the support
/// `0, 1, ..., E-1`: the L1 distance between their CDFs.
pub fn wasserstein1_discrete(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("supports differ: {} vs {}", p.len(), q.len())));
    }
    let mut cdf_p = 0.0;
    let mut cdf_q = 0.0;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        cdf_p += a;
        cdf_q += b;
        total += (cdf_p - cdf_q).abs();
    }
    Ok(total)
}

fn require_trace(trace: &GateTrace) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::State("gate trace is empty".into()));
    }
    Ok(())
}

/// `sum_k (1 - mean_std(G_k) + c * mean_entropy(G_k))` with `c = lambda` or
/// `-lambda` depending on `subtract_entropy`.
pub fn expert_diversity_loss(trace: &GateTrace, lambda: f64, subtract_entropy: bool) -> Result<f64> {
    require_trace(trace)?;
    let coeff = if subtract_entropy { -lambda } else { lambda };
    let mut total = 0.0;
    for probs in &trace.expert_probs {
        let rows = probs.chunks(trace.n_experts);
        let count = trace.rows() as f64;
        let mut std_sum = 0.0;
        let mut ent_sum = 0.0;
        for row in rows {
            std_sum += population_std(row);
            ent_sum += entropy(row)?;
        }
        total += 1.0 - std_sum / count + coeff * ent_sum / count;
    }
    Ok(total)
}

/// Mean over groups of `W1(mean gate distribution, uniform)`.
pub fn expert_balance_loss(trace: &GateTrace) -> Result<f64> {
    require_trace(trace)?;
    let e = trace.n_experts;
    let uniform = vec![1.0 / e as f64; e];
    let mut total = 0.0;
    for probs in &trace.expert_probs {
        let mut usage = vec![0.0; e];
        for row in probs.chunks(e) {
            for (u, p) in usage.iter_mut().zip(row) {
                *u += p;
            }
        }
        let count = trace.rows() as f64;
        usage.iter_mut().for_each(|u| *u /= count);
        total += wasserstein1_discrete(&usage, &uniform)?;
    }
    Ok(total / trace.expert_probs.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_NORM_FLOOR);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_NORM_FLOOR);
    dot / (na * nb)
}

/// Sorted distinct labels and, per sample, the position of its label.
fn present_classes(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let positions = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();
    (classes, positions)
}

/// Inter-class centroid similarity minus intra-class consistency.
///
/// Sums the cosine similarity over ordered pairs of distinct class centroids
/// present in the batch and subtracts the mean cosine similarity of each
/// sample to its own class centroid.
pub fn disease_diversity_loss(reps: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if reps.is_empty() || reps.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} representations with {} labels",
            reps.len(),
            labels.len()
        )));
    }
    let dim = reps[0].len();
    if reps.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("representations differ in length"));
    }
    let (classes, positions) = present_classes(labels);
    let mut centroids = vec![vec![0.0; dim]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for (rep, &pos) in reps.iter().zip(&positions) {
        counts[pos] += 1;
        for (c, r) in centroids[pos].iter_mut().zip(rep) {
            *c += r;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let mut pairs = 0.0;
    for i in 0..classes.len() {
        for j in 0..classes.len() {
            if i != j {
                pairs += cosine(&centroids[i], &centroids[j]);
            }
        }
    }
    let consistency = reps
        .iter()
        .zip(&positions)
        .map(|(rep, &pos)| cosine(rep, &centroids[pos]))
        .sum::<f64>()
        / reps.len() as f64;
    Ok(pairs - consistency)
}

/// Assembles the objective `cls + alpha ed + beta dd + gamma eb`.
pub fn total_loss(cls: f64, parts: [f64; 3], w: &LossWeights) -> Result<LossBreakdown> {
    if !cls.is_finite() || parts.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical(format!("non-finite loss term: cls {cls}, parts {parts:?}")));
    }
    let [ed, dd, eb] = parts;
    Ok(LossBreakdown {
        cls,
        expert_diversity: ed,
        disease_diversity: dd,
        expert_balance: eb,
        total: cls + w.alpha * ed + w.beta * dd + w.gamma * eb,
        alpha: w.alpha,
        beta: w.beta,
        gamma: w.gamma,
    })
}

/// Tape version of [`expert_diversity_loss`] over per-group `[rows x E]` gate probabilities.
pub fn expert_diversity_var(g: &mut Graph<'_>, gate_probs: &[Var], entropy_coefficient: f64) -> Var {
    let mut total = None;
    for &probs in gate_probs {
        let e = g.value(probs).cols() as f64;
        let sums = g.row_sums(probs);
        let mean = g.scale(sums, 1.0 / e);
        let dev = g.sub(probs, mean);
        let sq = g.mul(dev, dev);
        let var = g.row_sums(sq);
        let var = g.scale(var, 1.0 / e);
        let std = g.sqrt(var);
        let mean_std = g.mean_all(std);

        let safe = g.clamp_min(probs, f64::MIN_POSITIVE);
        let logp = g.ln(safe);
        let plogp = g.mul(probs, logp);
        let neg_ent = g.row_sums(plogp);
        let mean_neg_ent = g.mean_all(neg_ent);

        let term = g.scale(mean_std, -1.0);
        let term = g.add_scalar(term, 1.0);
        let ent_term = g.scale(mean_neg_ent, -entropy_coefficient);
        let term = g.add(term, ent_term);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    total.expect("at least one group")
}

/// Tape version of [`expert_balance_loss`].
pub fn expert_balance_var(g: &mut Graph<'_>, gate_probs: &[Var]) -> Var {
    let mut total = None;
    for &probs in gate_probs {
        let e = g.value(probs).cols();
        let usage = g.col_means(probs);
        let cdf = g.cumsum_rows(usage);
        let uniform_cdf = g.constant(Tensor::row((1..=e).map(|j| j as f64 / e as f64).collect()));
        let diff = g.sub(cdf, uniform_cdf);
        let abs = g.abs(diff);
        let w1 = g.sum_all(abs);
        total = Some(match total {
            None => w1,
            Some(t) => g.add(t, w1),
        });
    }
    let total = total.expect("at least one group");
    g.scale(total, 1.0 / gate_probs.len() as f64)
}

fn normalize_rows(g: &mut Graph<'_>, x: Var) -> Var {
    let sq = g.mul(x, x);
    let norms = g.row_sums(sq);
    let norms = g.sqrt(norms);
    let norms = g.clamp_min(norms, COSINE_NORM_FLOOR);
    g.div(x, norms)
}

/// Tape version of [`disease_diversity_loss`] for `reps: [B x D]`.
pub fn disease_diversity_var(g: &mut Graph<'_>, reps: Var, labels: &[usize]) -> Result<Var> {
    let b = g.value(reps).rows();
    if b == 0 || labels.len() != b {
        return Err(Error::shape(format!("{b} representations with {} labels", labels.len())));
    }
    let (classes, positions) = present_classes(labels);
    let centroids: Vec<Var> = (0..classes.len())
        .map(|pos| {
            let members: Vec<usize> = (0..b).filter(|&s| positions[s] == pos).collect();
            let rows = g.select_rows(reps, &members);
            g.col_means(rows)
        })
        .collect();
    let stacked = g.concat_rows(&centroids);
    let unit_centroids = normalize_rows(g, stacked);
    let unit_reps = normalize_rows(g, reps);

    let own = g.select_rows(unit_centroids, &positions);
    let agreement = g.mul(unit_reps, own);
    let per_sample = g.row_sums(agreement);
    let consistency = g.mean_all(per_sample);

    let p = classes.len();
    if p == 1 {
        return Ok(g.scale(consistency, -1.0));
    }
    let sims = g.matmul_bt(unit_centroids, unit_centroids);
    let mask = g.constant(Tensor::matrix(
        p,
        p,
        (0..p * p).map(|k| if k / p == k % p { 0.0 } else { 1.0 }).collect(),
    ));
    let off_diag = g.mul(sims, mask);
    let pairs = g.sum_all(off_diag);
    Ok(g.sub(pairs, consistency))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckConfig, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace_from_rows(groups: Vec<Vec<Vec<f64>>>, n_subjects: usize, n_regions: usize) -> GateTrace {
        let n_experts = groups[0][0].len();
        let rows = n_subjects * n_regions;
        GateTrace {
            n_subjects,
            n_regions,
            n_experts,
            n_diseases: groups.len(),
            expert_probs: groups.into_iter().map(|g| g.concat()).collect(),
            disease_weights: vec![1.0 / 3.0; rows * 3],
        }
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[1.0 / 3.0; 3]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let h = entropy(&[0.5, 0.25, 0.25]).unwrap();
        let by_hand = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((h - by_hand).abs() < 1e-15);
        assert!((h - 1.039_721).abs() < 1e-6);
        assert!(matches!(entropy(&[1.2, -0.2]), Err(Error::Value(_))));
    }

    #[test]
    fn entropy_extremes_on_grid() {
        for e in 2..=4usize {
            let uniform = vec![1.0 / e as f64; e];
            let max = entropy(&uniform).unwrap();
            assert!((max - (e as f64).ln()).abs() < 1e-12);
            let mut one_hot = vec![0.0; e];
            one_hot[e - 1] = 1.0;
            assert_eq!(entropy(&one_hot).unwrap(), 0.0);
            // exhaustive grid of step 0.1 on the simplex
            let steps = 10usize;
            let mut grid = vec![vec![]];
            for _ in 0..e - 1 {
                grid = grid
                    .into_iter()
                    .flat_map(|prefix: Vec<usize>| {
                        let used: usize = prefix.iter().sum();
                        (0..=steps - used).map(move |k| {
                            let mut p = prefix.clone();
                            p.push(k);
                            p
                        })
                    })
                    .collect();
            }
            for prefix in grid {
                let used: usize = prefix.iter().sum();
                let mut p: Vec<f64> = prefix.iter().map(|&k| k as f64 / steps as f64).collect();
                p.push((steps - used) as f64 / steps as f64);
                let h = entropy(&p).unwrap();
                assert!(h <= max + 1e-12 && h >= 0.0);
            }
        }
    }

    #[test]
    fn wasserstein_examples() {
        let u = [1.0 / 3.0; 3];
        assert_eq!(wasserstein1_discrete(&u, &u).unwrap(), 0.0);
        let w = wasserstein1_discrete(&[1.0, 0.0, 0.0], &u).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
        assert!(matches!(
            wasserstein1_discrete(&[1.0], &[0.5, 0.5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn expert_diversity_one_hot_and_uniform() {
        let one_hot = vec![vec![vec![1.0, 0.0, 0.0]; 4]; 3];
        let t = trace_from_rows(one_hot, 2, 2);
        let v = expert_diversity_loss(&t, 0.1, false).unwrap();
        let std = (2.0f64 / 9.0).sqrt();
        assert!((v - 3.0 * (1.0 - std)).abs() < 1e-12);
        assert!((v - 1.5858).abs() < 1e-4);

        let uniform = vec![vec![vec![1.0 / 3.0; 3]; 4]; 3];
        let t = trace_from_rows(uniform, 2, 2);
        assert!((expert_diversity_loss(&t, 0.0, false).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn expert_diversity_decreases_toward_one_hot() {
        let mut last = f64::INFINITY;
        for step in 0..=20 {
            let s = step as f64 / 20.0;
            let row = vec![1.0 / 3.0 + s * 2.0 / 3.0, (1.0 - s) / 3.0, (1.0 - s) / 3.0];
            let t = trace_from_rows(vec![vec![row; 2]; 3], 1, 2);
            let v = expert_diversity_loss(&t, 0.0, false).unwrap();
            assert!(v < last, "not decreasing at step {step}");
            last = v;
        }
    }

    #[test]
    fn expert_balance_examples() {
        let balanced = trace_from_rows(vec![vec![vec![1.0 / 3.0; 3]; 4]; 2], 2, 2);
        assert!(expert_balance_loss(&balanced).unwrap().abs() < 1e-12);
        // rows that average to uniform without being uniform
        let mixed_rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let t = trace_from_rows(vec![mixed_rows; 1], 3, 1);
        assert!(expert_balance_loss(&t).unwrap().abs() < 1e-12);
        let collapsed = trace_from_rows(vec![vec![vec![1.0, 0.0, 0.0]; 4]; 3], 2, 2);
        assert!((expert_balance_loss(&collapsed).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_trace_is_state_error() {
        let t = GateTrace {
            n_subjects: 0,
            n_regions: 0,
            n_experts: 3,
            n_diseases: 3,
            expert_probs: vec![],
            disease_weights: vec![],
        };
        assert!(matches!(expert_balance_loss(&t), Err(Error::State(_))));
        assert!(matches!(expert_diversity_loss(&t, 0.1, false), Err(Error::State(_))));
    }

    #[test]
    fn disease_diversity_examples() {
        // Samples equal to orthonormal centroids.
        let reps = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0], vec![0.0, 0.0, 2.0]];
        let v = disease_diversity_loss(&reps, &[0, 1, 2, 2]).unwrap();
        assert!((v + 1.0).abs() < 1e-12);
        // Single class present.
        let v = disease_diversity_loss(&reps[2..], &[2, 2]).unwrap();
        assert!((v + 1.0).abs() < 1e-12);
        // All identical across three classes: 6 ordered pairs.
        let same = vec![vec![0.3, -0.4]; 6];
        let v = disease_diversity_loss(&same, &[0, 0, 1, 1, 2, 2]).unwrap();
        assert!((v - 5.0).abs() < 1e-12);
        // Single sample.
        assert!((disease_diversity_loss(&[vec![1.0, 2.0]], &[1]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn disease_diversity_decreases_as_centroids_separate() {
        // Two classes, each a tight pair around its centroid; centroids rotate apart.
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let theta = step as f64 / 10.0 * std::f64::consts::FRAC_PI_2;
            let c0 = [1.0, 0.0, 0.0];
            let c1 = [theta.cos(), theta.sin(), 0.0];
            let jitter = [0.0, 0.0, 0.1];
            let reps = vec![
                vec![c0[0], c0[1], jitter[2]],
                vec![c0[0], c0[1], -jitter[2]],
                vec![c1[0], c1[1], jitter[2]],
                vec![c1[0], c1[1], -jitter[2]],
            ];
            let v = disease_diversity_loss(&reps, &[0, 0, 1, 1]).unwrap();
            if step > 0 {
                assert!(v < last, "not decreasing at step {step}");
            }
            last = v;
        }
    }

    #[test]
    fn zero_vector_uses_norm_floor() {
        let v = disease_diversity_loss(&[vec![0.0, 0.0], vec![1.0, 0.0]], &[0, 1]).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn total_loss_examples() {
        let off = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(0.7, [3.0, -2.0, 1.0], &off).unwrap().total, 0.7);
        let b = total_loss(1.0, [1.0, 1.0, 1.0], &LossWeights::default()).unwrap();
        assert!((b.total - 1.3).abs() < 1e-12);
        assert!(b.identity_residual() < 1e-12);
        assert!(matches!(
            total_loss(f64::NAN, [0.0; 3], &off),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let neg = LossWeights {
            beta: -0.1,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
    }

    /// Random gate logits as parameters; softmax gives strictly interior rows.
    fn random_gate_store(groups: usize, rows: usize, e: usize, seed: u64) -> (ParamStore, Vec<crate::nn::ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids = (0..groups)
            .map(|k| {
                let data = (0..rows * e).map(|_| rng.gen_range(-2.0..2.0)).collect();
                store.insert(format!("logits.{k}"), Tensor::matrix(rows, e, data))
            })
            .collect();
        (store, ids)
    }

    fn probs_rows(store: &ParamStore, id: crate::nn::ParamId) -> Vec<f64> {
        let mut g = Graph::new(store);
        let l = g.param(id);
        let p = g.softmax_rows(l);
        g.value(p).data().to_vec()
    }

    #[test]
    fn tape_gate_losses_match_plain_and_pass_gradcheck() {
        let (groups, n_subjects, n_regions, e) = (3, 2, 4, 3);
        let rows = n_subjects * n_regions;
        let (mut store, ids) = random_gate_store(groups, rows, e, 42);
        let trace = GateTrace {
            n_subjects,
            n_regions,
            n_experts: e,
            n_diseases: groups,
            expert_probs: ids.iter().map(|&id| probs_rows(&store, id)).collect(),
            disease_weights: vec![1.0 / 3.0; rows * groups],
        };
        for subtract in [false, true] {
            let coeff = if subtract { -0.1 } else { 0.1 };
            let mut g = Graph::new(&store);
            let probs: Vec<Var> = ids
                .iter()
                .map(|&id| {
                    let l = g.param(id);
                    g.softmax_rows(l)
                })
                .collect();
            let ed = expert_diversity_var(&mut g, &probs, coeff);
            let eb = expert_balance_var(&mut g, &probs);
            let plain_ed = expert_diversity_loss(&trace, 0.1, subtract).unwrap();
            assert!((g.scalar(ed) - plain_ed).abs() < 1e-12);
            assert!((g.scalar(eb) - expert_balance_loss(&trace).unwrap()).abs() < 1e-12);
        }

        for which in 0..2 {
            let report = grad_check(
                |g| {
                    let probs: Vec<Var> = ids
                        .iter()
                        .map(|&id| {
                            let l = g.param(id);
                            g.softmax_rows(l)
                        })
                        .collect();
                    Ok(if which == 0 {
                        expert_diversity_var(g, &probs, 0.1)
                    } else {
                        expert_balance_var(g, &probs)
                    })
                },
                &mut store,
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "loss {which}: {:?}", report.worst());
        }
    }

    #[test]
    fn tape_disease_diversity_matches_plain_and_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let data: Vec<f64> = (0..7 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let id = store.insert("reps", Tensor::matrix(7, 5, data.clone()));
        let labels = [0, 2, 1, 0, 2, 2, 0];
        let rows: Vec<Vec<f64>> = data.chunks(5).map(<[f64]>::to_vec).collect();
        let plain = disease_diversity_loss(&rows, &labels).unwrap();
        let mut g = Graph::new(&store);
        let r = g.param(id);
        let v = disease_diversity_var(&mut g, r, &labels).unwrap();
        assert!((g.scalar(v) - plain).abs() < 1e-12);

        let report = grad_check(
            |g| {
                let r = g.param(id);
                disease_diversity_var(g, r, &labels)
            },
            &mut store,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{:?}", report.worst());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0f64..1.0, len).prop_filter_map("nonzero mass", |v| {
                let s: f64 = v.iter().sum();
                (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn w1_metric_axioms(p in simplex(4), q in simplex(4), r in simplex(4)) {
                let pq = wasserstein1_discrete(&p, &q).unwrap();
                let qp = wasserstein1_discrete(&q, &p).unwrap();
                let pr = wasserstein1_discrete(&p, &r).unwrap();
                let rq = wasserstein1_discrete(&r, &q).unwrap();
                prop_assert!(pq >= 0.0);
                prop_assert!((pq - qp).abs() <= 1e-9);
                prop_assert!(wasserstein1_discrete(&p, &p).unwrap() <= 1e-9);
                prop_assert!(pq <= pr + rq + 1e-9);
            }
        }
    }
}
