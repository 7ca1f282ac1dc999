//! The full classifier: K expert groups and a disease gate per sub-network,
//! a region-embedded token sequence through a transformer, mean pooling and
//! an MLP head. Also relevance extraction and checkpoint persistence.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::connectome::SubNetworkBatch;
use crate::disease_gate::{disease_informed_var, DiseaseGate};
use crate::error::{Error, Result};
use crate::losses::{
    disease_diversity_var, expert_balance_var, expert_diversity_var, LossBreakdown, LossWeights,
};
use crate::moe::{ExpertGroup, GateTrace};
use crate::nn::{DenseLayer, Graph, ParamId, ParamStore, Tensor, TransformerDims, TransformerLayer, Var};
use crate::rng::{sub_stream, Stream};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const CHECKPOINT_FORMAT: &str = "brainnet-moe-checkpoint/1";

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_regions: usize,
    /// Number of classes, expert groups and disease-gate outputs.
    pub n_classes: usize,
    pub experts_per_group: usize,
    pub expert_hidden: usize,
    pub model_dim: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub gate_hidden: usize,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_regions: 148,
            n_classes: 3,
            experts_per_group: 3,
            expert_hidden: 256,
            model_dim: 128,
            transformer_layers: 2,
            heads: 1,
            gate_hidden: 64,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_regions", self.n_regions),
            ("expert_hidden", self.expert_hidden),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("gate_hidden", self.gate_hidden),
        ] {
            if v == 0 {
                return Err(Error::Spec(format!("{name} must be positive")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::Spec(format!("n_classes must be at least 2, got {}", self.n_classes)));
        }
        if self.experts_per_group < 2 {
            return Err(Error::Spec(format!(
                "experts_per_group must be at least 2, got {}",
                self.experts_per_group
            )));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Spec(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        self.loss.validate()
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[B x K]`
    pub logits: Var,
    /// Whole-brain representation, `[B x model_dim]`.
    pub pooled: Var,
    /// Per group, `[B*N x E]`.
    pub group_probs: Vec<Var>,
    /// `[B*N x K]`
    pub disease_weights: Var,
}

/// Tape handles of every objective term.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub forward: ForwardVars,
    pub cls: Var,
    pub expert_diversity: Var,
    pub disease_diversity: Var,
    pub expert_balance: Var,
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph<'_>) -> LossBreakdown {
        LossBreakdown {
            cls: g.scalar(self.cls),
            expert_diversity: g.scalar(self.expert_diversity),
            disease_diversity: g.scalar(self.disease_diversity),
            expert_balance: g.scalar(self.expert_balance),
            total: g.scalar(self.total),
            alpha: g.scalar(self.alpha),
            beta: g.scalar(self.beta),
            gamma: g.scalar(self.gamma),
        }
    }
}

/// Plain results of a forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub pooled: Tensor,
    pub trace: GateTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LearnableWeights {
    alpha: ParamId,
    beta: ParamId,
    gamma: ParamId,
}

#[derive(Debug, Clone)]
pub struct BrainNetMoE {
    config: ModelConfig,
    store: ParamStore,
    pub groups: Vec<ExpertGroup>,
    pub disease_gate: DiseaseGate,
    pub region_embedding: ParamId,
    pub transformer: Vec<TransformerLayer>,
    pub classifier: [DenseLayer; 2],
    learnable: Option<LearnableWeights>,
}

/// Inverse of softplus, for initializing raw learnable weights.
fn softplus_inverse(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl BrainNetMoE {
    /// Builds and initializes a model from the `init` stream of `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = sub_stream(config.seed, Stream::Init);
        let mut store = ParamStore::new();
        let n = config.n_regions;
        let d = config.model_dim;
        let groups = (0..config.n_classes)
            .map(|k| {
                ExpertGroup::new(
                    &mut store,
                    &format!("group.{k}"),
                    n,
                    config.experts_per_group,
                    config.expert_hidden,
                    d,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let disease_gate = DiseaseGate::new(&mut store, "disease_gate", n, config.gate_hidden, config.n_classes, &mut rng);
        let region_embedding = store.glorot("region_embedding", n, d, &mut rng);
        let dims = TransformerDims {
            model_dim: d,
            heads: config.heads,
        };
        let transformer = (0..config.transformer_layers)
            .map(|l| TransformerLayer::new(&mut store, &format!("transformer.{l}"), dims, &mut rng))
            .collect();
        let classifier = [
            DenseLayer::new(&mut store, "classifier.dense.0", d, d, &mut rng),
            DenseLayer::new(&mut store, "classifier.dense.1", d, config.n_classes, &mut rng),
        ];
        let learnable = config.loss.learnable.then(|| {
            let w = config.loss;
            LearnableWeights {
                alpha: store.insert("loss.alpha", Tensor::scalar(softplus_inverse(w.alpha))),
                beta: store.insert("loss.beta", Tensor::scalar(softplus_inverse(w.beta))),
                gamma: store.insert("loss.gamma", Tensor::scalar(softplus_inverse(w.gamma))),
            }
        });
        Ok(Self {
            config,
            store,
            groups,
            disease_gate,
            region_embedding,
            transformer,
            classifier,
            learnable,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Loss coefficients currently in effect.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.config.loss;
        if let Some(ids) = self.learnable {
            let sp = |id: ParamId| {
                let raw = self.store.get(id).data()[0];
                raw.max(0.0) + (-raw.abs()).exp().ln_1p()
            };
            w.alpha = sp(ids.alpha);
            w.beta = sp(ids.beta);
            w.gamma = sp(ids.gamma);
        }
        w
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let n = self.config.n_regions;
        if x.cols() != n || x.rows() == 0 || !x.rows().is_multiple_of(n) {
            return Err(Error::shape(format!(
                "input is {}x{}, model expects a stack of {n}x{n} subjects",
                x.rows(),
                x.cols()
            )));
        }
        Ok(x.rows() / n)
    }

    /// Records the forward pass for `x: [B*N x N]` on `g`.
    pub fn forward_vars(&self, g: &mut Graph<'_>, x: Var) -> ForwardVars {
        let n = self.config.n_regions;
        let b = g.value(x).rows() / n;
        let outputs: Vec<_> = self.groups.iter().map(|group| group.forward(g, x)).collect();
        let disease_weights = self.disease_gate.forward(g, x);
        let reps: Vec<Var> = outputs.iter().map(|o| o.mixture).collect();
        let informed = disease_informed_var(g, disease_weights, &reps);
        let embedding = g.param(self.region_embedding);
        let embedding = g.tile_rows(embedding, b);
        let mut tokens = g.add(informed, embedding);
        for layer in &self.transformer {
            tokens = layer.forward(g, tokens, n);
        }
        let pooled = g.group_mean_rows(tokens, n);
        let h = self.classifier[0].forward(g, pooled);
        let h = g.gelu(h);
        let logits = self.classifier[1].forward(g, h);
        ForwardVars {
            logits,
            pooled,
            group_probs: outputs.iter().map(|o| o.probs).collect(),
            disease_weights,
        }
    }

    fn weight_var(&self, g: &mut Graph<'_>, learnable: Option<ParamId>, fixed: f64) -> Var {
        match learnable {
            Some(id) => {
                let raw = g.param(id);
                g.softplus(raw)
            }
            None => g.constant(Tensor::scalar(fixed)),
        }
    }

    /// Records the full objective for a batch on `g`.
    pub fn loss_vars(&self, g: &mut Graph<'_>, x: &Tensor, labels: &[usize]) -> Result<LossVars> {
        let b = self.check_input(x)?;
        if labels.len() != b {
            return Err(Error::shape(format!("{b} subjects with {} labels", labels.len())));
        }
        let xv = g.constant(x.clone());
        let forward = self.forward_vars(g, xv);
        let w = self.config.loss;
        let cls = g.cross_entropy(forward.logits, labels)?;
        let expert_diversity = expert_diversity_var(g, &forward.group_probs, w.entropy_coefficient());
        let disease_diversity = disease_diversity_var(g, forward.pooled, labels)?;
        let expert_balance = expert_balance_var(g, &forward.group_probs);
        let ids = self.learnable;
        let alpha = self.weight_var(g, ids.map(|i| i.alpha), w.alpha);
        let beta = self.weight_var(g, ids.map(|i| i.beta), w.beta);
        let gamma = self.weight_var(g, ids.map(|i| i.gamma), w.gamma);
        let mut total = cls;
        for (coef, term) in [(alpha, expert_diversity), (beta, disease_diversity), (gamma, expert_balance)] {
            let weighted = g.mul(coef, term);
            total = g.add(total, weighted);
        }
        Ok(LossVars {
            forward,
            cls,
            expert_diversity,
            disease_diversity,
            expert_balance,
            alpha,
            beta,
            gamma,
            total,
        })
    }

    /// Logits, pooled representations and gate trace for a stacked input.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<ModelOutput> {
        let b = self.check_input(x)?;
        let mut g = Graph::new(&self.store);
        let xv = g.constant(x.clone());
        let vars = self.forward_vars(&mut g, xv);
        g.check_finite()?;
        let trace = GateTrace {
            n_subjects: b,
            n_regions: self.config.n_regions,
            n_experts: self.config.experts_per_group,
            n_diseases: self.config.n_classes,
            expert_probs: vars.group_probs.iter().map(|&p| g.value(p).data().to_vec()).collect(),
            disease_weights: g.value(vars.disease_weights).data().to_vec(),
        };
        Ok(ModelOutput {
            logits: g.value(vars.logits).clone(),
            pooled: g.value(vars.pooled).clone(),
            trace,
        })
    }

    pub fn forward(&self, batch: &[SubNetworkBatch]) -> Result<ModelOutput> {
        self.forward_tensor(&stack_subjects(batch, self.config.n_regions)?)
    }

    pub fn predict(&self, batch: &[SubNetworkBatch]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(batch)?.logits))
    }

    /// Writes `manifest.json` and `weights.bin` into `dir`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::with_capacity(self.store.len());
        let mut blob = Vec::with_capacity(self.store.numel() * 8);
        for (_, name, t) in self.store.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            tensors,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let manifest_path = dir.join(MANIFEST_FILE);
        fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
        let weights_path = dir.join(WEIGHTS_FILE);
        fs::write(&weights_path, blob).map_err(|e| Error::io(&weights_path, e))
    }

    /// Rebuilds a model from a checkpoint directory.
    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            msg: e.to_string(),
        })?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::CorruptCheckpoint(format!("unknown format {:?}", manifest.format)));
        }
        let weights_path = dir.join(WEIGHTS_FILE);
        let blob = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
        let mut model = Self::new(manifest.config)?;

        let mut expected_offset = 0u64;
        let mut seen = vec![false; model.store.len()];
        for entry in &manifest.tensors {
            let id = model
                .store
                .id(&entry.name)
                .ok_or_else(|| Error::shape(format!("checkpoint tensor {:?} is not part of the model", entry.name)))?;
            let target = model.store.get_mut(id);
            if target.shape() != entry.shape.as_slice() {
                return Err(Error::shape(format!(
                    "tensor {:?} has shape {:?} in the checkpoint, model expects {:?}",
                    entry.name,
                    entry.shape,
                    target.shape()
                )));
            }
            if entry.dtype != "f64" {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {:?} has dtype {:?}",
                    entry.name, entry.dtype
                )));
            }
            if entry.offset != expected_offset {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {:?} starts at byte {}, expected {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let start = entry.offset as usize;
            let end = start + target.len() * 8;
            let bytes = blob.get(start..end).ok_or_else(|| {
                Error::CorruptCheckpoint(format!(
                    "weights blob has {} bytes, tensor {:?} needs bytes {start}..{end}",
                    blob.len(),
                    entry.name
                ))
            })?;
            for (dst, chunk) in target.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
            seen[id.index()] = true;
            expected_offset = end as u64;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let name = model.store.ids().nth(missing).map(|id| model.store.name(id).to_string());
            return Err(Error::shape(format!("checkpoint lacks tensor {:?}", name.unwrap_or_default())));
        }
        if expected_offset as usize != blob.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "weights blob has {} bytes, manifest accounts for {expected_offset}",
                blob.len()
            )));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Stacks subjects into one `[B*N x N]` input.
pub fn stack_subjects(batch: &[SubNetworkBatch], n_regions: usize) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let mut data = Vec::with_capacity(batch.len() * n_regions * n_regions);
    for s in batch {
        if s.n_regions() != n_regions || s.rows.iter().any(|r| r.len() != n_regions) {
            return Err(Error::shape(format!(
                "subject {} has {} sub-networks, model expects {n_regions} of length {n_regions}",
                s.subject_id,
                s.n_regions()
            )));
        }
        data.extend(s.rows.iter().flatten());
    }
    Ok(Tensor::matrix(batch.len() * n_regions, n_regions, data))
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.cols();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Which subjects contribute to class `k`'s relevance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelevanceAveraging {
    /// Every subject in the split.
    #[default]
    AllSubjects,
    /// Only subjects labeled `k`.
    OwnClass,
}

/// Per-(class, region) relevance with ranked views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub region_labels: Vec<String>,
    /// `scores[k][i]`
    pub scores: Vec<Vec<f64>>,
}

/// Indices sorted by descending score, ties by ascending index.
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

impl RelevanceReport {
    pub fn n_classes(&self) -> usize {
        self.scores.len()
    }

    pub fn ranking(&self, class: usize) -> Vec<usize> {
        rank(&self.scores[class])
    }

    pub fn top(&self, class: usize, m: usize) -> Vec<usize> {
        let mut r = self.ranking(class);
        r.truncate(m);
        r
    }

    /// `|relevance(a, i) - relevance(b, i)|` for every region.
    pub fn contrast(&self, a: usize, b: usize) -> Vec<f64> {
        self.scores[a].iter().zip(&self.scores[b]).map(|(x, y)| (x - y).abs()).collect()
    }

    pub fn contrast_top(&self, a: usize, b: usize, m: usize) -> Vec<usize> {
        let mut r = rank(&self.contrast(a, b));
        r.truncate(m);
        r
    }

    /// Plain-text tables: per class, then per class pair, top `m` regions each.
    pub fn to_text(&self, m: usize) -> String {
        let mut out = String::from("# relevance per class\nclass\trank\tregion\tscore\n");
        for k in 0..self.n_classes() {
            for (r, i) in self.top(k, m).into_iter().enumerate() {
                out.push_str(&format!("{k}\t{}\t{}\t{:.6}\n", r + 1, self.region_labels[i], self.scores[k][i]));
            }
        }
        out.push_str("\n# contrasts\npair\trank\tregion\tscore\n");
        for a in 0..self.n_classes() {
            for b in a + 1..self.n_classes() {
                let c = self.contrast(a, b);
                for (r, i) in self.contrast_top(a, b, m).into_iter().enumerate() {
                    out.push_str(&format!("{a}-{b}\t{}\t{}\t{:.6}\n", r + 1, self.region_labels[i], c[i]));
                }
            }
        }
        out
    }
}

/// Relevance of region `i` for class `k`: the mean over subjects of the
/// disease weight for `k` times the peak expert-gate probability of group `k`.
pub fn relevance_scores(
    trace: &GateTrace,
    labels: &[usize],
    region_labels: &[String],
    averaging: RelevanceAveraging,
) -> Result<RelevanceReport> {
    if trace.is_empty() || trace.n_subjects == 0 {
        return Err(Error::State("relevance needs at least one subject".into()));
    }
    if labels.len() != trace.n_subjects || region_labels.len() != trace.n_regions {
        return Err(Error::shape(format!(
            "trace covers {} subjects x {} regions, got {} labels and {} region names",
            trace.n_subjects,
            trace.n_regions,
            labels.len(),
            region_labels.len()
        )));
    }
    let k_count = trace.n_diseases;
    let mut scores = vec![vec![0.0; trace.n_regions]; k_count];
    for (k, row) in scores.iter_mut().enumerate() {
        let subjects: Vec<usize> = match averaging {
            RelevanceAveraging::AllSubjects => (0..trace.n_subjects).collect(),
            RelevanceAveraging::OwnClass => (0..trace.n_subjects).filter(|&s| labels[s] == k).collect(),
        };
        if subjects.is_empty() {
            return Err(Error::State(format!("no subjects of class {k} in the split")));
        }
        for (i, score) in row.iter_mut().enumerate() {
            let total: f64 = subjects
                .iter()
                .map(|&s| {
                    let peak = trace
                        .expert_probs_at(k, s, i)
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max);
                    trace.disease_weights_at(s, i)[k] * peak
                })
                .sum();
            *score = total / subjects.len() as f64;
        }
    }
    Ok(RelevanceReport {
        region_labels: region_labels.to_vec(),
        scores,
    })
}
