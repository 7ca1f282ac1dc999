//! Training loop, evaluation metrics and the ablation harness.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data_synth::{Cohort, Split};
use crate::error::{Error, Result};
use crate::losses::expert_balance_loss;
use crate::model::{argmax_rows, BrainNetMoE, ModelConfig};
use crate::moe::GateTrace;
use crate::nn::{adamw_step, AdamWConfig, Graph, OptimizerState, Tensor};
use crate::rng::{sub_stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub shuffle: bool,
    /// Evaluate the test split after every epoch divisible by this (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 32,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            seed: 0,
            shuffle: true,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Spec("batch_size must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) || !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Spec("lr and weight_decay must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Spec("betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Loss terms of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub cls: f64,
    pub e_d: f64,
    pub d_d: f64,
    pub e_b: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub split: Split,
    #[serde(rename = "ACC")]
    pub accuracy: f64,
    #[serde(rename = "SEN")]
    pub sensitivity: f64,
    #[serde(rename = "SPE")]
    pub specificity: f64,
    #[serde(rename = "PRE")]
    pub precision: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Eval(EvalRecord),
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes") + "\n"
    }
}

/// Table-1 style metrics from a confusion matrix. Percentages, 2 decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    /// Macro one-vs-rest recall.
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    /// Macro mean of per-class F1.
    pub f1: f64,
}

fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Macro one-vs-rest metrics. Undefined ratios (empty denominators) count as 0.
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let k = confusion.len();
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        let (mut sen, mut spe, mut pre, mut f1) = (0.0, 0.0, 0.0, 0.0);
        for c in 0..k {
            let tp = confusion[c][c];
            let actual: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let fn_ = actual - tp;
            let fp = predicted - tp;
            let tn = total - tp - fn_ - fp;
            let recall = ratio(tp, tp + fn_);
            let prec = ratio(tp, tp + fp);
            sen += recall;
            spe += ratio(tn, tn + fp);
            pre += prec;
            f1 += if recall + prec > 0.0 {
                2.0 * recall * prec / (recall + prec)
            } else {
                0.0
            };
        }
        let kf = k as f64;
        Self {
            confusion,
            accuracy: percent(ratio(correct, total)),
            sensitivity: percent(sen / kf),
            specificity: percent(spe / kf),
            precision: percent(pre / kf),
            f1: percent(f1 / kf),
        }
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize], n_classes: usize) -> Self {
        let mut confusion = vec![vec![0; n_classes]; n_classes];
        for (&t, &p) in labels.iter().zip(predictions) {
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn eval_record(&self, epoch: usize, split: Split) -> EvalRecord {
        EvalRecord {
            epoch,
            split,
            accuracy: self.accuracy,
            sensitivity: self.sensitivity,
            specificity: self.specificity,
            precision: self.precision,
            f1: self.f1,
        }
    }

    /// Aligned text table plus the confusion matrix.
    pub fn to_text(&self) -> String {
        let mut out = String::from("metrics (macro one-vs-rest averages; F1 = mean of per-class F1)\n");
        writeln!(out, "{:>8} {:>8} {:>8} {:>8} {:>8}", "ACC", "SEN", "SPE", "PRE", "F1").unwrap();
        writeln!(
            out,
            "{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            self.accuracy, self.sensitivity, self.specificity, self.precision, self.f1
        )
        .unwrap();
        out.push_str("\nconfusion (rows = true class, columns = predicted)\n");
        for (c, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
            writeln!(out, "{c:>3} {}", cells.join(" ")).unwrap();
        }
        out
    }
}

/// Normalized inputs and labels for a set of subjects.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub n_regions: usize,
    /// Per subject, flat `N x N` normalized sub-networks.
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Prepared {
    pub fn new(cohort: &Cohort, indices: &[usize]) -> Result<Self> {
        let batches = cohort.subnetworks(indices)?;
        Ok(Self {
            n_regions: cohort.n_regions(),
            inputs: batches.iter().map(|b| b.to_flat()).collect(),
            labels: cohort.labels(indices),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacked `[B*N x N]` input and labels for the given positions.
    pub fn batch(&self, positions: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.n_regions;
        let mut data = Vec::with_capacity(positions.len() * n * n);
        for &p in positions {
            data.extend_from_slice(&self.inputs[p]);
        }
        (
            Tensor::matrix(positions.len() * n, n, data),
            positions.iter().map(|&p| self.labels[p]).collect(),
        )
    }
}

/// Predictions and gate trace of a frozen model over a prepared set.
pub fn infer(model: &BrainNetMoE, data: &Prepared, chunk: usize) -> Result<(Vec<usize>, GateTrace)> {
    if data.is_empty() {
        return Err(Error::State("cannot run inference on an empty split".into()));
    }
    let positions: Vec<usize> = (0..data.len()).collect();
    let mut predictions = Vec::with_capacity(data.len());
    let mut trace = GateTrace {
        n_subjects: 0,
        n_regions: 0,
        n_experts: 0,
        n_diseases: 0,
        expert_probs: Vec::new(),
        disease_weights: Vec::new(),
    };
    for part in positions.chunks(chunk.max(1)) {
        let (x, _) = data.batch(part);
        let out = model.forward_tensor(&x)?;
        predictions.extend(argmax_rows(&out.logits));
        trace.merge(out.trace)?;
    }
    Ok((predictions, trace))
}

pub fn evaluate_prepared(model: &BrainNetMoE, data: &Prepared) -> Result<MetricsReport> {
    let (pred, _) = infer(model, data, 64)?;
    Ok(MetricsReport::from_predictions(&data.labels, &pred, model.config().n_classes))
}

/// Metrics of `model` on one split of `cohort`.
pub fn evaluate(model: &BrainNetMoE, cohort: &Cohort, split: Split) -> Result<MetricsReport> {
    let data = Prepared::new(cohort, cohort.split_indices(split))?;
    evaluate_prepared(model, &data)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Mini-batch AdamW training on the train split.
///
/// `log` receives every record as it is produced; its errors abort training.
pub fn train(
    model: &mut BrainNetMoE,
    cohort: &Cohort,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if cohort.train.is_empty() {
        return Err(Error::State("train split is empty".into()));
    }
    if cohort.n_regions() != model.config().n_regions {
        return Err(Error::shape(format!(
            "cohort has {} regions, model expects {}",
            cohort.n_regions(),
            model.config().n_regions
        )));
    }
    let train_data = Prepared::new(cohort, &cohort.train)?;
    let test_data = if cfg.eval_every > 0 && !cohort.test.is_empty() {
        Some(Prepared::new(cohort, &cohort.test)?)
    } else {
        None
    };
    let mut optimizer = OptimizerState::new(model.params(), cfg.optimizer);
    let mut shuffle_rng = sub_stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut history = TrainHistory::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        for positions in order.chunks(cfg.batch_size) {
            let (x, labels) = train_data.batch(positions);
            let at_step = |e: Error| match e {
                Error::Numerical(msg) => Error::Numerical(format!("step {step} (epoch {epoch}): {msg}")),
                other => other,
            };
            let (record, grads) = {
                let mut g = Graph::new(model.params());
                let vars = model.loss_vars(&mut g, &x, &labels)?;
                g.check_finite().map_err(at_step)?;
                let b = vars.breakdown(&g);
                if !b.total.is_finite() {
                    return Err(at_step(Error::Numerical(format!("total loss is {}", b.total))));
                }
                let grads = g.backward(vars.total).map_err(at_step)?;
                let record = StepRecord {
                    epoch,
                    step,
                    cls: b.cls,
                    e_d: b.expert_diversity,
                    d_d: b.disease_diversity,
                    e_b: b.expert_balance,
                    total: b.total,
                };
                (record, grads)
            };
            adamw_step(model.params_mut(), &grads, &mut optimizer)?;
            log(&LogRecord::Step(record))?;
            history.steps.push(record);
            step += 1;
        }
        if let Some(test) = &test_data {
            if epoch % cfg.eval_every == 0 {
                let record = evaluate_prepared(model, test)?.eval_record(epoch, Split::Test);
                log(&LogRecord::Eval(record.clone()))?;
                history.evals.push(record);
            }
        }
    }
    Ok(history)
}

/// One configuration of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub experts_per_group: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub variants: Vec<AblationVariant>,
}

impl AblationPlan {
    /// One row per expert count, then (if `loss_toggles`) each loss off,
    /// all losses off, and the full model.
    pub fn build(base: &ModelConfig, expert_counts: &[usize], loss_toggles: bool) -> Self {
        let w = base.loss;
        let variant = |name: String, e: usize, a: f64, b: f64, g: f64| AblationVariant {
            name,
            experts_per_group: e,
            alpha: a,
            beta: b,
            gamma: g,
        };
        let e0 = base.experts_per_group;
        let mut variants: Vec<AblationVariant> = expert_counts
            .iter()
            .map(|&e| variant(format!("experts={e}"), e, w.alpha, w.beta, w.gamma))
            .collect();
        if loss_toggles {
            variants.extend([
                variant("w/o L_e_d".into(), e0, 0.0, w.beta, w.gamma),
                variant("w/o L_d_d".into(), e0, w.alpha, 0.0, w.gamma),
                variant("w/o L_e_b".into(), e0, w.alpha, w.beta, 0.0),
                variant("w/o all".into(), e0, 0.0, 0.0, 0.0),
                variant("full".into(), e0, w.alpha, w.beta, w.gamma),
            ]);
        }
        Self { variants }
    }

    /// Expert counts {2, 4} plus every loss toggle: 7 rows.
    pub fn default_for(base: &ModelConfig) -> Self {
        Self::build(base, &[2, 4], true)
    }

    fn model_config(&self, index: usize, base: &ModelConfig) -> ModelConfig {
        let v = &self.variants[index];
        let mut cfg = base.clone();
        cfg.experts_per_group = v.experts_per_group;
        cfg.loss.alpha = v.alpha;
        cfg.loss.beta = v.beta;
        cfg.loss.gamma = v.gamma;
        if cfg.loss.learnable && [v.alpha, v.beta, v.gamma].contains(&0.0) {
            // a switched-off term stays off
            cfg.loss.learnable = false;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub test: MetricsReport,
    /// Expert-balance loss of the trained model over the train split.
    pub final_expert_balance: f64,
    /// The objective equalled the classification loss at every step.
    pub total_equals_cls: bool,
}

/// Trains and evaluates one variant.
pub fn run_variant(
    plan: &AblationPlan,
    index: usize,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    cohort: &Cohort,
) -> Result<AblationRow> {
    let cfg = plan.model_config(index, base);
    let mut model = BrainNetMoE::new(cfg)?;
    let history = train(&mut model, cohort, &TrainConfig { eval_every: 0, ..train_cfg.clone() }, &mut |_| Ok(()))?;
    let test = evaluate(&model, cohort, Split::Test)?;
    let train_data = Prepared::new(cohort, &cohort.train)?;
    let (_, trace) = infer(&model, &train_data, train_cfg.batch_size)?;
    Ok(AblationRow {
        variant: plan.variants[index].clone(),
        test,
        final_expert_balance: expert_balance_loss(&trace)?,
        total_equals_cls: history.steps.iter().all(|s| s.total == s.cls),
    })
}

/// Runs every variant, up to `jobs` at a time. `on_row` sees each finished
/// row immediately (in completion order); the result is in plan order.
pub fn run_ablation(
    plan: &AblationPlan,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    cohort: &Cohort,
    jobs: usize,
    on_row: &(dyn Fn(usize, &AblationRow) -> Result<()> + Sync),
) -> Result<Vec<AblationRow>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationRow>>>> = Mutex::new((0..plan.variants.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= plan.variants.len() {
            break;
        }
        let row = run_variant(plan, i, base, train_cfg, cohort).and_then(|row| {
            on_row(i, &row)?;
            Ok(row)
        });
        let failed = row.is_err();
        results.lock().expect("results lock")[i] = Some(row);
        if failed {
            // stop handing out new variants
            next.store(plan.variants.len(), Ordering::SeqCst);
        }
    };
    std::thread::scope(|scope| {
        for _ in 1..jobs.max(1).min(plan.variants.len().max(1)) {
            scope.spawn(worker);
        }
        worker();
    });
    let mut rows = Vec::with_capacity(plan.variants.len());
    for r in results.into_inner().expect("results lock") {
        match r {
            Some(Ok(row)) => rows.push(row),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    Ok(rows)
}

/// Aligned comparison table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<12} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "variant", "experts", "ACC", "SEN", "SPE", "PRE", "F1", "L_e_b"
    )
    .unwrap();
    for r in rows {
        writeln!(
            out,
            "{:<12} {:>7} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.4}",
            r.variant.name,
            r.variant.experts_per_group,
            r.test.accuracy,
            r.test.sensitivity,
            r.test.specificity,
            r.test.precision,
            r.test.f1,
            r.final_expert_balance
        )
        .unwrap();
    }
    out
}
