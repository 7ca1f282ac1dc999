//! Flat key/value run configuration shared by every subcommand.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use brainnet_moe::{ModelConfig, SynthSpec, TrainConfig};

use crate::CliError;

/// Every key a config file may set. Unset keys keep library defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    // model
    pub n_regions: Option<usize>,
    pub n_classes: Option<usize>,
    pub experts_per_group: Option<usize>,
    pub expert_hidden: Option<usize>,
    pub model_dim: Option<usize>,
    pub transformer_layers: Option<usize>,
    pub heads: Option<usize>,
    pub gate_hidden: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub subtract_entropy: Option<bool>,
    pub learnable: Option<bool>,
    pub seed: Option<u64>,
    // training
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub shuffle: Option<bool>,
    pub eval_every: Option<usize>,
    // synthetic cohort
    pub subjects_per_class: Option<usize>,
    pub planted_regions: Option<Vec<Vec<usize>>>,
    pub effect_size: Option<f64>,
    pub base_scale: Option<f64>,
    pub dispersion: Option<f64>,
    pub test_fraction: Option<f64>,
}

pub const KNOWN_KEYS: &[&str] = &[
    "n_regions",
    "n_classes",
    "experts_per_group",
    "expert_hidden",
    "model_dim",
    "transformer_layers",
    "heads",
    "gate_hidden",
    "alpha",
    "beta",
    "gamma",
    "lambda",
    "subtract_entropy",
    "learnable",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "shuffle",
    "eval_every",
    "subjects_per_class",
    "planted_regions",
    "effect_size",
    "base_scale",
    "dispersion",
    "test_fraction",
];

/// Keys holding a count; `n_*` / `num_*` typos are matched against these first.
const COUNT_KEYS: &[&str] = &[
    "n_regions",
    "n_classes",
    "experts_per_group",
    "transformer_layers",
    "heads",
    "epochs",
    "subjects_per_class",
];

/// Closest known key, compared word by word so `n_expert` finds `experts_per_group`.
pub fn suggest_key(unknown: &str) -> Option<&'static str> {
    let lower = unknown.to_ascii_lowercase();
    if lower.starts_with("n_") || lower.starts_with("num_") {
        if let Some(k) = closest(unknown, COUNT_KEYS) {
            return Some(k);
        }
    }
    closest(unknown, KNOWN_KEYS)
}

fn closest(unknown: &str, keys: &[&'static str]) -> Option<&'static str> {
    let words = |s: &str| -> Vec<String> {
        s.split(['_', '-'])
            .filter(|w| w.len() > 1)
            .map(str::to_ascii_lowercase)
            .collect()
    };
    let unknown_words = words(unknown);
    let score = |key: &str| -> f64 {
        let best_word = unknown_words
            .iter()
            .flat_map(|a| words(key).into_iter().map(move |b| strsim::jaro_winkler(a, &b)))
            .fold(0.0, f64::max);
        best_word.max(strsim::jaro_winkler(unknown, key))
    };
    keys.iter()
        .map(|&k| (k, score(k)))
        .filter(|(_, s)| *s >= 0.85)
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

impl FileConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::usage(format!("{origin}: {e}")))?;
        for key in table.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                let hint = suggest_key(key)
                    .map(|k| format!(" (did you mean \"{k}\"?)"))
                    .unwrap_or_default();
                return Err(CliError::usage(format!("{origin}: unknown config key \"{key}\"{hint}")));
            }
        }
        table
            .try_into()
            .map_err(|e| CliError::usage(format!("{origin}: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    pub fn model(&self, base: ModelConfig) -> ModelConfig {
        let mut m = base;
        set(&mut m.n_regions, self.n_regions);
        set(&mut m.n_classes, self.n_classes);
        set(&mut m.experts_per_group, self.experts_per_group);
        set(&mut m.expert_hidden, self.expert_hidden);
        set(&mut m.model_dim, self.model_dim);
        set(&mut m.transformer_layers, self.transformer_layers);
        set(&mut m.heads, self.heads);
        set(&mut m.gate_hidden, self.gate_hidden);
        set(&mut m.loss.alpha, self.alpha);
        set(&mut m.loss.beta, self.beta);
        set(&mut m.loss.gamma, self.gamma);
        set(&mut m.loss.lambda, self.lambda);
        set(&mut m.loss.subtract_entropy, self.subtract_entropy);
        set(&mut m.loss.learnable, self.learnable);
        set(&mut m.seed, self.seed);
        m
    }

    pub fn train(&self, base: TrainConfig) -> TrainConfig {
        let mut t = base;
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.optimizer.lr, self.lr);
        set(&mut t.optimizer.beta1, self.beta1);
        set(&mut t.optimizer.beta2, self.beta2);
        set(&mut t.optimizer.eps, self.eps);
        set(&mut t.optimizer.weight_decay, self.weight_decay);
        set(&mut t.shuffle, self.shuffle);
        set(&mut t.eval_every, self.eval_every);
        set(&mut t.seed, self.seed);
        t
    }

    pub fn synth(&self, base: SynthSpec) -> SynthSpec {
        let mut s = base;
        set(&mut s.n_regions, self.n_regions);
        set(&mut s.n_classes, self.n_classes);
        set(&mut s.subjects_per_class, self.subjects_per_class);
        if self.planted_regions.is_some() {
            s.planted_regions = self.planted_regions.clone();
        }
        set(&mut s.effect_size, self.effect_size);
        set(&mut s.base_scale, self.base_scale);
        set(&mut s.dispersion, self.dispersion);
        set(&mut s.test_fraction, self.test_fraction);
        set(&mut s.seed, self.seed);
        s
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
