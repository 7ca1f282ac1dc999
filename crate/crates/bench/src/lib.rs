//! Shared fixtures for the benchmarks.

use brainnet_moe::nn::Tensor;
use brainnet_moe::train_eval::Prepared;
use brainnet_moe::{generate_split, BrainNetMoE, ModelConfig, SynthSpec};

pub struct Fixture {
    pub model: BrainNetMoE,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Model of the given width on a synthetic cohort, with one batch of `batch` subjects.
pub fn fixture(n_regions: usize, model_dim: usize, batch: usize) -> Fixture {
    let spec = SynthSpec {
        n_regions,
        subjects_per_class: batch.div_ceil(3) + 2,
        ..SynthSpec::default()
    };
    let cohort = generate_split(&spec).expect("valid spec");
    let data = Prepared::new(&cohort, &cohort.train).expect("train split");
    let positions: Vec<usize> = (0..batch.min(data.len())).collect();
    let (inputs, labels) = data.batch(&positions);
    let model = BrainNetMoE::new(ModelConfig {
        n_regions,
        model_dim,
        expert_hidden: 2 * model_dim,
        ..ModelConfig::default()
    })
    .expect("valid config");
    Fixture { model, inputs, labels }
}
