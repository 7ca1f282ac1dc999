//! BrainNet-MoE: disease-specific mixture-of-experts groups over brain
//! sub-networks, a disease gate, transformer integration and specialization
//! losses, with a synthetic cohort generator and training harness.

pub mod connectome;
pub mod data_synth;
pub mod disease_gate;
pub mod error;
pub mod losses;
pub mod model;
pub mod moe;
pub mod nn;
pub mod rng;
pub mod train_eval;

pub use connectome::{log_normalize, to_subnetworks, ConnectivityMatrix, NormalizedConnectome, SubNetworkBatch};
pub use data_synth::{generate, generate_split, split_stratified, Cohort, Split, SynthSpec};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossWeights};
pub use model::{BrainNetMoE, ModelConfig, RelevanceAveraging, RelevanceReport};
pub use moe::GateTrace;
pub use train_eval::{evaluate, train, AblationPlan, AblationRow, MetricsReport, TrainConfig};
