//! Pretraining loop, objectives, linear probe, collapse metric, ablation
//! runner and gradient checker.

pub mod ablate;
pub mod collapse;
pub mod config;
pub mod corpus;
pub mod experiment;
pub mod gradcheck;
pub mod inputs;
pub mod objective;
pub mod probe;
pub mod train;

pub use collapse::collapse_metric;
pub use config::TrainConfig;
pub use corpus::{Corpus, EvalSet};
pub use objective::{Objective, TrainBranches};
pub use probe::{linear_probe, ProbeResult};
pub use train::{pretrain, pretrain_on, RunReport};
