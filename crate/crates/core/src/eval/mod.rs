//! Offline metrics, synthetic data and the experiment protocol.

pub mod experiment;
pub mod metrics;
pub mod report;
pub mod world;

pub use experiment::{run_offline_experiment, ExperimentConfig, ExperimentOutput, Method};
pub use metrics::{auc, ndcg_at_k, GroundTruthLabel};
pub use report::EvalReport;
pub use world::{generate_world, SyntheticWorld, WorldConfig};
