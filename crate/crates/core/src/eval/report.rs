use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::eval::metrics::{BootstrapResult, ConsistencyReport, CounterfactualResult};

pub const AUC: &str = "auc";
pub const NDCG_5: &str = "ndcg@5";
pub const NDCG_10: &str = "ndcg@10";
pub const NDCG_USERS: &str = "ndcg_users";
pub const IMPRESSIONS: &str = "impressions";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainabilityReport {
    pub ads: usize,
    pub hr_at_5: f64,
    pub coverage_at_5: f64,
    pub consistency: Option<ConsistencyReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub accuracy: f64,
    pub by_modification: BTreeMap<String, f64>,
    pub results: Vec<CounterfactualResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub ads: usize,
    pub client_calls: usize,
    pub retries: usize,
    pub failed_ads: usize,
    pub median_cold_fallbacks: usize,
    pub outlier_flags: usize,
    pub exclusions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seeds: BTreeMap<String, u64>,
    pub config_hash: String,
    pub template_version: String,
    pub world_hash: String,
}

/// Everything an offline evaluation produces apart from wall-clock timings,
/// which are written separately so this report is reproducible byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// method -> metric -> value
    pub methods: BTreeMap<String, BTreeMap<String, f64>>,
    /// `"<a>_vs_<b>"` -> paired bootstrap of per-user NDCG@10, `a - b`
    pub significance: BTreeMap<String, BootstrapResult>,
    pub generation: Option<GenerationSummary>,
    pub explainability: Option<ExplainabilityReport>,
    pub robustness: Option<RobustnessReport>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn metric(&self, method: &str, metric: &str) -> Option<f64> {
        self.methods.get(method)?.get(metric).copied()
    }
}
