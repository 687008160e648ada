//! Pipeline configuration: a flat `key = value` file (TOML syntax), then
//! `--set key=value` pairs, then dedicated flags, each layer overriding the last.

use std::path::{Path, PathBuf};

use coldstart_core::eval::{ExperimentConfig, Method, WorldConfig};
use coldstart_core::gateway::{GenerationConfig, OracleConfig, RemoteChatConfig};
use coldstart_core::train::TrainConfig;
use coldstart_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    /// Ground-truth weights plus seeded noise.
    Oracle,
    /// Ground-truth weights, no noise.
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// Directory of the synthetic world; defaults to `<out_dir>/world`.
    pub data_dir: Option<PathBuf>,
    pub template_dir: Option<PathBuf>,

    pub seed: u64,

    pub world_seed: u64,
    pub n_features: usize,
    pub n_retired: usize,
    pub n_active: usize,
    pub n_users: usize,
    pub test_fraction: f64,
    pub exposure: f64,
    pub embedding_dim: usize,
    pub affinity_scale: f64,
    pub logit_noise_sd: f64,

    pub learning_rate: f64,
    pub epochs: usize,
    pub l2_penalty: f64,
    pub convergence_tol: f64,

    pub shots: usize,
    pub batch_size: usize,
    pub samples: usize,
    pub temperature: f64,
    pub max_retries: usize,
    pub outlier_threshold: f64,
    pub judge: bool,
    pub image: bool,
    pub generation_seed: u64,

    pub alpha_neighbors: usize,
    pub calibration_sample_size: usize,
    pub calibration_tolerance: f64,
    pub exclusion_percentile: f64,

    pub client: ClientKind,
    pub oracle_noise_sigma: f64,
    pub oracle_seed: u64,
    pub oracle_image_penalty: f64,
    pub oracle_shot_penalty: f64,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub remote_retries: u32,
    pub multimodal: bool,

    /// Comma-separated method names.
    pub methods: String,
    pub bootstrap_resamples: usize,
    pub explainability: bool,
    pub robustness: bool,
    pub explain_ads: usize,

    pub bind: String,
    /// Environment variable holding the bearer token for `/rank` and `/snapshot`.
    pub serve_token_env: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        let train = TrainConfig::default();
        let generation = GenerationConfig::default();
        let oracle = OracleConfig::default();
        let remote = RemoteChatConfig::default();
        let exp = ExperimentConfig::default();
        Self {
            out_dir: PathBuf::from("out"),
            data_dir: None,
            template_dir: None,
            seed: exp.seed,
            world_seed: world.seed,
            n_features: world.n_features,
            n_retired: world.n_retired,
            n_active: world.n_active,
            n_users: world.n_users,
            test_fraction: world.test_fraction,
            exposure: world.exposure,
            embedding_dim: world.embedding_dim,
            affinity_scale: world.affinity_scale,
            logit_noise_sd: world.logit_noise_sd,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            l2_penalty: train.l2_penalty,
            convergence_tol: train.convergence_tol,
            shots: generation.shots,
            batch_size: generation.batch_size,
            samples: generation.samples_per_batch,
            temperature: generation.temperature,
            max_retries: generation.max_retries_on_parse_failure,
            outlier_threshold: generation.outlier_threshold,
            judge: generation.judge_enabled,
            image: exp.include_image,
            generation_seed: generation.seed,
            alpha_neighbors: exp.alpha_neighbors,
            calibration_sample_size: exp.calibration_sample_size,
            calibration_tolerance: 1e-6,
            exclusion_percentile: 90.0,
            client: ClientKind::Oracle,
            oracle_noise_sigma: oracle.noise_sigma,
            oracle_seed: oracle.seed,
            oracle_image_penalty: oracle.image_penalty,
            oracle_shot_penalty: oracle.shot_penalty,
            endpoint: remote.endpoint,
            model: remote.model,
            api_key_env: remote.api_key_env,
            timeout_secs: remote.timeout_secs,
            max_in_flight: remote.max_in_flight,
            remote_retries: remote.retries,
            multimodal: remote.multimodal,
            methods: Method::ALL.map(Method::as_str).join(","),
            bootstrap_resamples: exp.bootstrap_resamples,
            explainability: exp.explainability,
            robustness: exp.robustness,
            explain_ads: exp.explain_ads,
            bind: "127.0.0.1:8080".into(),
            serve_token_env: None,
        }
    }
}

/// A `--set` value is read as a TOML scalar when it parses as one, otherwise
/// as a bare string, so `--set client=remote` needs no quoting.
fn override_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

impl PipelineConfig {
    /// Layers `file`, then `overrides` (`key=value`) over the defaults and validates.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        if let Some((key, _)) = table.iter().find(|(_, v)| v.is_table() || v.is_array()) {
            return Err(Error::Config(format!("`{key}`: only flat scalar values are allowed")));
        }
        for (k, v) in overrides {
            table.insert(k.trim().to_owned(), override_value(v));
        }
        let cfg: PipelineConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world_config().validate()?;
        self.train_config().validate()?;
        self.generation_config().validate()?;
        self.parsed_methods()?;
        if self.alpha_neighbors == 0 {
            return Err(Error::Config("alpha_neighbors must be positive".into()));
        }
        if self.calibration_sample_size == 0 {
            return Err(Error::Config("calibration_sample_size must be positive".into()));
        }
        if !(self.calibration_tolerance > 0.0) {
            return Err(Error::Config("calibration_tolerance must be positive".into()));
        }
        if !(self.exclusion_percentile > 0.0 && self.exclusion_percentile <= 100.0) {
            return Err(Error::Config("exclusion_percentile must be in (0, 100]".into()));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::Config("bootstrap_resamples must be positive".into()));
        }
        if !(self.oracle_noise_sigma >= 0.0) || !(self.oracle_image_penalty >= 0.0) || !(self.oracle_shot_penalty >= 0.0) {
            return Err(Error::Config("oracle noise settings must be non-negative".into()));
        }
        if self.client == ClientKind::Remote && self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 prefix over the resolved configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    pub fn world_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("world"))
    }

    pub fn parsed_methods(&self) -> Result<Vec<Method>> {
        let methods: Vec<Method> =
            self.methods.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
        if methods.is_empty() {
            return Err(Error::Config("methods is empty".into()));
        }
        Ok(methods)
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.world_seed,
            n_features: self.n_features,
            n_retired: self.n_retired,
            n_active: self.n_active,
            n_users: self.n_users,
            test_fraction: self.test_fraction,
            exposure: self.exposure,
            embedding_dim: self.embedding_dim,
            affinity_scale: self.affinity_scale,
            logit_noise_sd: self.logit_noise_sd,
            ..WorldConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            l2_penalty: self.l2_penalty,
            convergence_tol: self.convergence_tol,
            seed: self.seed,
        }
    }

    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            samples_per_batch: self.samples,
            temperature: self.temperature,
            max_retries_on_parse_failure: self.max_retries,
            judge_enabled: self.judge,
            outlier_threshold: self.outlier_threshold,
            batch_size: self.batch_size,
            shots: self.shots,
            seed: self.generation_seed,
        }
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            noise_sigma: if self.client == ClientKind::Mock { 0.0 } else { self.oracle_noise_sigma },
            seed: self.oracle_seed,
            image_penalty: self.oracle_image_penalty,
            shot_penalty: self.oracle_shot_penalty,
            ..OracleConfig::default()
        }
    }

    pub fn remote_config(&self) -> RemoteChatConfig {
        RemoteChatConfig {
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            api_key_env: self.api_key_env.clone(),
            timeout_secs: self.timeout_secs,
            max_in_flight: self.max_in_flight,
            retries: self.remote_retries,
            multimodal: self.multimodal,
            ..RemoteChatConfig::default()
        }
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            train: self.train_config(),
            generation: self.generation_config(),
            oracle: self.oracle_config(),
            include_image: self.image,
            alpha_neighbors: self.alpha_neighbors,
            calibration_sample_size: self.calibration_sample_size,
            bootstrap_resamples: self.bootstrap_resamples,
            explainability: self.explainability,
            robustness: self.robustness,
            explain_ads: self.explain_ads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_validate() {
        let cfg = PipelineConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.parsed_methods().unwrap(), Method::ALL);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nshots = 3\nclient = \"mock\"\nn_users = 500\n").unwrap();
        let cfg = PipelineConfig::load(Some(&path), &pairs(&[("shots", "0"), ("image", "false"), ("model", "m-1")])).unwrap();
        assert_eq!(cfg.shots, 0);
        assert!(!cfg.image);
        assert_eq!(cfg.client, ClientKind::Mock);
        assert_eq!(cfg.n_users, 500);
        assert_eq!(cfg.model, "m-1");
        assert_eq!(cfg.oracle_config().noise_sigma, 0.0);
    }

    #[test]
    fn unknown_and_invalid_keys_rejected() {
        let err = PipelineConfig::load(None, &pairs(&[("shot", "3")])).unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("shot")));
        assert!(PipelineConfig::load(None, &pairs(&[("samples", "0")])).is_err());
        assert!(PipelineConfig::load(None, &pairs(&[("methods", "llm_hyper,bogus")])).is_err());
        assert!(PipelineConfig::load(None, &pairs(&[("client", "psychic")])).is_err());
        assert!(PipelineConfig::load(None, &pairs(&[("shots", "-1")])).is_err());
    }

    #[test]
    fn nested_tables_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "[gen]\nshots = 1\n").unwrap();
        assert!(PipelineConfig::load(Some(&path), &[]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.shots = 0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 32);
    }
}
