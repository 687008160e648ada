//! One function per pipeline stage. Stages talk only through files under the
//! output directory, so any stage can be rerun on its own.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use coldstart_core::calibrate::CalibratedModel;
use coldstart_core::embed::NeighborSet;
use coldstart_core::eval::experiment::{
    calibrate_cold, calibration_sample, evaluate_prepared, generate_cold, retrieve_neighbors, train_warm,
    world_embedder, Prepared,
};
use coldstart_core::eval::report::GenerationSummary;
use coldstart_core::eval::{generate_world, SyntheticWorld};
use coldstart_core::gateway::{ChatClient, OracleClient, RemoteChatClient, TranscriptEntry};
use coldstart_core::jsonl::{read_json, read_jsonl, write_json, write_jsonl};
use coldstart_core::prompt::{PromptBuilder, TemplateSet};
use coldstart_core::seed::derive;
use coldstart_core::serve::{feature_thresholds, WeightCache};
use coldstart_core::train::{median_cold_weights, TrainReport, WarmWeightStore};
use coldstart_core::{AdId, Error, Source, WeightVector};
use coldstart_server::AppState;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ClientKind, PipelineConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("missing input {}: run `coldstart-hyper {producer}` first", path.display())]
    MissingInput { path: PathBuf, producer: &'static str },

    #[error("calibration residual {residual:e} for ad {ad_id} exceeds tolerance {tolerance:e}")]
    Calibration { ad_id: AdId, residual: f64, tolerance: f64 },

    #[error("server error: {0}")]
    Server(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                Error::Config(_) => 2,
                Error::Schema(_) | Error::Json(_) | Error::Alignment(_) | Error::Parse(_) | Error::Io { .. } => 4,
                Error::Transport(_) => 5,
                Error::GenerationFailed { .. } => 6,
                Error::UnreachableTarget { .. } | Error::CalibrationReference(_) | Error::DegenerateWeights(_) => 7,
                Error::Divergence { .. } | Error::DegenerateLabels { .. } => 8,
                _ => 1,
            },
            CliError::MissingInput { .. } => 3,
            CliError::Calibration { .. } => 7,
            CliError::Server(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Where every stage reads and writes.
pub struct Layout {
    pub world: PathBuf,
    pub warm: PathBuf,
    pub generated: PathBuf,
    pub calibrated: PathBuf,
    pub out: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let out = cfg.out_dir.clone();
        Self {
            world: cfg.world_dir(),
            warm: out.join("warm"),
            generated: out.join("generated"),
            calibrated: out.join("calibrated"),
            out,
        }
    }

    pub fn warm_weights(&self) -> PathBuf {
        self.warm.join("weights.jsonl")
    }
    pub fn raw_weights(&self) -> PathBuf {
        self.generated.join("raw_weights.jsonl")
    }
    pub fn neighbors(&self) -> PathBuf {
        self.generated.join("neighbors.jsonl")
    }
    pub fn exclusions(&self) -> PathBuf {
        self.generated.join("exclusions.jsonl")
    }
    pub fn generate_manifest(&self) -> PathBuf {
        self.generated.join("manifest.json")
    }
    pub fn calibrated_models(&self) -> PathBuf {
        self.calibrated.join("calibrated_models.jsonl")
    }
    pub fn thresholds(&self) -> PathBuf {
        self.calibrated.join("thresholds.json")
    }
}

fn require(path: &Path, producer: &'static str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput { path: path.to_owned(), producer })
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?;
    Ok(())
}

fn load_world(layout: &Layout) -> CliResult<SyntheticWorld> {
    require(&layout.world.join("world.json"), "synth")?;
    Ok(SyntheticWorld::read(&layout.world)?)
}

fn load_warm(layout: &Layout) -> CliResult<WarmWeightStore> {
    require(&layout.warm_weights(), "train")?;
    let mut store = WarmWeightStore::new();
    for w in read_jsonl::<WeightVector>(layout.warm_weights())? {
        store.insert_weights(w);
    }
    Ok(store)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighborRecord {
    pub ad_id: AdId,
    pub neighbors: NeighborSet,
}

fn load_neighbors(layout: &Layout) -> CliResult<BTreeMap<AdId, NeighborSet>> {
    require(&layout.neighbors(), "generate")?;
    Ok(read_jsonl::<NeighborRecord>(layout.neighbors())?.into_iter().map(|r| (r.ad_id, r.neighbors)).collect())
}

fn load_raw(layout: &Layout) -> CliResult<Vec<WeightVector>> {
    require(&layout.raw_weights(), "generate")?;
    Ok(read_jsonl(layout.raw_weights())?)
}

fn templates(cfg: &PipelineConfig) -> CliResult<TemplateSet> {
    Ok(match &cfg.template_dir {
        Some(dir) => TemplateSet::load(dir)?,
        None => TemplateSet::builtin(),
    })
}

fn client(cfg: &PipelineConfig, world: &SyntheticWorld) -> CliResult<Box<dyn ChatClient>> {
    Ok(match cfg.client {
        ClientKind::Oracle | ClientKind::Mock => Box::new(OracleClient::new(world.oracle_truth(), cfg.oracle_config())),
        ClientKind::Remote => Box::new(RemoteChatClient::new(cfg.remote_config())?),
    })
}

pub fn synth(cfg: &PipelineConfig) -> CliResult<()> {
    let layout = Layout::new(cfg);
    let world = generate_world(&cfg.world_config())?;
    world.write(&layout.world)?;
    println!(
        "world {}: {} retired, {} active, {} users, {} impressions",
        layout.world.display(),
        world.split.retired.len(),
        world.split.active.len(),
        world.users.len(),
        world.interactions.len()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrainReportRecord {
    ad_id: AdId,
    report: TrainReport,
}

pub fn train(cfg: &PipelineConfig) -> CliResult<()> {
    let layout = Layout::new(cfg);
    let world = load_world(&layout)?;
    let store = train_warm(&world, &world.split.retired, &cfg.train_config())?;
    let median = median_cold_weights(&store)?;
    create_dir(&layout.warm)?;
    write_jsonl(layout.warm_weights(), store.models().values())?;
    let reports: Vec<_> =
        store.reports().iter().map(|(id, r)| TrainReportRecord { ad_id: id.clone(), report: r.clone() }).collect();
    write_jsonl(layout.warm.join("train_reports.jsonl"), &reports)?;
    write_json(layout.warm.join("median_cold.json"), &median)?;
    write_json(
        layout.warm.join("manifest.json"),
        &json!({
            "command": "train",
            "config_hash": cfg.hash(),
            "world_hash": world.content_hash()?,
            "train": cfg.train_config(),
            "ads": store.len(),
        }),
    )?;
    println!("trained {} warm models into {}", store.len(), layout.warm.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSettings {
    pub shots: usize,
    pub with_image: bool,
    pub template_version: String,
    pub batch_size: usize,
    pub samples_per_batch: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateManifest {
    pub command: String,
    pub config_hash: String,
    pub world_hash: String,
    pub client: ClientKind,
    pub prompt: PromptSettings,
    pub summary: GenerationSummary,
}

pub fn generate(cfg: &PipelineConfig) -> CliResult<()> {
    let layout = Layout::new(cfg);
    let world = load_world(&layout)?;
    let warm = load_warm(&layout)?;
    let exp = cfg.experiment_config();
    let templates = templates(cfg)?;
    let prompts = PromptBuilder::new(templates.clone()).with_image(cfg.image);
    let client = client(cfg, &world)?;
    let (_, neighbors) = retrieve_neighbors(&world, &world_embedder(&world), exp.neighbors_k())?;
    let judge = cfg.judge.then_some(&*client);
    let (outcomes, summary) = generate_cold(&world, &warm, &neighbors, &prompts, &exp.generation, &*client, judge)?;

    create_dir(&layout.generated.join("transcripts"))?;
    write_jsonl(layout.raw_weights(), outcomes.iter().map(|o| &o.weights))?;
    let records: Vec<_> =
        neighbors.iter().map(|(id, n)| NeighborRecord { ad_id: id.clone(), neighbors: n.clone() }).collect();
    write_jsonl(layout.neighbors(), &records)?;
    write_jsonl(layout.exclusions(), outcomes.iter().flat_map(|o| &o.exclusions))?;
    let flags: Vec<_> = outcomes.iter().map(|o| json!({"ad_id": o.ad_id, "flags": o.flags})).collect();
    write_jsonl(layout.generated.join("flags.jsonl"), &flags)?;
    for o in &outcomes {
        let path = layout.generated.join("transcripts").join(format!("{}.jsonl", o.ad_id));
        write_jsonl::<TranscriptEntry, _>(path, &o.transcripts)?;
    }
    let manifest = GenerateManifest {
        command: "generate".into(),
        config_hash: cfg.hash(),
        world_hash: world.content_hash()?,
        client: cfg.client,
        prompt: PromptSettings {
            shots: cfg.shots,
            with_image: cfg.image,
            template_version: templates.version.clone(),
            batch_size: cfg.batch_size,
            samples_per_batch: cfg.samples,
            temperature: cfg.temperature,
        },
        summary: summary.clone(),
    };
    write_json(layout.generate_manifest(), &manifest)?;
    println!(
        "generated {} ads ({} client calls, {} retries, {} failed, {} exclusions) into {}",
        summary.ads,
        summary.client_calls,
        summary.retries,
        summary.failed_ads,
        summary.exclusions,
        layout.generated.display()
    );
    Ok(())
}

pub fn calibrate(cfg: &PipelineConfig) -> CliResult<()> {
    let layout = Layout::new(cfg);
    let world = load_world(&layout)?;
    let warm = load_warm(&layout)?;
    let raw = load_raw(&layout)?;
    let neighbors = load_neighbors(&layout)?;
    let sample = calibration_sample(&world, cfg.calibration_sample_size, derive(cfg.seed, &["calibration"]))?;
    let models = calibrate_cold(&raw, &neighbors, cfg.alpha_neighbors, &warm, &sample)?;
    if let Some(bad) = models.iter().find(|m| !(m.residual <= cfg.calibration_tolerance)) {
        return Err(CliError::Calibration {
            ad_id: bad.ad_id.clone(),
            residual: bad.residual,
            tolerance: cfg.calibration_tolerance,
        });
    }
    let thresholds = feature_thresholds(&sample, cfg.exclusion_percentile)?;
    create_dir(&layout.calibrated)?;
    write_jsonl(layout.calibrated_models(), &models)?;
    write_json(layout.thresholds(), &thresholds)?;
    let fallbacks = models.iter().filter(|m| m.source == Source::MedianCold).count();
    let max_residual = models.iter().map(|m| m.residual).fold(0.0, f64::max);
    write_json(
        layout.calibrated.join("manifest.json"),
        &json!({
            "command": "calibrate",
            "config_hash": cfg.hash(),
            "world_hash": world.content_hash()?,
            "sample_size": sample.len(),
            "sample_seed": sample.seed,
            "alpha_neighbors": cfg.alpha_neighbors,
            "median_cold_fallbacks": fallbacks,
            "max_residual": max_residual,
        }),
    )?;
    println!(
        "calibrated {} ads ({fallbacks} median-cold fallbacks, max residual {max_residual:.2e}) into {}",
        models.len(),
        layout.calibrated.display()
    );
    Ok(())
}

pub fn serve(cfg: &PipelineConfig) -> CliResult<()> {
    let layout = Layout::new(cfg);
    let world = load_world(&layout)?;
    require(&layout.calibrated_models(), "calibrate")?;
    let mut state = AppState::new(Arc::new(WeightCache::new(world.schema.clone())));
    let exclusions = layout.exclusions();
    let exclusions = exclusions.exists().then_some(exclusions);
    if exclusions.is_some() {
        require(&layout.thresholds(), "calibrate")?;
        state.thresholds = Some(read_json(layout.thresholds())?);
    }
    if let Some(var) = &cfg.serve_token_env {
        let token = std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?;
        state.token = Some(token);
    }
    let generation = state.load_files(&layout.calibrated_models(), exclusions.as_ref())?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.bind).await?;
        println!("serving generation {generation} on {}", listener.local_addr()?);
        coldstart_server::run(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await
    })?;
    Ok(())
}

pub fn eval(cfg: &PipelineConfig) -> CliResult<()> {
    let layout = Layout::new(cfg);
    let world = load_world(&layout)?;
    let methods = cfg.parsed_methods()?;
    let exp = cfg.experiment_config();
    let warm = load_warm(&layout)?;
    let needs_generated = cfg.explainability || cfg.robustness;
    let (raw, neighbors) = if needs_generated { (load_raw(&layout)?, load_neighbors(&layout)?) } else { Default::default() };
    let (calibrated, generation) = if methods.contains(&coldstart_core::eval::Method::LlmHyper) {
        require(&layout.calibrated_models(), "calibrate")?;
        require(&layout.generate_manifest(), "generate")?;
        let calibrated: Vec<CalibratedModel> = read_jsonl(layout.calibrated_models())?;
        let manifest: GenerateManifest = read_json(layout.generate_manifest())?;
        let mut summary = manifest.summary;
        summary.median_cold_fallbacks = calibrated.iter().filter(|m| m.source == Source::MedianCold).count();
        (calibrated, Some(summary))
    } else {
        (Vec::new(), None)
    };
    let prepared = Prepared { warm, neighbors, raw, calibrated, generation, templates: templates(cfg)? };
    let client = client(cfg, &world)?;
    let out = evaluate_prepared(&world, &methods, &exp, Some(&*client), &prepared)?;
    create_dir(&layout.out)?;
    write_json(layout.out.join("report.json"), &out.report)?;
    write_json(layout.out.join("latency.json"), &out.latency)?;
    for (method, metrics) in &out.report.methods {
        let line: Vec<String> = metrics
            .iter()
            .map(|(k, v)| if v.fract() == 0.0 { format!("{k}={v}") } else { format!("{k}={v:.4}") })
            .collect();
        println!("{method:<10} {}", line.join(" "));
    }
    for (pair, b) in &out.report.significance {
        println!("{pair:<22} diff={:+.4} p={:.4}", b.mean_diff, b.p_value);
    }
    println!("report written to {}", layout.out.join("report.json").display());
    Ok(())
}
