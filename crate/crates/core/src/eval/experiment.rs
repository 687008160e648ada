//! Offline protocol: warm training on retired ads, cold-weight generation and
//! calibration for active ads, and scoring of held-out users.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrate::{calibrate_many, CalibratedModel, CalibrationSample};
use crate::embed::{embed, knn, EmbeddingProvider, EmbeddingStore, HashEmbedder, NeighborSet};
use crate::error::{Error, Result};
use crate::eval::metrics::{
    auc, consistency_rate, counterfactual_direction, coverage_at_5, direction_accuracy, hitrate_at_5, ndcg_at_k,
    paired_bootstrap, CounterfactualResult, KeywordJudge,
};
use crate::eval::report::{
    EvalReport, ExplainabilityReport, GenerationSummary, ReportMetadata, RobustnessReport, AUC, IMPRESSIONS,
    NDCG_10, NDCG_5, NDCG_USERS,
};
use crate::eval::world::SyntheticWorld;
use crate::gateway::{
    counterfactual_ad_id, parse_counterfactual_response, ChatClient, GenerationConfig, GenerationOutcome, Generator,
    OracleClient, OracleConfig,
};
use crate::model::{dot, AdId, AdRecord, FeatureVector, Source, Stage, UserId, WeightVector};
use crate::prompt::{CounterfactualRequest, Modification, PromptBuilder, TemplateSet};
use crate::seed::derive;
use crate::serve::{latency_report, LatencyStats};
use crate::tolerance::Tolerances;
use crate::train::{median_cold_weights, train_many, TrainConfig, WarmWeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    LlmHyper,
    LrCold,
    LrWarm,
    Cosine,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::LlmHyper, Method::LrCold, Method::LrWarm, Method::Cosine];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::LlmHyper => "llm_hyper",
            Method::LrCold => "lr_cold",
            Method::LrWarm => "lr_warm",
            Method::Cosine => "cosine",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected llm_hyper, lr_cold, lr_warm or cosine)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub oracle: OracleConfig,
    pub include_image: bool,
    /// Neighbours whose trained weights define the reference CTR.
    pub alpha_neighbors: usize,
    pub calibration_sample_size: usize,
    pub bootstrap_resamples: usize,
    pub explainability: bool,
    pub robustness: bool,
    /// Cap on ads used for the reasoning and counterfactual suites (0 = all).
    pub explain_ads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
            oracle: OracleConfig::default(),
            include_image: true,
            alpha_neighbors: 5,
            calibration_sample_size: crate::calibrate::DEFAULT_SAMPLE_SIZE,
            bootstrap_resamples: 10_000,
            explainability: false,
            robustness: false,
            explain_ads: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    pub fn neighbors_k(&self) -> usize {
        self.alpha_neighbors.max(self.generation.shots).max(1)
    }
}

/// Trains one model per ad on training-user interactions only.
pub fn train_warm(world: &SyntheticWorld, ad_ids: &[AdId], cfg: &TrainConfig) -> Result<WarmWeightStore> {
    let train_users: HashSet<&UserId> = world.split.train_users.iter().collect();
    let wanted: HashSet<&AdId> = ad_ids.iter().collect();
    let interactions: Vec<_> = world
        .interactions
        .iter()
        .filter(|i| train_users.contains(&i.user_id) && wanted.contains(&i.ad_id))
        .cloned()
        .collect();
    train_many(ad_ids, &interactions, &world.users_by_id(), cfg)
}

pub fn ad_map(world: &SyntheticWorld) -> BTreeMap<AdId, AdRecord> {
    world.ads.iter().map(|a| (a.ad_id.clone(), a.clone())).collect()
}

pub fn world_embedder(world: &SyntheticWorld) -> HashEmbedder {
    HashEmbedder::new(world.config.embedding_dim, world.config.seed)
}

/// Embeds retired ads and retrieves `k` neighbours for every active ad.
pub fn retrieve_neighbors(
    world: &SyntheticWorld,
    provider: &dyn EmbeddingProvider,
    k: usize,
) -> Result<(EmbeddingStore, BTreeMap<AdId, NeighborSet>)> {
    let ads = ad_map(world);
    let lookup = |id: &AdId| ads.get(id).ok_or_else(|| Error::Alignment(format!("split names unknown ad {id}")));
    let mut store = EmbeddingStore::new(provider.dimension());
    for id in &world.split.retired {
        store.insert(embed(lookup(id)?, provider)?)?;
    }
    let mut neighbors = BTreeMap::new();
    for id in &world.split.active {
        let query = embed(lookup(id)?, provider)?;
        neighbors.insert(id.clone(), knn(&store, &query.vector, k)?);
    }
    Ok((store, neighbors))
}

/// Generated weights for every active ad. Ads whose generation fails on
/// parsing get zero weights, which calibration replaces by the median-cold
/// fallback; transport errors abort.
pub fn generate_cold(
    world: &SyntheticWorld,
    warm: &WarmWeightStore,
    neighbors: &BTreeMap<AdId, NeighborSet>,
    prompts: &PromptBuilder,
    cfg: &GenerationConfig,
    client: &dyn ChatClient,
    judge: Option<&dyn ChatClient>,
) -> Result<(Vec<GenerationOutcome>, GenerationSummary)> {
    let ads = ad_map(world);
    let gen = Generator { schema: &world.schema, ads: &ads, warm, prompts, cfg };
    let jobs: Vec<(&AdRecord, &NeighborSet)> = world
        .split
        .active
        .iter()
        .map(|id| {
            let n = neighbors.get(id).ok_or_else(|| Error::Alignment(format!("no neighbours for {id}")))?;
            Ok((&ads[id], n))
        })
        .collect::<Result<_>>()?;
    let mut summary = GenerationSummary { ads: jobs.len(), ..GenerationSummary::default() };
    let mut outcomes = Vec::with_capacity(jobs.len());
    for ((ad, _), result) in jobs.iter().zip(gen.generate_many(&jobs, client, judge)) {
        let outcome = match result {
            Ok(o) => o,
            Err(Error::GenerationFailed { ad_id, batch, transcripts }) => {
                log::warn!("generation failed for {ad_id} on batch {batch:?} ({} transcripts)", transcripts.len());
                summary.failed_ads += 1;
                failed_outcome(ad, world.schema.dimension())?
            }
            Err(e) => return Err(e),
        };
        summary.client_calls += outcome.client_calls;
        summary.retries += outcome.flags.retries_used;
        summary.outlier_flags += outcome.flags.outliers.len();
        summary.exclusions += outcome.exclusions.len();
        outcomes.push(outcome);
    }
    Ok((outcomes, summary))
}

fn failed_outcome(ad: &AdRecord, dimension: usize) -> Result<GenerationOutcome> {
    Ok(GenerationOutcome {
        ad_id: ad.ad_id.clone(),
        weights: WeightVector::new(ad.ad_id.clone(), Stage::Raw, Source::LlmGenerated, vec![0.0; dimension])?,
        batches: Vec::new(),
        reasoning: Vec::new(),
        flags: Default::default(),
        exclusions: Vec::new(),
        transcripts: Vec::new(),
        client_calls: 0,
        judge_calls: 0,
    })
}

/// Seeded calibration sample drawn from training users.
pub fn calibration_sample(world: &SyntheticWorld, size: usize, seed: u64) -> Result<CalibrationSample> {
    let train: HashSet<&UserId> = world.split.train_users.iter().collect();
    let pool: Vec<FeatureVector> = world.users.iter().filter(|u| train.contains(&u.user_id)).cloned().collect();
    CalibrationSample::draw(&pool, size, seed)
}

pub fn calibrate_cold(
    raw: &[WeightVector],
    neighbors: &BTreeMap<AdId, NeighborSet>,
    alpha_neighbors: usize,
    warm: &WarmWeightStore,
    sample: &CalibrationSample,
) -> Result<Vec<CalibratedModel>> {
    let fallback = median_cold_weights(warm)?;
    let truncated: Vec<NeighborSet> = raw
        .iter()
        .map(|w| {
            neighbors
                .get(&w.ad_id)
                .map(|n| n.truncated(alpha_neighbors))
                .ok_or_else(|| Error::Alignment(format!("no neighbours for {}", w.ad_id)))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(&WeightVector, &NeighborSet)> = raw.iter().zip(&truncated).collect();
    calibrate_many(&jobs, warm, sample, &fallback)
}

/// How a method scores a (user, ad) pair; higher ranks first.
pub enum Scorer {
    /// Linear logit with per-ad weights.
    Linear(BTreeMap<AdId, Vec<f64>>),
    /// Cosine between user and ad embeddings.
    Cosine {
        users: HashMap<UserId, Vec<f64>>,
        ads: BTreeMap<AdId, Vec<f64>>,
    },
}

impl Scorer {
    pub fn score(&self, user: &FeatureVector, ad: &AdId) -> Result<f64> {
        match self {
            Scorer::Linear(w) => {
                let w = w.get(ad).ok_or_else(|| Error::Alignment(format!("method has no weights for {ad}")))?;
                if w.len() != user.dimension() {
                    return Err(Error::Schema(format!("weights for {ad} do not match the user dimension")));
                }
                Ok(dot(w, user.values()))
            }
            Scorer::Cosine { users, ads } => {
                let u = users
                    .get(&user.user_id)
                    .ok_or_else(|| Error::Alignment(format!("no embedding for user {}", user.user_id)))?;
                let a = ads.get(ad).ok_or_else(|| Error::Alignment(format!("no embedding for ad {ad}")))?;
                crate::train::cosine(u, a)
            }
        }
    }
}

/// Offline metrics of one method plus its per-user NDCG@10 for pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodEval {
    pub metrics: BTreeMap<String, f64>,
    pub per_user_ndcg10: Vec<f64>,
    pub latency: LatencyStats,
}

/// Test impressions grouped by user (user id order), each list in ad id order.
pub fn test_impressions(world: &SyntheticWorld) -> Vec<(&FeatureVector, Vec<(&AdId, u8)>)> {
    let test: HashSet<&UserId> = world.split.test_users.iter().collect();
    let active: HashSet<&AdId> = world.split.active.iter().collect();
    let mut by_user: BTreeMap<&UserId, Vec<(&AdId, u8)>> = BTreeMap::new();
    for i in &world.interactions {
        if test.contains(&i.user_id) && active.contains(&i.ad_id) {
            by_user.entry(&i.user_id).or_default().push((&i.ad_id, i.label));
        }
    }
    let users: HashMap<&UserId, &FeatureVector> = world.users.iter().map(|u| (&u.user_id, u)).collect();
    by_user
        .into_iter()
        .map(|(id, mut imps)| {
            imps.sort_by(|a, b| a.0.cmp(b.0));
            (users[id], imps)
        })
        .collect()
}

/// Pooled AUC and per-user NDCG@{5,10} on test impressions. NDCG averages over
/// users with at least one click so every method is scored on the same users.
pub fn evaluate_scorer(
    impressions: &[(&FeatureVector, Vec<(&AdId, u8)>)],
    scorer: &Scorer,
) -> Result<MethodEval> {
    let mut pooled = Vec::new();
    let (mut n5, mut n10) = (Vec::new(), Vec::new());
    let mut timings = Vec::with_capacity(impressions.len());
    for (user, imps) in impressions {
        let start = Instant::now();
        let mut scored: Vec<(&AdId, f64, u8)> = imps
            .iter()
            .map(|(ad, l)| Ok((*ad, scorer.score(user, ad)?, *l)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        timings.push(start.elapsed().as_secs_f64() * 1e3);
        pooled.extend(scored.iter().map(|(_, s, l)| (*s, *l)));
        if scored.iter().any(|(_, _, l)| *l == 1) {
            let labels: Vec<f64> = scored.iter().map(|(_, _, l)| f64::from(*l)).collect();
            n5.push(ndcg_at_k(&labels, 5)?);
            n10.push(ndcg_at_k(&labels, 10)?);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let mut metrics = BTreeMap::new();
    metrics.insert(AUC.to_owned(), auc(&pooled)?);
    metrics.insert(NDCG_5.to_owned(), mean(&n5));
    metrics.insert(NDCG_10.to_owned(), mean(&n10));
    metrics.insert(NDCG_USERS.to_owned(), n10.len() as f64);
    metrics.insert(IMPRESSIONS.to_owned(), pooled.len() as f64);
    Ok(MethodEval { metrics, per_user_ndcg10: n10, latency: latency_report(&timings) })
}

/// Counterfactual suite: rewrite each ad three ways, regenerate weights for the
/// rewrite and check the target feature's weight moved as intended.
pub fn counterfactual_suite(
    world: &SyntheticWorld,
    generator: &Generator<'_>,
    originals: &BTreeMap<AdId, &WeightVector>,
    neighbors: &BTreeMap<AdId, NeighborSet>,
    client: &dyn ChatClient,
    limit: usize,
) -> Result<RobustnessReport> {
    let mut results = Vec::new();
    let ads = ad_map(world);
    for label in world.labels.iter().filter(|l| originals.contains_key(&l.ad_id)).take(limit_or_all(limit)) {
        let ad = &ads[&label.ad_id];
        let feature = &label.target_features[0];
        let fi = world.schema.index_of(feature).expect("validated label");
        let desc = world.schema.entries()[fi].description.clone();
        let s_orig = originals[&label.ad_id].values()[fi];
        for m in Modification::ALL {
            let req = CounterfactualRequest {
                ad_id: counterfactual_ad_id(&ad.ad_id, m),
                original_title: ad.title.clone(),
                original_summary: ad.image_caption.clone(),
                target_features: vec![(feature.clone(), desc.clone())],
                modification: m,
            };
            let bundle = generator.prompts.counterfactual_prompt(&req)?;
            let seed = derive(generator.cfg.seed, &["counterfactual", ad.ad_id.as_str(), m.as_str()]);
            let rewrite = parse_counterfactual_response(&client.complete(&bundle, generator.cfg.temperature, Some(seed))?)?;
            let mut modified = ad.clone();
            modified.ad_id = req.ad_id.clone();
            modified.title = rewrite.modified_title;
            modified.image_caption = rewrite.modified_summary;
            let n = neighbors
                .get(&ad.ad_id)
                .ok_or_else(|| Error::Alignment(format!("no neighbours for {}", ad.ad_id)))?;
            let out = generator.generate_weights(&modified, n, client)?;
            let s_cf = out.weights.values()[fi];
            results.push(CounterfactualResult {
                ad_id: ad.ad_id.clone(),
                feature: feature.clone(),
                modification: m,
                s_orig,
                s_cf,
                direction_correct: counterfactual_direction(s_orig, s_cf, m)?,
            });
        }
    }
    let mut by_modification = BTreeMap::new();
    for m in Modification::ALL {
        let subset: Vec<CounterfactualResult> = results.iter().filter(|r| r.modification == m).cloned().collect();
        by_modification.insert(m.as_str().to_owned(), direction_accuracy(&subset)?);
    }
    Ok(RobustnessReport { accuracy: direction_accuracy(&results)?, by_modification, results })
}

fn limit_or_all(limit: usize) -> usize {
    if limit == 0 {
        usize::MAX
    } else {
        limit
    }
}

/// HR@5 and Coverage@5 of generated weights, plus reasoning consistency.
pub fn explainability_suite(
    world: &SyntheticWorld,
    generator: &Generator<'_>,
    raw: &[WeightVector],
    neighbors: &BTreeMap<AdId, NeighborSet>,
    client: &dyn ChatClient,
    judge: &dyn ChatClient,
    limit: usize,
) -> Result<ExplainabilityReport> {
    let labels: HashMap<&AdId, _> = world.labels.iter().map(|l| (&l.ad_id, l)).collect();
    let pairs: Vec<_> = raw
        .iter()
        .map(|w| {
            labels
                .get(&w.ad_id)
                .map(|l| (w, *l))
                .ok_or_else(|| Error::Alignment(format!("no ground-truth label for {}", w.ad_id)))
        })
        .collect::<Result<_>>()?;
    let hr = hitrate_at_5(&pairs, &world.schema)?;
    let cov = coverage_at_5(&pairs, &world.schema)?;
    let ads = ad_map(world);
    let mut records = Vec::new();
    for w in raw.iter().take(limit_or_all(limit)) {
        let n = neighbors
            .get(&w.ad_id)
            .ok_or_else(|| Error::Alignment(format!("no neighbours for {}", w.ad_id)))?;
        records.extend(generator.generate_reasoning(&ads[&w.ad_id], n, client)?);
    }
    let consistency = consistency_rate(&records, judge, generator.prompts, Tolerances::DEFAULT.neutral_band)?;
    Ok(ExplainabilityReport { ads: pairs.len(), hr_at_5: hr, coverage_at_5: cov, consistency: Some(consistency) })
}

/// Report plus the pieces that do not belong in it.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: EvalReport,
    pub per_user_ndcg10: BTreeMap<String, Vec<f64>>,
    pub latency: BTreeMap<String, LatencyStats>,
}

/// Everything the LLM arm needs before scoring: warm models, neighbours, raw
/// generated weights and their calibrated form.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub warm: WarmWeightStore,
    pub neighbors: BTreeMap<AdId, NeighborSet>,
    pub raw: Vec<WeightVector>,
    pub calibrated: Vec<CalibratedModel>,
    pub generation: Option<GenerationSummary>,
    pub templates: TemplateSet,
}

fn oracle_or<'a>(
    world: &SyntheticWorld,
    cfg: &ExperimentConfig,
    client: Option<&'a dyn ChatClient>,
) -> Box<dyn ChatClient + 'a> {
    struct Borrowed<'c>(&'c dyn ChatClient);
    impl ChatClient for Borrowed<'_> {
        fn complete(&self, b: &crate::prompt::PromptBundle, t: f64, s: Option<u64>) -> Result<String> {
            self.0.complete(b, t, s)
        }
        fn capabilities(&self) -> crate::gateway::Capabilities {
            self.0.capabilities()
        }
    }
    match client {
        Some(c) => Box::new(Borrowed(c)),
        None => Box::new(OracleClient::new(world.oracle_truth(), cfg.oracle.clone())),
    }
}

/// Trains warm models, retrieves neighbours, generates and calibrates every
/// active ad. Also returns the full generation outcomes (transcripts, flags).
pub fn prepare(
    world: &SyntheticWorld,
    cfg: &ExperimentConfig,
    client: Option<&dyn ChatClient>,
) -> Result<(Prepared, Vec<GenerationOutcome>)> {
    prepare_with_templates(world, cfg, client, TemplateSet::builtin())
}

pub fn prepare_with_templates(
    world: &SyntheticWorld,
    cfg: &ExperimentConfig,
    client: Option<&dyn ChatClient>,
    templates: TemplateSet,
) -> Result<(Prepared, Vec<GenerationOutcome>)> {
    cfg.generation.validate()?;
    cfg.train.validate()?;
    let client = oracle_or(world, cfg, client);
    let warm = train_warm(world, &world.split.retired, &cfg.train)?;
    let (_, neighbors) = retrieve_neighbors(world, &world_embedder(world), cfg.neighbors_k())?;
    let prompts = PromptBuilder::new(templates.clone()).with_image(cfg.include_image);
    let (outcomes, mut summary) = generate_cold(world, &warm, &neighbors, &prompts, &cfg.generation, &*client, None)?;
    let sample = calibration_sample(world, cfg.calibration_sample_size, derive(cfg.seed, &["calibration"]))?;
    let raw: Vec<WeightVector> = outcomes.iter().map(|x| x.weights.clone()).collect();
    let calibrated = calibrate_cold(&raw, &neighbors, cfg.alpha_neighbors, &warm, &sample)?;
    summary.median_cold_fallbacks = calibrated.iter().filter(|m| m.source == Source::MedianCold).count();
    Ok((Prepared { warm, neighbors, raw, calibrated, generation: Some(summary), templates }, outcomes))
}

fn build_scorer(world: &SyntheticWorld, method: Method, cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Scorer> {
    Ok(match method {
        Method::LlmHyper => {
            if prepared.calibrated.is_empty() {
                return Err(Error::Config("llm_hyper needs calibrated models".into()));
            }
            Scorer::Linear(prepared.calibrated.iter().map(|c| (c.ad_id.clone(), c.values.clone())).collect())
        }
        Method::LrCold => {
            let median = median_cold_weights(&prepared.warm)?;
            Scorer::Linear(world.split.active.iter().map(|id| (id.clone(), median.values().to_vec())).collect())
        }
        Method::LrWarm => {
            let active = train_warm(world, &world.split.active, &cfg.train)?;
            Scorer::Linear(active.models().iter().map(|(id, w)| (id.clone(), w.values().to_vec())).collect())
        }
        Method::Cosine => {
            let provider = world_embedder(world);
            let ads = ad_map(world);
            let ad_vecs = world
                .split
                .active
                .iter()
                .map(|id| Ok((id.clone(), embed(&ads[id], &provider)?.vector)))
                .collect::<Result<_>>()?;
            let users = world
                .user_embeddings
                .iter()
                .map(|e| (UserId::new(e.ad_id.as_str()), e.vector.clone()))
                .collect();
            Scorer::Cosine { users, ads: ad_vecs }
        }
    })
}

/// Assembles method metrics and pairwise significance into a report.
pub fn assemble_report(
    evals: &[(String, MethodEval)],
    resamples: usize,
    seed: u64,
) -> Result<(BTreeMap<String, BTreeMap<String, f64>>, BTreeMap<String, crate::eval::metrics::BootstrapResult>)> {
    let methods = evals.iter().map(|(m, e)| (m.clone(), e.metrics.clone())).collect();
    let mut significance = BTreeMap::new();
    for (i, (a, ea)) in evals.iter().enumerate() {
        for (b, eb) in &evals[i + 1..] {
            let s = derive(seed, &["bootstrap", a, b]);
            significance.insert(
                format!("{a}_vs_{b}"),
                paired_bootstrap(&ea.per_user_ndcg10, &eb.per_user_ndcg10, resamples, s)?,
            );
        }
    }
    Ok((methods, significance))
}

/// Runs the full offline protocol. Without a `client` the oracle mock built
/// from the world's ground truth and `cfg.oracle` stands in for the LLM.
pub fn run_offline_experiment(
    world: &SyntheticWorld,
    methods: &[Method],
    cfg: &ExperimentConfig,
    client: Option<&dyn ChatClient>,
) -> Result<ExperimentOutput> {
    if methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    let needs_llm = methods.contains(&Method::LlmHyper) || cfg.explainability || cfg.robustness;
    let prepared = if needs_llm {
        prepare(world, cfg, client)?.0
    } else {
        cfg.train.validate()?;
        Prepared {
            warm: train_warm(world, &world.split.retired, &cfg.train)?,
            neighbors: BTreeMap::new(),
            raw: Vec::new(),
            calibrated: Vec::new(),
            generation: None,
            templates: TemplateSet::builtin(),
        }
    };
    evaluate_prepared(world, methods, cfg, client, &prepared)
}

/// Scores held-out users for every method and runs the optional suites on
/// already prepared artifacts.
pub fn evaluate_prepared(
    world: &SyntheticWorld,
    methods: &[Method],
    cfg: &ExperimentConfig,
    client: Option<&dyn ChatClient>,
    prepared: &Prepared,
) -> Result<ExperimentOutput> {
    if methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    if methods.contains(&Method::Cosine) && world.user_embeddings.is_empty() {
        return Err(Error::Config("cosine baseline needs user embeddings".into()));
    }
    if (cfg.explainability || cfg.robustness) && prepared.raw.is_empty() {
        return Err(Error::Config("explainability and robustness suites need generated weights".into()));
    }
    let client = oracle_or(world, cfg, client);
    let impressions = test_impressions(world);
    // methods are independent; report assembly below is sequential
    let evals: Vec<(String, MethodEval)> = methods
        .par_iter()
        .map(|&m| {
            let scorer = build_scorer(world, m, cfg, prepared)?;
            Ok((m.as_str().to_owned(), evaluate_scorer(&impressions, &scorer)?))
        })
        .collect::<Result<_>>()?;

    let ads = ad_map(world);
    let prompts = PromptBuilder::new(prepared.templates.clone()).with_image(cfg.include_image);
    let generator =
        Generator { schema: &world.schema, ads: &ads, warm: &prepared.warm, prompts: &prompts, cfg: &cfg.generation };
    let explainability = if cfg.explainability {
        Some(explainability_suite(
            world,
            &generator,
            &prepared.raw,
            &prepared.neighbors,
            &*client,
            &KeywordJudge,
            cfg.explain_ads,
        )?)
    } else {
        None
    };
    let robustness = if cfg.robustness {
        let originals: BTreeMap<AdId, &WeightVector> = prepared.raw.iter().map(|w| (w.ad_id.clone(), w)).collect();
        Some(counterfactual_suite(world, &generator, &originals, &prepared.neighbors, &*client, cfg.explain_ads)?)
    } else {
        None
    };

    let (method_metrics, significance) = assemble_report(&evals, cfg.bootstrap_resamples, cfg.seed)?;
    let mut seeds = BTreeMap::new();
    seeds.insert("world".to_owned(), world.config.seed);
    seeds.insert("experiment".to_owned(), cfg.seed);
    seeds.insert("generation".to_owned(), cfg.generation.seed);
    seeds.insert("oracle".to_owned(), cfg.oracle.seed);
    let report = EvalReport {
        methods: method_metrics,
        significance,
        generation: prepared.generation.clone(),
        explainability,
        robustness,
        metadata: ReportMetadata {
            seeds,
            config_hash: cfg.hash(),
            template_version: prompts.templates.version.clone(),
            world_hash: world.content_hash()?,
        },
    };
    Ok(ExperimentOutput {
        report,
        per_user_ndcg10: evals.iter().map(|(m, e)| (m.clone(), e.per_user_ndcg10.clone())).collect(),
        latency: evals.into_iter().map(|(m, e)| (m, e.latency)).collect(),
    })
}
