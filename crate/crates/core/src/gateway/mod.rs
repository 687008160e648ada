//! Weight generation against a chat model: batching, multi-sample averaging,
//! parse retries and judge checks.

pub mod client;
pub mod parse;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use client::{
    counterfactual_ad_id, split_counterfactual_ad_id, Capabilities, ChatClient, OracleClient, OracleConfig,
    RemoteChatClient, RemoteChatConfig, ScriptedClient,
};
pub use parse::{
    extract_json_object, parse_counterfactual_response, parse_reasoning_response, parse_weight_response,
    CounterfactualRewrite, ParsedWeights, ReasoningPayload,
};

use crate::embed::NeighborSet;
use crate::error::{Error, Result};
use crate::model::{AdId, AdRecord, FeatureSchema, Source, Stage, WeightVector};
use crate::prompt::{batch_features, few_shot_examples, PromptBuilder, PromptBundle, PromptKind};
use crate::seed;
use crate::train::WarmWeightStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub samples_per_batch: usize,
    pub temperature: f64,
    pub max_retries_on_parse_failure: usize,
    pub judge_enabled: bool,
    pub outlier_threshold: f64,
    pub batch_size: usize,
    /// Few-shot examples per prompt; 0 is zero-shot.
    pub shots: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            samples_per_batch: 3,
            temperature: 0.5,
            max_retries_on_parse_failure: 2,
            judge_enabled: false,
            outlier_threshold: 5.0,
            batch_size: 5,
            shots: 5,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_batch < 1 {
            return Err(Error::Config("samples_per_batch must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature must be finite and non-negative, got {}", self.temperature)));
        }
        if !(self.outlier_threshold.is_finite() && self.outlier_threshold > 0.0) {
            return Err(Error::Config(format!("outlier_threshold must be positive, got {}", self.outlier_threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Regenerate,
    Filter,
}

/// One client exchange, persisted for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub ad_id: AdId,
    pub kind: PromptKind,
    pub batch_index: usize,
    pub sample: usize,
    pub attempt: usize,
    pub round: usize,
    pub seed: u64,
    /// SHA-256 prefix of the system and user message, enough to match a dumped prompt.
    pub prompt_hash: String,
    pub response: Option<String>,
    pub error: Option<String>,
}

/// Parsed samples for one feature batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSamples {
    pub batch_index: usize,
    pub features: Vec<String>,
    pub samples: Vec<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationFlags {
    pub outliers: Vec<String>,
    pub extra_keys: Vec<String>,
    pub retries_used: usize,
    pub failed_samples: usize,
    pub regenerations: usize,
    pub judge_verdicts: BTreeMap<String, Verdict>,
    pub judge_degraded: bool,
    pub warnings: Vec<String>,
}

/// An ad that must not be shown to users with a high value of `feature`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Exclusion {
    pub ad_id: AdId,
    pub feature: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningRecord {
    pub ad_id: AdId,
    pub feature_name: String,
    pub reasoning: String,
    pub predicted_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub ad_id: AdId,
    pub weights: WeightVector,
    pub batches: Vec<BatchSamples>,
    #[serde(default)]
    pub reasoning: Vec<ReasoningRecord>,
    pub flags: GenerationFlags,
    pub exclusions: Vec<Exclusion>,
    pub transcripts: Vec<TranscriptEntry>,
    /// Calls made to the generating client (the judge is counted separately).
    pub client_calls: usize,
    pub judge_calls: usize,
}

fn prompt_hash(bundle: &PromptBundle) -> String {
    let mut h = Sha256::new();
    h.update(bundle.system_text.as_bytes());
    h.update([0]);
    h.update(bundle.user_message().as_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Result of running one batch through the client.
struct BatchRun {
    samples: Vec<BTreeMap<String, f64>>,
    transcripts: Vec<TranscriptEntry>,
    calls: usize,
    retries: usize,
    failed_samples: usize,
    outliers: Vec<String>,
    extra_keys: Vec<String>,
}

/// Shared read-only context for generating weights of many ads.
pub struct Generator<'a> {
    pub schema: &'a FeatureSchema,
    pub ads: &'a BTreeMap<AdId, AdRecord>,
    pub warm: &'a WarmWeightStore,
    pub prompts: &'a PromptBuilder,
    pub cfg: &'a GenerationConfig,
}

impl Generator<'_> {
    fn batches(&self) -> Result<Vec<Vec<String>>> {
        batch_features(self.schema, self.cfg.batch_size)
    }

    fn sample_seed(&self, ad: &AdId, parts: [usize; 4]) -> u64 {
        let [batch, sample, attempt, round] = parts.map(|p| p.to_string());
        seed::derive(self.cfg.seed, &[ad.as_str(), &batch, &sample, &attempt, &round])
    }

    fn weight_bundle(&self, ad: &AdRecord, batch: &[String], neighbors: &NeighborSet) -> Result<PromptBundle> {
        let shots = neighbors.truncated(self.cfg.shots);
        let examples = few_shot_examples(&shots, self.ads, self.warm, self.schema, batch)?;
        self.prompts.weight_prompt(ad, batch, self.schema, &examples)
    }

    /// Collects `samples` parsed completions for one batch, retrying parse
    /// failures. Transport errors abort immediately.
    fn run_batch(
        &self,
        ad: &AdRecord,
        batch_index: usize,
        bundle: &PromptBundle,
        samples: usize,
        round: usize,
        client: &dyn ChatClient,
    ) -> Result<BatchRun> {
        let hash = prompt_hash(bundle);
        let mut run = BatchRun {
            samples: Vec::with_capacity(samples),
            transcripts: Vec::new(),
            calls: 0,
            retries: 0,
            failed_samples: 0,
            outliers: Vec::new(),
            extra_keys: Vec::new(),
        };
        for sample in 0..samples {
            let mut ok = false;
            for attempt in 0..=self.cfg.max_retries_on_parse_failure {
                if attempt > 0 {
                    run.retries += 1;
                }
                let seed = self.sample_seed(&ad.ad_id, [batch_index, sample, attempt, round]);
                run.calls += 1;
                let mut entry = TranscriptEntry {
                    ad_id: ad.ad_id.clone(),
                    kind: PromptKind::Weights,
                    batch_index,
                    sample,
                    attempt,
                    round,
                    seed,
                    prompt_hash: hash.clone(),
                    response: None,
                    error: None,
                };
                let raw = match client.complete(bundle, self.cfg.temperature, Some(seed)) {
                    Ok(raw) => raw,
                    Err(e) => {
                        entry.error = Some(e.to_string());
                        run.transcripts.push(entry);
                        return Err(e);
                    }
                };
                let parsed = parse_weight_response(&raw, &bundle.feature_batch, self.cfg.outlier_threshold);
                entry.response = Some(raw);
                match parsed {
                    Ok(p) => {
                        run.transcripts.push(entry);
                        run.outliers.extend(p.outliers);
                        run.extra_keys.extend(p.extra_keys);
                        run.samples.push(p.weights);
                        ok = true;
                        break;
                    }
                    Err(e) => {
                        log::debug!("{}: batch {batch_index} sample {sample} attempt {attempt}: {e}", ad.ad_id);
                        entry.error = Some(e.to_string());
                        run.transcripts.push(entry);
                    }
                }
            }
            if !ok {
                run.failed_samples += 1;
            }
        }
        if run.samples.is_empty() {
            return Err(Error::GenerationFailed {
                ad_id: ad.ad_id.clone(),
                batch: bundle.feature_batch.clone(),
                transcripts: run.transcripts.iter().filter_map(|t| t.response.clone()).collect(),
            });
        }
        Ok(run)
    }

    fn absorb(outcome: &mut GenerationOutcome, run: &BatchRun) {
        outcome.client_calls += run.calls;
        outcome.flags.retries_used += run.retries;
        outcome.flags.failed_samples += run.failed_samples;
        outcome.flags.outliers.extend(run.outliers.iter().cloned());
        outcome.flags.extra_keys.extend(run.extra_keys.iter().cloned());
        outcome.transcripts.extend(run.transcripts.iter().cloned());
    }

    /// Generates the raw weight vector of one cold ad. The intercept is left at
    /// zero; calibration determines it.
    pub fn generate_weights(
        &self,
        ad: &AdRecord,
        neighbors: &NeighborSet,
        client: &dyn ChatClient,
    ) -> Result<GenerationOutcome> {
        self.cfg.validate()?;
        let mut values = vec![0.0; self.schema.dimension()];
        let mut outcome = GenerationOutcome {
            ad_id: ad.ad_id.clone(),
            weights: WeightVector::new(ad.ad_id.clone(), Stage::Raw, Source::LlmGenerated, values.clone())?,
            batches: Vec::new(),
            reasoning: Vec::new(),
            flags: GenerationFlags::default(),
            exclusions: Vec::new(),
            transcripts: Vec::new(),
            client_calls: 0,
            judge_calls: 0,
        };
        for (batch_index, batch) in self.batches()?.into_iter().enumerate() {
            let bundle = self.weight_bundle(ad, &batch, neighbors)?;
            let run = self.run_batch(ad, batch_index, &bundle, self.cfg.samples_per_batch, 0, client)?;
            Self::absorb(&mut outcome, &run);
            for f in &batch {
                let i = self.schema.index_of(f).expect("batched from schema");
                values[i] = mean(run.samples.iter().map(|s| s[f]));
            }
            outcome.batches.push(BatchSamples {
                batch_index,
                features: batch,
                samples: run.samples,
            });
        }
        outcome.weights = WeightVector::new(ad.ad_id.clone(), Stage::Raw, Source::LlmGenerated, values)?;
        Ok(outcome)
    }

    /// Asks `judge` to review every batch. Features judged `regenerate` get one
    /// fresh completion for their batch; `filter` adds an exclusion. A judge
    /// that fails or answers unintelligibly is treated as passing everything.
    pub fn judge_validate(
        &self,
        outcome: &mut GenerationOutcome,
        ad: &AdRecord,
        neighbors: &NeighborSet,
        client: &dyn ChatClient,
        judge: &dyn ChatClient,
    ) -> Result<Vec<(String, Verdict)>> {
        let mut verdicts = Vec::new();
        let mut values = outcome.weights.values().to_vec();
        let batches = outcome.batches.clone();
        for b in &batches {
            let pairs: Vec<(String, f64)> = b
                .features
                .iter()
                .map(|f| (f.clone(), values[self.schema.index_of(f).expect("schema feature")]))
                .collect();
            let bundle = self.prompts.judge_validation_prompt(ad, &pairs, self.schema);
            outcome.judge_calls += 1;
            let seed = self.sample_seed(&ad.ad_id, [b.batch_index, 0, 0, usize::MAX]);
            let parsed = match judge.complete(&bundle, 0.0, Some(seed)) {
                Ok(raw) => parse_verdicts(&raw, &b.features),
                Err(e) => Err(e),
            };
            let batch_verdicts = match parsed {
                Ok(v) => v,
                Err(e) => {
                    let msg = format!("judge unavailable for batch {} of {}: {e}", b.batch_index, ad.ad_id);
                    log::warn!("{msg}");
                    outcome.flags.judge_degraded = true;
                    outcome.flags.warnings.push(msg);
                    b.features.iter().map(|f| (f.clone(), Verdict::Pass)).collect()
                }
            };
            let regenerate: Vec<&String> = batch_verdicts
                .iter()
                .filter(|(_, v)| *v == Verdict::Regenerate)
                .map(|(f, _)| f)
                .collect();
            if !regenerate.is_empty() {
                let fresh_bundle = self.weight_bundle(ad, &b.features, neighbors)?;
                let run = self.run_batch(ad, b.batch_index, &fresh_bundle, 1, 1, client)?;
                Self::absorb(outcome, &run);
                outcome.flags.regenerations += 1;
                for f in regenerate {
                    values[self.schema.index_of(f).expect("schema feature")] = run.samples[0][f];
                }
            }
            for (f, v) in &batch_verdicts {
                if *v == Verdict::Filter {
                    outcome.exclusions.push(Exclusion {
                        ad_id: ad.ad_id.clone(),
                        feature: f.clone(),
                    });
                }
                outcome.flags.judge_verdicts.insert(f.clone(), *v);
            }
            verdicts.extend(batch_verdicts);
        }
        outcome.weights = WeightVector::new(ad.ad_id.clone(), Stage::Raw, Source::LlmGenerated, values)?;
        Ok(verdicts)
    }

    /// Reason-then-score generation: one reasoning record per feature.
    pub fn generate_reasoning(
        &self,
        ad: &AdRecord,
        neighbors: &NeighborSet,
        client: &dyn ChatClient,
    ) -> Result<Vec<ReasoningRecord>> {
        let mut records = Vec::new();
        for (batch_index, batch) in self.batches()?.into_iter().enumerate() {
            let shots = neighbors.truncated(self.cfg.shots);
            let examples = few_shot_examples(&shots, self.ads, self.warm, self.schema, &batch)?;
            let bundle = self.prompts.reasoning_prompt(ad, &batch, self.schema, &examples)?;
            let mut transcripts = Vec::new();
            let mut parsed = None;
            for attempt in 0..=self.cfg.max_retries_on_parse_failure {
                let seed = self.sample_seed(&ad.ad_id, [batch_index, 0, attempt, 2]);
                let raw = client.complete(&bundle, self.cfg.temperature, Some(seed))?;
                match parse_reasoning_response(&raw, &batch) {
                    Ok(p) => {
                        parsed = Some(p);
                        break;
                    }
                    Err(e) => {
                        log::debug!("{}: reasoning batch {batch_index} attempt {attempt}: {e}", ad.ad_id);
                        transcripts.push(raw);
                    }
                }
            }
            let parsed = parsed.ok_or_else(|| Error::GenerationFailed {
                ad_id: ad.ad_id.clone(),
                batch: batch.clone(),
                transcripts,
            })?;
            for f in &batch {
                let p = &parsed[f];
                records.push(ReasoningRecord {
                    ad_id: ad.ad_id.clone(),
                    feature_name: f.clone(),
                    reasoning: p.reasoning_text(),
                    predicted_score: p.predicted_score,
                });
            }
        }
        Ok(records)
    }

    /// Generates (and optionally judges) every ad in parallel. Results keep
    /// the input order.
    pub fn generate_many(
        &self,
        jobs: &[(&AdRecord, &NeighborSet)],
        client: &dyn ChatClient,
        judge: Option<&dyn ChatClient>,
    ) -> Vec<Result<GenerationOutcome>> {
        jobs.par_iter()
            .map(|(ad, neighbors)| {
                let mut outcome = self.generate_weights(ad, neighbors, client)?;
                if self.cfg.judge_enabled {
                    if let Some(judge) = judge {
                        self.judge_validate(&mut outcome, ad, neighbors, client, judge)?;
                    }
                }
                Ok(outcome)
            })
            .collect()
    }
}

/// Incremental mean: identical samples average to exactly themselves.
fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut m = 0.0;
    for (i, v) in values.enumerate() {
        m += (v - m) / (i + 1) as f64;
    }
    m
}

/// Reads a `{feature: verdict}` object; features the judge omits pass.
fn parse_verdicts(raw: &str, features: &[String]) -> Result<Vec<(String, Verdict)>> {
    let obj = extract_json_object(raw).ok_or_else(|| Error::Parse("judge reply has no JSON object".into()))?;
    features
        .iter()
        .map(|f| {
            let v = match obj.get(f).and_then(|v| v.as_str()).map(|s| s.trim().to_ascii_lowercase()) {
                None => Verdict::Pass,
                Some(s) if s == "pass" => Verdict::Pass,
                Some(s) if s == "regenerate" => Verdict::Regenerate,
                Some(s) if s == "filter" => Verdict::Filter,
                Some(other) => return Err(Error::Parse(format!("unknown verdict `{other}` for `{f}`"))),
            };
            Ok((f.clone(), v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Neighbor;
    use crate::model::{FeatureDef, Lifecycle};

    struct Fixture {
        schema: FeatureSchema,
        ads: BTreeMap<AdId, AdRecord>,
        warm: WarmWeightStore,
        prompts: PromptBuilder,
        neighbors: NeighborSet,
    }

    fn fixture(n_features: usize) -> Fixture {
        let schema = FeatureSchema::new(
            (0..n_features)
                .map(|i| FeatureDef::new(format!("f{i}"), format!("interest {i}")))
                .collect(),
        )
        .unwrap();
        let mut ads = BTreeMap::new();
        let mut warm = WarmWeightStore::new();
        for id in ["w1", "w2"] {
            ads.insert(AdId::from(id), AdRecord::new(id, format!("warm {id}"), "caption", Lifecycle::Retired).unwrap());
            warm.insert_weights(
                WeightVector::new(id, Stage::Raw, Source::Trained, vec![0.1; n_features + 1]).unwrap(),
            );
        }
        ads.insert(AdId::from("cold"), AdRecord::new("cold", "cold ad", "caption", Lifecycle::Active).unwrap());
        let neighbors = NeighborSet {
            k: 2,
            neighbors: vec![
                Neighbor { ad_id: "w1".into(), distance: 0.1, similarity: 1.0 / 1.1 },
                Neighbor { ad_id: "w2".into(), distance: 0.2, similarity: 1.0 / 1.2 },
            ],
        };
        Fixture { schema, ads, warm, prompts: PromptBuilder::default(), neighbors }
    }

    impl Fixture {
        fn generator<'a>(&'a self, cfg: &'a GenerationConfig) -> Generator<'a> {
            Generator { schema: &self.schema, ads: &self.ads, warm: &self.warm, prompts: &self.prompts, cfg }
        }

        fn cold(&self) -> &AdRecord {
            &self.ads[&AdId::from("cold")]
        }
    }

    #[test]
    fn identical_samples_average_to_themselves() {
        let fx = fixture(2);
        let cfg = GenerationConfig::default();
        let client = ScriptedClient::constant(r#"{"f0": 0.3, "f1": -0.7}"#);
        let out = fx.generator(&cfg).generate_weights(fx.cold(), &fx.neighbors, &client).unwrap();
        assert_eq!(out.weights.values(), &[0.0, 0.3, -0.7]);
        assert_eq!(out.client_calls, 3);
        assert_eq!(client.call_count(), 3);
    }

    #[test]
    fn two_point_mean() {
        let fx = fixture(1);
        let cfg = GenerationConfig { samples_per_batch: 2, ..GenerationConfig::default() };
        let client = ScriptedClient::new([r#"{"f0":0.0}"#, r#"{"f0":0.4}"#]);
        let out = fx.generator(&cfg).generate_weights(fx.cold(), &fx.neighbors, &client).unwrap();
        assert!((out.weights.values()[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn parse_failures_are_retried_and_counted() {
        let fx = fixture(7);
        let cfg = GenerationConfig { samples_per_batch: 2, ..GenerationConfig::default() };
        let good_a = r#"{"f0":1,"f1":1,"f2":1,"f3":1,"f4":1}"#;
        let good_b = r#"{"f5":2,"f6":2}"#;
        let client = ScriptedClient::new(["garbage", good_a, good_a, good_b, "{}", "{\"f5\":2}", good_b]);
        let out = fx.generator(&cfg).generate_weights(fx.cold(), &fx.neighbors, &client).unwrap();
        assert_eq!(out.flags.retries_used, 3);
        assert_eq!(out.client_calls, 2 * 2 + 3);
        assert_eq!(client.call_count(), out.client_calls);
        assert_eq!(out.weights.values()[6], 2.0);
        assert_eq!(out.weights.values()[0], 0.0);
    }

    #[test]
    fn all_failures_surface_transcripts() {
        let fx = fixture(2);
        let cfg = GenerationConfig::default();
        let client = ScriptedClient::constant("sorry, no numbers today");
        let err = fx.generator(&cfg).generate_weights(fx.cold(), &fx.neighbors, &client).unwrap_err();
        match err {
            Error::GenerationFailed { transcripts, batch, .. } => {
                assert_eq!(transcripts.len(), 9);
                assert_eq!(batch, ["f0", "f1"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transport_errors_propagate() {
        let fx = fixture(2);
        let cfg = GenerationConfig::default();
        let client = ScriptedClient::new(Vec::<String>::new());
        let err = fx.generator(&cfg).generate_weights(fx.cold(), &fx.neighbors, &client).unwrap_err();
        assert!(err.is_retryable());
    }

    #[test]
    fn judge_paths() {
        let fx = fixture(3);
        let cfg = GenerationConfig { judge_enabled: true, ..GenerationConfig::default() };
        let gen = fx.generator(&cfg);
        let client = ScriptedClient::constant(r#"{"f0":0.1,"f1":0.2,"f2":0.3}"#);
        let mut out = gen.generate_weights(fx.cold(), &fx.neighbors, &client).unwrap();
        let before = out.weights.clone();

        let pass = ScriptedClient::constant(r#"{"f0":"pass","f1":"pass","f2":"pass"}"#);
        let v = gen.judge_validate(&mut out, fx.cold(), &fx.neighbors, &client, &pass).unwrap();
        assert!(v.iter().all(|(_, v)| *v == Verdict::Pass));
        assert_eq!(out.weights, before);

        let regen_client = ScriptedClient::constant(r#"{"f0":0.1,"f1":0.9,"f2":0.3}"#);
        let regen = ScriptedClient::constant(r#"{"f1":"regenerate"}"#);
        gen.judge_validate(&mut out, fx.cold(), &fx.neighbors, &regen_client, &regen).unwrap();
        assert_eq!(regen_client.call_count(), 1);
        assert_eq!(out.flags.regenerations, 1);
        assert_eq!(out.weights.values()[2], 0.9);
        assert_eq!(out.weights.values()[1], 0.1);

        let filter = ScriptedClient::constant(r#"{"f2":"filter"}"#);
        gen.judge_validate(&mut out, fx.cold(), &fx.neighbors, &client, &filter).unwrap();
        assert_eq!(out.exclusions, [Exclusion { ad_id: "cold".into(), feature: "f2".into() }]);

        let down = ScriptedClient::new(Vec::<String>::new());
        let v = gen.judge_validate(&mut out, fx.cold(), &fx.neighbors, &client, &down).unwrap();
        assert!(v.iter().all(|(_, v)| *v == Verdict::Pass));
        assert!(out.flags.judge_degraded);
    }

    #[test]
    fn reasoning_records_per_feature() {
        let fx = fixture(2);
        let cfg = GenerationConfig::default();
        let truth = std::collections::HashMap::from([(
            AdId::from("cold"),
            std::collections::HashMap::from([("f0".to_string(), 0.6), ("f1".to_string(), -0.4)]),
        )]);
        let oracle = OracleClient::noiseless(truth);
        let recs = fx.generator(&cfg).generate_reasoning(fx.cold(), &fx.neighbors, &oracle).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].predicted_score, 0.6);
        assert!(recs[1].reasoning.contains("mismatch"));
    }
}
