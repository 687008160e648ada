//! Real-time ranking over an atomically swapped weight snapshot.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use arc_swap::ArcSwapOption;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calibrate::{CalibratedModel, CalibrationSample};
use crate::error::{Error, Result};
use crate::gateway::Exclusion;
use crate::jsonl::read_jsonl;
use crate::model::{dot, top_k, AdId, FeatureSchema, FeatureVector, Ranked, WeightVector};

pub const DEFAULT_THRESHOLD_PERCENTILE: f64 = 90.0;
pub const LATENCY_WINDOW: usize = 100_000;

/// An immutable generation of serving weights.
#[derive(Debug)]
pub struct Snapshot {
    pub generation: u64,
    dimension: usize,
    ad_ids: Vec<AdId>,
    /// Row-major `ad_ids.len() x dimension`.
    weights: Vec<f64>,
    /// Feature indices per ad on which high-value users are excluded.
    exclusions: Vec<Vec<usize>>,
    /// Per-feature high-value thresholds (empty when nothing is excluded).
    thresholds: Vec<f64>,
}

impl Snapshot {
    pub fn len(&self) -> usize {
        self.ad_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ad_ids.is_empty()
    }

    pub fn ad_ids(&self) -> &[AdId] {
        &self.ad_ids
    }

    pub fn weights_of(&self, i: usize) -> &[f64] {
        &self.weights[i * self.dimension..(i + 1) * self.dimension]
    }

    fn excluded(&self, i: usize, user: &[f64]) -> bool {
        self.exclusions[i].iter().any(|&j| user[j] > self.thresholds[j])
    }

    /// Ranks all non-excluded ads for `user`; `k` is clamped to the candidate count.
    pub fn rank(&self, user: &FeatureVector, k: usize) -> Result<Vec<Ranked>> {
        if k == 0 {
            return Err(Error::Domain("k must be at least 1".into()));
        }
        let x = user.values();
        if x.len() != self.dimension {
            return Err(Error::Schema(format!(
                "user has {} features, snapshot expects {}",
                x.len(),
                self.dimension
            )));
        }
        let mut candidates: Vec<(&AdId, f64)> = Vec::with_capacity(self.len());
        for (i, id) in self.ad_ids.iter().enumerate() {
            if !self.excluded(i, x) {
                candidates.push((id, dot(self.weights_of(i), x)));
            }
        }
        Ok(top_k(&mut candidates, k))
    }
}

/// Snapshot contents handed to [`WeightCache::load_snapshot`].
#[derive(Debug, Clone, Default)]
pub struct SnapshotInput {
    pub models: Vec<WeightVector>,
    pub exclusions: Vec<Exclusion>,
    /// Required when `exclusions` is non-empty; one threshold per schema entry.
    pub thresholds: Option<Vec<f64>>,
}

/// Copy-on-write cache: loads build a complete new snapshot and publish it
/// with one atomic pointer swap, so readers never block or see a mix.
pub struct WeightCache {
    schema: FeatureSchema,
    current: ArcSwapOption<Snapshot>,
    generations: AtomicU64,
}

impl WeightCache {
    pub fn new(schema: FeatureSchema) -> Self {
        Self {
            schema,
            current: ArcSwapOption::empty(),
            generations: AtomicU64::new(0),
        }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.current.load_full()
    }

    pub fn generation(&self) -> Option<u64> {
        self.current.load().as_ref().map(|s| s.generation)
    }

    /// Validates and publishes a new generation. On error the previous
    /// generation keeps serving.
    pub fn load_snapshot(&self, input: SnapshotInput) -> Result<u64> {
        let mut snap = self.build(input)?;
        // only the writer increments; a failed build never consumes an id
        snap.generation = self.generations.fetch_add(1, Ordering::SeqCst) + 1;
        let generation = snap.generation;
        self.current.store(Some(Arc::new(snap)));
        log::info!("serving generation {generation}");
        Ok(generation)
    }

    fn build(&self, input: SnapshotInput) -> Result<Snapshot> {
        if input.models.is_empty() {
            return Err(Error::SnapshotRejected("snapshot has no models".into()));
        }
        let dim = self.schema.dimension();
        let mut seen = HashSet::new();
        let mut ad_ids = Vec::with_capacity(input.models.len());
        let mut weights = Vec::with_capacity(input.models.len() * dim);
        for w in &input.models {
            if w.dimension() != dim {
                return Err(Error::SnapshotRejected(format!(
                    "ad {} has {} weights, schema has {dim}",
                    w.ad_id,
                    w.dimension()
                )));
            }
            if !seen.insert(w.ad_id.clone()) {
                return Err(Error::SnapshotRejected(format!("ad {} appears twice", w.ad_id)));
            }
            ad_ids.push(w.ad_id.clone());
            weights.extend_from_slice(w.values());
        }
        let index: BTreeMap<&AdId, usize> = ad_ids.iter().enumerate().map(|(i, id)| (id, i)).collect();
        let mut exclusions = vec![Vec::new(); ad_ids.len()];
        for e in &input.exclusions {
            let j = self
                .schema
                .index_of(&e.feature)
                .ok_or_else(|| Error::SnapshotRejected(format!("exclusion on unknown feature `{}`", e.feature)))?;
            match index.get(&e.ad_id) {
                Some(&i) if !exclusions[i].contains(&j) => exclusions[i].push(j),
                Some(_) => {}
                None => log::warn!("exclusion for ad {} which is not in the snapshot", e.ad_id),
            }
        }
        let thresholds = match input.thresholds {
            Some(t) if t.len() == dim => t,
            Some(t) => {
                return Err(Error::SnapshotRejected(format!("{} thresholds for {dim} features", t.len())));
            }
            None if input.exclusions.is_empty() => Vec::new(),
            None => return Err(Error::SnapshotRejected("exclusions need feature thresholds".into())),
        };
        Ok(Snapshot {
            generation: 0,
            dimension: dim,
            ad_ids,
            weights,
            exclusions,
            thresholds,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResponse {
    pub ads: Vec<Ranked>,
    pub generation: u64,
    pub duration_ms: f64,
}

impl RankResponse {
    /// The deterministic part of a response (everything but the timing).
    pub fn canonical_json(&self) -> String {
        serde_json::json!({"ads": self.ads, "generation": self.generation}).to_string()
    }
}

/// Scores one request against the current snapshot and records its latency.
pub fn rank_request(
    cache: &WeightCache,
    features: &FeatureVector,
    k: usize,
    latency: Option<&LatencyRecorder>,
) -> Result<RankResponse> {
    let start = Instant::now();
    let snap = cache.current.load();
    let snap = snap.as_ref().ok_or(Error::NotReady)?;
    let ads = snap.rank(features, k)?;
    let elapsed = start.elapsed();
    if let Some(rec) = latency {
        rec.record(elapsed);
    }
    Ok(RankResponse {
        ads,
        generation: snap.generation,
        duration_ms: elapsed.as_secs_f64() * 1e3,
    })
}

/// Lock-free ring of the most recent request durations (nanoseconds).
pub struct LatencyRecorder {
    slots: Box<[AtomicU64]>,
    next: AtomicU64,
}

impl Default for LatencyRecorder {
    fn default() -> Self {
        Self::new(LATENCY_WINDOW)
    }
}

impl LatencyRecorder {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "latency window must be positive");
        Self {
            slots: (0..capacity).map(|_| AtomicU64::new(0)).collect(),
            next: AtomicU64::new(0),
        }
    }

    pub fn record(&self, d: Duration) {
        let i = self.next.fetch_add(1, Ordering::Relaxed) as usize % self.slots.len();
        self.slots[i].store(d.as_nanos().min(u64::MAX as u128) as u64, Ordering::Relaxed);
    }

    pub fn count(&self) -> u64 {
        self.next.load(Ordering::Relaxed)
    }

    /// Durations currently retained, in milliseconds.
    pub fn durations_ms(&self) -> Vec<f64> {
        let n = (self.count() as usize).min(self.slots.len());
        self.slots[..n]
            .iter()
            .map(|s| s.load(Ordering::Relaxed) as f64 / 1e6)
            .collect()
    }

    pub fn report(&self) -> LatencyStats {
        latency_report(&self.durations_ms())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

/// Nearest-rank quantile of sorted data: the `ceil(q n)`-th smallest value.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn latency_report(durations_ms: &[f64]) -> LatencyStats {
    if durations_ms.is_empty() {
        return LatencyStats::default();
    }
    let mut sorted = durations_ms.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    LatencyStats {
        count: sorted.len(),
        mean_ms: sorted.iter().sum::<f64>() / sorted.len() as f64,
        p50_ms: nearest_rank(&sorted, 0.50),
        p95_ms: nearest_rank(&sorted, 0.95),
        p99_ms: nearest_rank(&sorted, 0.99),
    }
}

/// Per-feature `percentile` (0..=100, nearest rank) over the calibration sample.
pub fn feature_thresholds(sample: &CalibrationSample, percentile: f64) -> Result<Vec<f64>> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::Config(format!("percentile must be in (0, 100], got {percentile}")));
    }
    if sample.is_empty() {
        return Err(Error::Domain("calibration sample is empty".into()));
    }
    let mut column = vec![0.0; sample.len()];
    Ok((0..sample.dimension())
        .map(|j| {
            for (c, f) in column.iter_mut().zip(&sample.features) {
                *c = f.values()[j];
            }
            column.sort_unstable_by(f64::total_cmp);
            nearest_rank(&column, percentile / 100.0)
        })
        .collect())
}

/// Reads serving weights from either `calibrated_models.jsonl` records or
/// plain `weights.jsonl` records (recognized per line).
pub fn read_serving_models(path: impl AsRef<Path>) -> Result<Vec<WeightVector>> {
    read_jsonl::<Value>(&path)?
        .into_iter()
        .map(|v| {
            if v.get("delta").is_some() {
                let m: CalibratedModel = serde_json::from_value(v)?;
                m.weights()
            } else {
                Ok(serde_json::from_value(v)?)
            }
        })
        .collect()
}
