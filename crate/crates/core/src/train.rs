//! Per-ad logistic regression on warm interactions, plus the non-LLM cold
//! baselines (coordinate-wise median weights and embedding cosine).

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::model::{dot, l2_norm, sigmoid_unchecked, AdId, FeatureVector, InteractionRecord, Source, Stage, UserId, WeightVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Penalty `l2/2 * |theta_1..n|^2`; the intercept is not penalized.
    pub l2_penalty: f64,
    pub convergence_tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 500,
            l2_penalty: 1e-4,
            convergence_tol: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.l2_penalty >= 0.0) {
            return Err(Error::Config(format!("l2_penalty must be >= 0, got {}", self.l2_penalty)));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Config(format!("convergence_tol must be > 0, got {}", self.convergence_tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: f64,
    pub epochs_run: usize,
    pub gradient_norm: f64,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub weights: WeightVector,
    pub report: TrainReport,
}

/// Design matrix rows and labels for one ad.
pub struct Dataset<'a> {
    rows: Vec<&'a [f64]>,
    labels: Vec<f64>,
}

impl<'a> Dataset<'a> {
    pub fn new(rows: Vec<&'a [f64]>, labels: Vec<f64>) -> Self {
        assert_eq!(rows.len(), labels.len());
        Self { rows, labels }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn dimension(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }
}

/// Mean log-loss plus the L2 term.
pub fn loss(theta: &[f64], data: &Dataset<'_>, l2: f64) -> f64 {
    let n = data.len() as f64;
    let ll: f64 = data
        .rows
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| {
            let z = dot(theta, x);
            // log(1 + e^z) - y z, stable on both tails
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            softplus - y * z
        })
        .sum();
    ll / n + 0.5 * l2 * theta[1..].iter().map(|t| t * t).sum::<f64>()
}

/// Gradient of [`loss`]: `(1/N) sum (sigmoid(theta.x) - y) x + l2 * theta` (bias unpenalized).
pub fn gradient(theta: &[f64], data: &Dataset<'_>, l2: f64) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    for (x, &y) in data.rows.iter().zip(&data.labels) {
        let r = sigmoid_unchecked(dot(theta, x)) - y;
        for (gi, xi) in g.iter_mut().zip(x.iter()) {
            *gi += r * xi;
        }
    }
    let n = data.len() as f64;
    for (j, gi) in g.iter_mut().enumerate() {
        *gi /= n;
        if j > 0 {
            *gi += l2 * theta[j];
        }
    }
    g
}

/// Full-batch gradient descent from zero.
pub fn fit(ad_id: &AdId, data: &Dataset<'_>, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Domain(format!("ad {ad_id}: no interactions to train on")));
    }
    let positives = data.labels.iter().filter(|&&y| y > 0.5).count();
    if positives == 0 || positives == data.len() {
        return Err(Error::DegenerateLabels {
            ad_id: ad_id.clone(),
            label: u8::from(positives > 0),
        });
    }

    let mut theta = vec![0.0; data.dimension()];
    let mut prev = loss(&theta, data, cfg.l2_penalty);
    let mut grad_norm = f64::INFINITY;
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        let g = gradient(&theta, data, cfg.l2_penalty);
        grad_norm = l2_norm(&g);
        if grad_norm < cfg.convergence_tol {
            break;
        }
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= cfg.learning_rate * gi;
        }
        epochs_run = epoch + 1;
        let cur = loss(&theta, data, cfg.l2_penalty);
        if !cur.is_finite() || cur > prev + 1e-10 * prev.abs().max(1.0) {
            return Err(Error::Divergence {
                ad_id: ad_id.clone(),
                epoch: epochs_run,
                loss: cur,
            });
        }
        prev = cur;
    }
    Ok(TrainedModel {
        weights: WeightVector::new(ad_id.clone(), Stage::Raw, Source::Trained, theta)?,
        report: TrainReport {
            final_loss: prev,
            epochs_run,
            gradient_norm: grad_norm,
            examples: data.len(),
        },
    })
}

/// Trains one ad's weights from its interaction log.
///
/// Interactions for other ads are ignored.
pub fn train_logistic(
    ad_id: &AdId,
    interactions: &[InteractionRecord],
    users: &HashMap<UserId, FeatureVector>,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for it in interactions.iter().filter(|it| it.ad_id == *ad_id) {
        let user = users.get(&it.user_id).ok_or_else(|| {
            Error::Schema(format!("interaction for ad {ad_id} references unknown user {}", it.user_id))
        })?;
        if let Some(first) = rows.first() {
            let first: &&[f64] = first;
            if first.len() != user.dimension() {
                return Err(Error::Schema(format!("user {} has mismatched dimension", it.user_id)));
            }
        }
        rows.push(user.values());
        labels.push(f64::from(it.label));
    }
    fit(ad_id, &Dataset::new(rows, labels), cfg)
}

/// Trained warm weights for retired ads.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WarmWeightStore {
    models: BTreeMap<AdId, WeightVector>,
    reports: BTreeMap<AdId, TrainReport>,
}

impl WarmWeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, model: TrainedModel) {
        let id = model.weights.ad_id.clone();
        self.reports.insert(id.clone(), model.report);
        self.models.insert(id, model.weights);
    }

    /// Adds weights without training metadata (e.g. loaded from weights.jsonl).
    pub fn insert_weights(&mut self, weights: WeightVector) {
        self.models.insert(weights.ad_id.clone(), weights);
    }

    pub fn get(&self, ad_id: &AdId) -> Option<&WeightVector> {
        self.models.get(ad_id)
    }

    pub fn models(&self) -> &BTreeMap<AdId, WeightVector> {
        &self.models
    }

    pub fn reports(&self) -> &BTreeMap<AdId, TrainReport> {
        &self.reports
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// Trains every listed ad in parallel. Results are independent of thread count.
pub fn train_many(
    ad_ids: &[AdId],
    interactions: &[InteractionRecord],
    users: &HashMap<UserId, FeatureVector>,
    cfg: &TrainConfig,
) -> Result<WarmWeightStore> {
    let mut by_ad: HashMap<&AdId, Vec<(&[f64], f64)>> = HashMap::new();
    for it in interactions {
        let user = users.get(&it.user_id).ok_or_else(|| {
            Error::Schema(format!("interaction for ad {} references unknown user {}", it.ad_id, it.user_id))
        })?;
        by_ad.entry(&it.ad_id).or_default().push((user.values(), f64::from(it.label)));
    }
    let trained = ad_ids
        .par_iter()
        .map(|id| {
            let (rows, labels) = by_ad.get(id).map(|v| v.iter().copied().unzip()).unwrap_or_default();
            fit(id, &Dataset::new(rows, labels), cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut store = WarmWeightStore::new();
    for m in trained {
        store.insert(m);
    }
    Ok(store)
}

/// Identifier carried by the median baseline before it is assigned to an ad.
pub const MEDIAN_COLD_ID: &str = "median_cold";

/// Coordinate-wise median of all warm weights (mean of the middle pair for even counts).
pub fn median_cold_weights(store: &WarmWeightStore) -> Result<WeightVector> {
    let mut iter = store.models.values();
    let first = iter.next().ok_or(Error::EmptyStore)?;
    let dim = first.dimension();
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(store.len()); dim];
    for w in store.models.values() {
        if w.dimension() != dim {
            return Err(Error::Schema(format!("ad {} has mismatched dimension", w.ad_id)));
        }
        for (col, v) in columns.iter_mut().zip(w.values()) {
            col.push(*v);
        }
    }
    let values = columns
        .into_iter()
        .map(|mut col| {
            col.sort_unstable_by(f64::total_cmp);
            let n = col.len();
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })
        .collect();
    WeightVector::new(MEDIAN_COLD_ID, Stage::Raw, Source::MedianCold, values)
}

/// Cosine similarity between a user embedding and an ad embedding.
pub fn cosine_baseline_score(user: &EmbeddingRecord, ad: &EmbeddingRecord) -> Result<f64> {
    cosine(&user.vector, &ad.vector)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Schema(format!("embedding dimensions differ: {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding("zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
