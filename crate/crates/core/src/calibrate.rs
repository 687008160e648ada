//! Weight normalization and the intercept shift that matches the mean served
//! probability to the neighbours' reference CTR.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::NeighborSet;
use crate::error::{Error, Result};
use crate::model::{dot, l2_norm, sigmoid_unchecked, AdId, FeatureVector, Source, Stage, WeightVector};
use crate::tolerance::Tolerances;
use crate::train::WarmWeightStore;

pub const DEFAULT_SAMPLE_SIZE: usize = 1000;

/// Bisection stops once the bracket is this narrow; the residual is then far
/// below the calibration tolerance because the objective's slope is at most 1/4.
const BRACKET_WIDTH: f64 = 1e-12;
const MAX_BISECTIONS: usize = 200;

/// Users whose features define the reference probability distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub features: Vec<FeatureVector>,
    pub seed: u64,
}

impl CalibrationSample {
    pub fn new(features: Vec<FeatureVector>, seed: u64) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::Domain("calibration sample is empty".into()))?;
        let dim = first.dimension();
        if let Some(bad) = features.iter().find(|f| f.dimension() != dim) {
            return Err(Error::Schema(format!(
                "calibration user {} has {} features, expected {dim}",
                bad.user_id,
                bad.dimension()
            )));
        }
        Ok(Self { features, seed })
    }

    /// Draws `size` distinct users without replacement, keeping population order.
    /// Takes everyone when the population is smaller than `size`.
    pub fn draw(population: &[FeatureVector], size: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("calibration sample size must be positive".into()));
        }
        let features = if population.len() <= size {
            population.to_vec()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = index::sample(&mut rng, population.len(), size).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| population[i].clone()).collect()
        };
        Self::new(features, seed)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.features.first().map_or(0, FeatureVector::dimension)
    }

    /// Logits `theta . xi` for every sampled user.
    pub fn logits(&self, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.dimension() {
            return Err(Error::Schema(format!(
                "weights have {} entries, calibration sample has {}",
                weights.len(),
                self.dimension()
            )));
        }
        Ok(self.features.iter().map(|f| dot(weights, f.values())).collect())
    }
}

/// Scales `raw` to unit L2 norm (intercept included).
pub fn normalize(raw: &WeightVector) -> Result<WeightVector> {
    let norm = l2_norm(raw.values());
    if !(norm > Tolerances::DEFAULT.min_norm) {
        return Err(Error::DegenerateWeights(raw.ad_id.clone()));
    }
    let values = raw.values().iter().map(|v| v / norm).collect();
    WeightVector::new(raw.ad_id.clone(), Stage::Normalized, raw.source, values)
}

/// Mean predicted probability of the neighbours' trained weights over the sample.
pub fn compute_alpha(neighbors: &NeighborSet, warm: &WarmWeightStore, sample: &CalibrationSample) -> Result<f64> {
    if neighbors.is_empty() {
        return Err(Error::CalibrationReference("no neighbours to take a reference CTR from".into()));
    }
    if sample.is_empty() {
        return Err(Error::CalibrationReference("calibration sample is empty".into()));
    }
    let mut total = 0.0;
    for id in neighbors.ad_ids() {
        let w = warm
            .get(id)
            .ok_or_else(|| Error::CalibrationReference(format!("neighbour {id} has no trained weights")))?;
        total += sample.logits(w.values())?.into_iter().map(sigmoid_unchecked).sum::<f64>();
    }
    Ok(total / (neighbors.len() * sample.len()) as f64)
}

/// Mean of `sigmoid(z + delta)` over precomputed logits.
pub fn mean_probability(logits: &[f64], delta: f64) -> f64 {
    logits.iter().map(|z| sigmoid_unchecked(z + delta)).sum::<f64>() / logits.len() as f64
}

/// Finds `delta` with `mean_u sigmoid(theta . xi_u + delta) = alpha` by bisection on
/// `[-30, 30]`. Returns `(delta, |residual|)`.
pub fn solve_intercept_shift(weights: &WeightVector, sample: &CalibrationSample, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if sample.is_empty() {
        return Err(Error::Domain("calibration sample is empty".into()));
    }
    let logits = sample.logits(weights.values())?;
    solve_shift_for_logits(&logits, alpha)
}

/// [`solve_intercept_shift`] on precomputed logits.
pub fn solve_shift_for_logits(logits: &[f64], alpha: f64) -> Result<(f64, f64)> {
    let bound = Tolerances::DEFAULT.shift_bound;
    let f = |d: f64| mean_probability(logits, d) - alpha;
    let (low, high) = (mean_probability(logits, -bound), mean_probability(logits, bound));
    if !(alpha >= low && alpha <= high) {
        return Err(Error::UnreachableTarget { alpha, low, high });
    }
    let (mut lo, mut hi) = (-bound, bound);
    for _ in 0..MAX_BISECTIONS {
        if hi - lo <= BRACKET_WIDTH {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let delta = 0.5 * (lo + hi);
    Ok((delta, f(delta).abs()))
}

/// Unit-norm weights with the intercept shifted by `delta`, plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedModel {
    pub ad_id: AdId,
    pub source: Source,
    /// Served weights: normalized values with `delta` added to entry 0.
    pub values: Vec<f64>,
    pub delta: f64,
    pub alpha: f64,
    pub neighbor_ads: Vec<AdId>,
    pub sample_size: usize,
    pub sample_seed: u64,
    pub residual: f64,
}

impl CalibratedModel {
    pub fn weights(&self) -> Result<WeightVector> {
        WeightVector::new(self.ad_id.clone(), Stage::Calibrated, self.source, self.values.clone())
    }

    /// The unit-norm vector before the shift.
    pub fn pre_shift(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        if let Some(b) = v.first_mut() {
            *b -= self.delta;
        }
        v
    }

    /// Checks the unit-norm and calibration post-conditions.
    pub fn validate(&self) -> Result<()> {
        let tol = Tolerances::DEFAULT;
        let norm = l2_norm(&self.pre_shift());
        if (norm - 1.0).abs() > tol.unit_norm {
            return Err(Error::Domain(format!("ad {}: pre-shift norm is {norm}", self.ad_id)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !self.delta.is_finite() {
            return Err(Error::Domain(format!("ad {}: alpha or delta out of range", self.ad_id)));
        }
        if self.residual > tol.calibration {
            return Err(Error::Domain(format!("ad {}: residual {} above tolerance", self.ad_id, self.residual)));
        }
        self.weights().map(|_| ())
    }
}

/// normalize, compute alpha, solve the shift. Raw weights that cannot be
/// normalized are replaced by `fallback` (the median-cold vector).
pub fn calibrate_ad(
    raw: &WeightVector,
    neighbors: &NeighborSet,
    warm: &WarmWeightStore,
    sample: &CalibrationSample,
    fallback: &WeightVector,
) -> Result<CalibratedModel> {
    let normalized = match normalize(raw) {
        Ok(n) => n,
        Err(Error::DegenerateWeights(_)) => {
            log::warn!("ad {}: weights are degenerate, falling back to median-cold weights", raw.ad_id);
            let fb = WeightVector::new(raw.ad_id.clone(), Stage::Raw, Source::MedianCold, fallback.values().to_vec())?;
            normalize(&fb)?
        }
        Err(e) => return Err(e),
    };
    let alpha = compute_alpha(neighbors, warm, sample)?;
    let (delta, residual) = solve_intercept_shift(&normalized, sample, alpha)?;
    let mut values = normalized.values().to_vec();
    values[0] += delta;
    Ok(CalibratedModel {
        ad_id: raw.ad_id.clone(),
        source: normalized.source,
        values,
        delta,
        alpha,
        neighbor_ads: neighbors.ad_ids().cloned().collect(),
        sample_size: sample.len(),
        sample_seed: sample.seed,
        residual,
    })
}

/// Calibrates many ads in parallel, preserving input order.
pub fn calibrate_many(
    jobs: &[(&WeightVector, &NeighborSet)],
    warm: &WarmWeightStore,
    sample: &CalibrationSample,
    fallback: &WeightVector,
) -> Result<Vec<CalibratedModel>> {
    jobs.par_iter()
        .map(|(raw, neighbors)| calibrate_ad(raw, neighbors, warm, sample, fallback))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Neighbor;

    fn wv(id: &str, source: Source, values: &[f64]) -> WeightVector {
        WeightVector::new(id, Stage::Raw, source, values.to_vec()).unwrap()
    }

    fn bias_only_sample(n: usize, dim: usize) -> CalibrationSample {
        let users = (0..n)
            .map(|i| {
                let mut v = vec![0.0; dim];
                v[0] = 1.0;
                FeatureVector::new(format!("u{i}"), v).unwrap()
            })
            .collect();
        CalibrationSample::new(users, 7).unwrap()
    }

    fn neighbors(ids: &[&str]) -> NeighborSet {
        NeighborSet {
            k: ids.len(),
            neighbors: ids
                .iter()
                .map(|id| Neighbor { ad_id: (*id).into(), distance: 0.0, similarity: 1.0 })
                .collect(),
        }
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&wv("a", Source::LlmGenerated, &[0.0, 3.0, 4.0])).unwrap();
        assert_eq!(n.values(), &[0.0, 0.6, 0.8]);
        assert_eq!(n.stage, Stage::Normalized);
        let again = normalize(&n).unwrap();
        for (a, b) in again.values().iter().zip(n.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            normalize(&wv("z", Source::LlmGenerated, &[0.0, 0.0])),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn alpha_examples() {
        let sample = bias_only_sample(10, 3);
        let mut warm = WarmWeightStore::new();
        warm.insert_weights(wv("zero", Source::Trained, &[0.0, 0.0, 0.0]));
        warm.insert_weights(wv("plus", Source::Trained, &[2.0, 0.0, 0.0]));
        warm.insert_weights(wv("minus", Source::Trained, &[-2.0, 0.0, 0.0]));
        assert_eq!(compute_alpha(&neighbors(&["zero"]), &warm, &sample).unwrap(), 0.5);
        let a = compute_alpha(&neighbors(&["plus", "minus"]), &warm, &sample).unwrap();
        assert!((a - 0.5).abs() < 1e-15);
        assert!(matches!(
            compute_alpha(&neighbors(&[]), &warm, &sample),
            Err(Error::CalibrationReference(_))
        ));
        assert!(compute_alpha(&neighbors(&["ghost"]), &warm, &sample).is_err());
    }

    #[test]
    fn shift_examples() {
        let sample = bias_only_sample(5, 3);
        let w = wv("a", Source::LlmGenerated, &[0.0, 0.6, 0.8]);
        let (d, r) = solve_intercept_shift(&w, &sample, 0.5).unwrap();
        assert!(d.abs() < 1e-10 && r < 1e-6);
        let (d, r) = solve_intercept_shift(&w, &sample, 0.7310585786).unwrap();
        assert!((d - 1.0).abs() < 1e-6 && r <= 1e-6);
    }

    #[test]
    fn unreachable_target_reports_interval() {
        let sample = bias_only_sample(3, 2);
        let w = wv("a", Source::LlmGenerated, &[0.0, 1.0]);
        match solve_intercept_shift(&w, &sample, 1.0 - 1e-16).unwrap_err() {
            Error::UnreachableTarget { low, high, .. } => assert!(low < 1e-12 && high < 1.0),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(solve_intercept_shift(&w, &sample, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn calibrate_composition_and_fallback() {
        let sample = bias_only_sample(4, 3);
        let mut warm = WarmWeightStore::new();
        warm.insert_weights(wv("n", Source::Trained, &[0.0, 1.0, 1.0]));
        let fallback = wv("median_cold", Source::MedianCold, &[0.0, 1.0, 0.0]);
        let m = calibrate_ad(&wv("a", Source::LlmGenerated, &[0.0, 3.0, 4.0]), &neighbors(&["n"]), &warm, &sample, &fallback)
            .unwrap();
        assert_eq!(m.alpha, 0.5);
        assert!(m.delta.abs() < 1e-10);
        assert_eq!(&m.values[1..], &[0.6, 0.8]);
        assert_eq!(m.source, Source::LlmGenerated);
        m.validate().unwrap();

        let fb = calibrate_ad(&wv("b", Source::LlmGenerated, &[0.0, 0.0, 0.0]), &neighbors(&["n"]), &warm, &sample, &fallback)
            .unwrap();
        assert_eq!(fb.source, Source::MedianCold);
        assert_eq!(fb.ad_id.as_str(), "b");
        assert_eq!(&fb.values[1..], &[1.0, 0.0]);
    }

    #[test]
    fn draw_is_seeded_and_without_replacement() {
        let pop: Vec<FeatureVector> = (0..50)
            .map(|i| FeatureVector::from_features(format!("u{i}"), &[i as f64]).unwrap())
            .collect();
        let a = CalibrationSample::draw(&pop, 10, 3).unwrap();
        assert_eq!(a, CalibrationSample::draw(&pop, 10, 3).unwrap());
        let mut ids: Vec<_> = a.features.iter().map(|f| f.user_id.clone()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert_eq!(CalibrationSample::draw(&pop, 100, 3).unwrap().len(), 50);
    }
}
