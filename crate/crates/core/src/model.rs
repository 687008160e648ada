//! Domain types and the linear-sigmoid scoring primitive.
//!
//! A user is a feature vector `xi` whose slot 0 is pinned to `1.0`, so that
//! slot 0 of every weight vector acts as the intercept. The click-through
//! rate of a (user, ad) pair is `sigmoid(theta . xi)`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::tolerance::Tolerances;

pub const BIAS_FEATURE: &str = "bias";

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(AdId);
string_id!(UserId);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub description: String,
}

impl FeatureDef {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
        }
    }
}

/// Ordered feature definitions. Entry 0 is always the bias slot.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct FeatureSchema {
    entries: Vec<FeatureDef>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    entries: Vec<FeatureDef>,
}

impl TryFrom<SchemaRepr> for FeatureSchema {
    type Error = Error;

    fn try_from(repr: SchemaRepr) -> Result<Self> {
        let mut entries = repr.entries.into_iter();
        match entries.next() {
            Some(first) if first.name == BIAS_FEATURE => {}
            _ => {
                return Err(Error::Schema(format!(
                    "schema entry 0 must be the `{BIAS_FEATURE}` slot"
                )))
            }
        }
        FeatureSchema::new(entries.collect())
    }
}

impl From<FeatureSchema> for SchemaRepr {
    fn from(schema: FeatureSchema) -> Self {
        SchemaRepr {
            entries: schema.entries,
        }
    }
}

impl PartialEq for FeatureSchema {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl FeatureSchema {
    /// Builds a schema from the non-bias features; the bias slot is prepended.
    pub fn new(features: Vec<FeatureDef>) -> Result<Self> {
        let mut entries = Vec::with_capacity(features.len() + 1);
        entries.push(FeatureDef::new(BIAS_FEATURE, "constant intercept term"));
        entries.extend(features);

        let mut index = HashMap::with_capacity(entries.len());
        for (i, entry) in entries.iter().enumerate() {
            if entry.name.trim().is_empty() {
                return Err(Error::Schema(format!("feature {i} has an empty name")));
            }
            if i > 0 && entry.description.trim().is_empty() {
                return Err(Error::Schema(format!(
                    "feature `{}` has no description",
                    entry.name
                )));
            }
            if index.insert(entry.name.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate feature `{}`", entry.name)));
            }
        }
        Ok(Self { entries, index })
    }

    /// Number of slots including the bias.
    pub fn dimension(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[FeatureDef] {
        &self.entries
    }

    /// The non-bias features in schema order.
    pub fn features(&self) -> &[FeatureDef] {
        &self.entries[1..]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&FeatureDef> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    pub fn check_dimension(&self, len: usize, what: &str) -> Result<()> {
        if len != self.dimension() {
            return Err(Error::Schema(format!(
                "{what} has {len} entries, schema dimension is {}",
                self.dimension()
            )));
        }
        Ok(())
    }
}

/// A user's personalized feature vector. `values[0]` is the bias slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureVectorRepr")]
pub struct FeatureVector {
    pub user_id: UserId,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct FeatureVectorRepr {
    user_id: UserId,
    values: Vec<f64>,
}

impl TryFrom<FeatureVectorRepr> for FeatureVector {
    type Error = Error;

    fn try_from(repr: FeatureVectorRepr) -> Result<Self> {
        FeatureVector::new(repr.user_id, repr.values)
    }
}

impl FeatureVector {
    pub fn new(user_id: impl Into<UserId>, values: Vec<f64>) -> Result<Self> {
        let user_id = user_id.into();
        match values.first() {
            Some(&b) if b == 1.0 => {}
            _ => {
                return Err(Error::Schema(format!(
                    "user {user_id}: bias slot must be 1.0"
                )))
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Schema(format!(
                "user {user_id}: feature {i} is not finite"
            )));
        }
        Ok(Self { user_id, values })
    }

    /// Prepends the bias slot to the non-bias feature values.
    pub fn from_features(user_id: impl Into<UserId>, features: &[f64]) -> Result<Self> {
        let mut values = Vec::with_capacity(features.len() + 1);
        values.push(1.0);
        values.extend_from_slice(features);
        Self::new(user_id, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Normalized,
    Calibrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Trained,
    LlmGenerated,
    MedianCold,
}

/// Per-ad parameter vector aligned to a [`FeatureSchema`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WeightVectorRepr")]
pub struct WeightVector {
    pub ad_id: AdId,
    pub stage: Stage,
    pub source: Source,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct WeightVectorRepr {
    ad_id: AdId,
    stage: Stage,
    source: Source,
    values: Vec<f64>,
}

impl TryFrom<WeightVectorRepr> for WeightVector {
    type Error = Error;

    fn try_from(r: WeightVectorRepr) -> Result<Self> {
        WeightVector::new(r.ad_id, r.stage, r.source, r.values)
    }
}

impl WeightVector {
    pub fn new(ad_id: impl Into<AdId>, stage: Stage, source: Source, values: Vec<f64>) -> Result<Self> {
        let ad_id = ad_id.into();
        if values.is_empty() {
            return Err(Error::Schema(format!("ad {ad_id}: empty weight vector")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("ad {ad_id}: weight {i} is not finite")));
        }
        if stage == Stage::Normalized {
            let norm = l2_norm(&values);
            if (norm - 1.0).abs() > Tolerances::DEFAULT.unit_norm {
                return Err(Error::Schema(format!(
                    "ad {ad_id}: normalized weights have norm {norm}"
                )));
            }
        }
        Ok(Self {
            ad_id,
            stage,
            source,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn with_ad_id(mut self, ad_id: impl Into<AdId>) -> Self {
        self.ad_id = ad_id.into();
        self
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Retired,
    Active,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdRecord {
    pub ad_id: AdId,
    pub title: String,
    pub image_caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub lifecycle: Lifecycle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingRecord>,
}

impl AdRecord {
    pub fn new(
        ad_id: impl Into<AdId>,
        title: impl Into<String>,
        image_caption: impl Into<String>,
        lifecycle: Lifecycle,
    ) -> Result<Self> {
        let ad = Self {
            ad_id: ad_id.into(),
            title: title.into(),
            image_caption: image_caption.into(),
            image_ref: None,
            lifecycle,
            embedding: None,
        };
        ad.validate()?;
        Ok(ad)
    }

    pub fn validate(&self) -> Result<()> {
        if self.title.trim().is_empty() {
            return Err(Error::Schema(format!("ad {}: empty title", self.ad_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: UserId,
    pub ad_id: AdId,
    #[serde(deserialize_with = "binary_label")]
    pub label: u8,
}

fn binary_label<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<u8, D::Error> {
    let v = u8::deserialize(d)?;
    if v > 1 {
        return Err(serde::de::Error::custom(format!("label must be 0 or 1, got {v}")));
    }
    Ok(v)
}

pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic function. Rejects non-finite input.
pub fn sigmoid(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("sigmoid of non-finite value {x}")));
    }
    Ok(sigmoid_unchecked(x))
}

/// Logistic function evaluated without overflow on either tail.
#[inline]
pub(crate) fn sigmoid_unchecked(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(weights: &WeightVector, features: &FeatureVector) -> Result<f64> {
    if weights.dimension() != features.dimension() {
        return Err(Error::Schema(format!(
            "ad {} has {} weights but user {} has {} features",
            weights.ad_id,
            weights.dimension(),
            features.user_id,
            features.dimension()
        )));
    }
    Ok(dot(weights.values(), features.values()))
}

/// Predicted click-through rate `sigmoid(theta . xi)`.
pub fn score(weights: &WeightVector, features: &FeatureVector) -> Result<f64> {
    sigmoid(logit(weights, features)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub ad_id: AdId,
    pub score: f64,
}

/// Descending by logit, ties by ascending ad id.
///
/// Ordering uses the logit rather than the probability so that ads whose
/// probabilities round to the same double still order by their logits.
pub(crate) fn cmp_candidates(a: (&AdId, f64), b: (&AdId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Selects the `k` best `(ad, logit)` candidates and converts them to scores.
pub fn top_k<'a>(candidates: &mut Vec<(&'a AdId, f64)>, k: usize) -> Vec<Ranked> {
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |a, b| cmp_candidates(*a, *b));
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(|a, b| cmp_candidates(*a, *b));
    candidates
        .iter()
        .map(|(id, l)| Ranked {
            ad_id: (*id).clone(),
            score: sigmoid_unchecked(*l),
        })
        .collect()
}

/// Ranks every ad for one user and keeps the top `k`.
pub fn rank(
    weights_by_ad: &BTreeMap<AdId, WeightVector>,
    features: &FeatureVector,
    k: usize,
) -> Result<Vec<Ranked>> {
    if weights_by_ad.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if k == 0 || k > weights_by_ad.len() {
        return Err(Error::Domain(format!(
            "k must be in 1..={}, got {k}",
            weights_by_ad.len()
        )));
    }
    let mut candidates = weights_by_ad
        .iter()
        .map(|(id, w)| Ok((id, logit(w, features)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(top_k(&mut candidates, k))
}
