//! Ad embeddings and exact nearest-neighbour retrieval of warm campaigns.
//!
//! Retrieval is a full scan over the store: the k records with the smallest
//! Euclidean distance to the query, ties broken by ascending ad id. Picking
//! the k individually nearest records also minimises the summed distance over
//! any k-subset, so the result is the retrieval set used for few-shot prompts.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{l2_norm, AdId, AdRecord};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub ad_id: AdId,
    pub provider_tag: String,
    pub vector: Vec<f64>,
}

/// Content handed to an [`EmbeddingProvider`].
#[derive(Debug, Clone, Copy)]
pub struct Content<'a> {
    pub title: &'a str,
    pub caption: &'a str,
    pub image_ref: Option<&'a str>,
}

impl<'a> From<&'a AdRecord> for Content<'a> {
    fn from(ad: &'a AdRecord) -> Self {
        Content {
            title: &ad.title,
            caption: &ad.image_caption,
            image_ref: ad.image_ref.as_deref(),
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn tag(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_content(&self, content: Content<'_>) -> Result<Vec<f64>>;
}

/// Embeds an ad's (title, caption, image) through `provider`.
pub fn embed(ad: &AdRecord, provider: &dyn EmbeddingProvider) -> Result<EmbeddingRecord> {
    embed_as(ad.ad_id.clone(), Content::from(ad), provider)
}

pub fn embed_as(
    ad_id: AdId,
    content: Content<'_>,
    provider: &dyn EmbeddingProvider,
) -> Result<EmbeddingRecord> {
    let vector = provider.embed_content(content)?;
    if vector.len() != provider.dimension() {
        return Err(Error::Schema(format!(
            "provider `{}` returned {} dimensions, expected {}",
            provider.tag(),
            vector.len(),
            provider.dimension()
        )));
    }
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Schema(format!("embedding for {ad_id} is not finite")));
    }
    Ok(EmbeddingRecord {
        ad_id,
        provider_tag: provider.tag().to_owned(),
        vector,
    })
}

/// Deterministic feature-hashing embedder over (title, caption) tokens.
///
/// Unigrams and bigrams are hashed with a seed into signed buckets and the
/// result is scaled to unit length, so texts sharing words land close
/// together without any model weights.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    seed: u64,
    dimension: usize,
    tag: String,
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self {
            seed,
            dimension,
            tag: format!("hash-d{dimension}-s{seed}"),
        }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text);
        let mut v = vec![0.0; self.dimension];
        let mut bump = |feature: &str, weight: f64| {
            let h = seed::derive(self.seed, &[feature]);
            let idx = (h % self.dimension as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign * weight;
        };
        for t in &tokens {
            bump(&format!("u:{t}"), 1.0);
        }
        for pair in tokens.windows(2) {
            bump(&format!("b:{} {}", pair[0], pair[1]), 0.5);
        }
        let norm = l2_norm(&v);
        if norm <= f64::EPSILON {
            // no usable tokens: fall back to hashing the raw text
            v.iter_mut().for_each(|x| *x = 0.0);
            let h = seed::derive(self.seed, &["raw", text]);
            v[(h % self.dimension as u64) as usize] = 1.0;
            return v;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl EmbeddingProvider for HashEmbedder {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_content(&self, content: Content<'_>) -> Result<Vec<f64>> {
        Ok(self.embed_text(&format!("{} {}", content.title, content.caption)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    /// Base URL; requests go to `{endpoint}/embed`.
    pub endpoint: String,
    pub dimension: usize,
    pub timeout_secs: u64,
    pub retries: u32,
    /// Directory that `image_ref` handles are resolved against.
    pub image_root: Option<PathBuf>,
}

/// Remote embedding service speaking `POST /embed {title, caption, image_b64?} -> {vector}`.
pub struct HttpEmbedder {
    cfg: HttpEmbedderConfig,
    agent: ureq::Agent,
    tag: String,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    title: &'a str,
    caption: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_b64: Option<String>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(cfg: HttpEmbedderConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .build()
            .into();
        let tag = format!("http:{}", cfg.endpoint);
        Self { cfg, agent, tag }
    }

    fn load_image(&self, image_ref: Option<&str>) -> Result<Option<String>> {
        let (Some(root), Some(handle)) = (&self.cfg.image_root, image_ref) else {
            return Ok(None);
        };
        let path = root.join(handle);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(base64::engine::general_purpose::STANDARD.encode(bytes)))
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn embed_content(&self, content: Content<'_>) -> Result<Vec<f64>> {
        let body = EmbedRequest {
            title: content.title,
            caption: content.caption,
            image_b64: self.load_image(content.image_ref)?,
        };
        let url = format!("{}/embed", self.cfg.endpoint.trim_end_matches('/'));
        let mut last = String::new();
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
            }
            let resp = self.agent.post(&url).send_json(&body);
            match resp {
                Ok(mut r) => {
                    let parsed: EmbedResponse = r
                        .body_mut()
                        .read_json()
                        .map_err(|e| Error::Parse(format!("embedding response: {e}")))?;
                    return Ok(parsed.vector);
                }
                Err(e) => {
                    log::warn!("embedding request attempt {} failed: {e}", attempt + 1);
                    last = e.to_string();
                }
            }
        }
        Err(Error::Transport(format!(
            "embedding endpoint {url} failed after {} attempts: {last}",
            self.cfg.retries + 1
        )))
    }
}

/// Embeddings of past campaigns, all from one provider.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dimension: usize,
    provider_tag: Option<String>,
    ids: Vec<AdId>,
    data: Vec<f64>,
    index: HashMap<AdId, usize>,
}

impl EmbeddingStore {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            provider_tag: None,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_records(dimension: usize, records: impl IntoIterator<Item = EmbeddingRecord>) -> Result<Self> {
        let mut store = Self::new(dimension);
        for r in records {
            store.insert(r)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<()> {
        if record.vector.len() != self.dimension {
            return Err(Error::Schema(format!(
                "embedding for {} has {} dimensions, store has {}",
                record.ad_id,
                record.vector.len(),
                self.dimension
            )));
        }
        if record.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("embedding for {} is not finite", record.ad_id)));
        }
        match &self.provider_tag {
            Some(tag) if *tag != record.provider_tag => {
                return Err(Error::Schema(format!(
                    "embedding for {} comes from `{}`, store holds `{tag}`",
                    record.ad_id, record.provider_tag
                )))
            }
            Some(_) => {}
            None => self.provider_tag = Some(record.provider_tag.clone()),
        }
        if self.index.contains_key(&record.ad_id) {
            return Err(Error::Schema(format!("duplicate embedding for {}", record.ad_id)));
        }
        self.index.insert(record.ad_id.clone(), self.ids.len());
        self.ids.push(record.ad_id);
        self.data.extend_from_slice(&record.vector);
        Ok(())
    }

    pub fn remove(&mut self, ad_id: &AdId) -> Option<EmbeddingRecord> {
        let slot = self.index.remove(ad_id)?;
        let d = self.dimension;
        let last = self.ids.len() - 1;
        let vector = self.data[slot * d..(slot + 1) * d].to_vec();
        if slot != last {
            self.data.copy_within(last * d..(last + 1) * d, slot * d);
            self.ids.swap(slot, last);
            self.index.insert(self.ids[slot].clone(), slot);
        }
        self.ids.pop();
        self.data.truncate(last * d);
        Some(EmbeddingRecord {
            ad_id: ad_id.clone(),
            provider_tag: self.provider_tag.clone().unwrap_or_default(),
            vector,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, ad_id: &AdId) -> Option<&[f64]> {
        let d = self.dimension;
        self.index.get(ad_id).map(|&i| &self.data[i * d..(i + 1) * d])
    }

    /// Records sorted by ad id.
    pub fn records(&self) -> Vec<EmbeddingRecord> {
        let mut ids: Vec<&AdId> = self.ids.iter().collect();
        ids.sort();
        ids.into_iter()
            .map(|id| EmbeddingRecord {
                ad_id: id.clone(),
                provider_tag: self.provider_tag.clone().unwrap_or_default(),
                vector: self.get(id).expect("indexed id").to_vec(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub ad_id: AdId,
    pub distance: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub k: usize,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn ad_ids(&self) -> impl Iterator<Item = &AdId> {
        self.neighbors.iter().map(|n| &n.ad_id)
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// The first `k` neighbours.
    pub fn truncated(&self, k: usize) -> NeighborSet {
        NeighborSet {
            k,
            neighbors: self.neighbors.iter().take(k).cloned().collect(),
        }
    }
}

/// Similarity shown to the language model: `1 / (1 + distance)`.
pub fn similarity_from_distance(distance: f64) -> Result<f64> {
    if !(distance >= 0.0) || !distance.is_finite() {
        return Err(Error::Domain(format!("distance must be finite and >= 0, got {distance}")));
    }
    Ok(1.0 / (1.0 + distance))
}

/// Exact k nearest neighbours of `query` by Euclidean distance.
pub fn knn(store: &EmbeddingStore, query: &[f64], k: usize) -> Result<NeighborSet> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    if query.len() != store.dimension {
        return Err(Error::Schema(format!(
            "query has {} dimensions, store has {}",
            query.len(),
            store.dimension
        )));
    }
    let d = store.dimension;
    let mut scored: Vec<(f64, &AdId)> = store
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let row = &store.data[i * d..(i + 1) * d];
            let sq: f64 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (sq, id)
        })
        .collect();
    let cmp = |a: &(f64, &AdId), b: &(f64, &AdId)| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1));
    let k_eff = k.min(scored.len());
    if k_eff < scored.len() {
        scored.select_nth_unstable_by(k_eff - 1, cmp);
        scored.truncate(k_eff);
    }
    scored.sort_unstable_by(cmp);
    let neighbors = scored
        .into_iter()
        .map(|(sq, id)| {
            let distance = sq.sqrt();
            Ok(Neighbor {
                ad_id: id.clone(),
                distance,
                similarity: similarity_from_distance(distance)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(NeighborSet { k, neighbors })
}
