//! Seeded synthetic stand-in for a proprietary ad/click log.
//!
//! Features are interest categories with keyword vocabularies. Each ad has a
//! latent weight vector dominated by a primary category, and its title and
//! caption are written from that category's keywords, so content-based
//! retrieval finds ads with similar weights.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{EmbeddingProvider, EmbeddingRecord, HashEmbedder};
use crate::error::{Error, Result};
use crate::eval::metrics::GroundTruthLabel;
use crate::jsonl::{read_json, read_jsonl, write_json, write_jsonl};
use crate::model::{
    dot, sigmoid_unchecked, AdId, AdRecord, FeatureDef, FeatureSchema, FeatureVector, InteractionRecord, Lifecycle,
    UserId,
};
use crate::seed::derive;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_features: usize,
    pub n_retired: usize,
    pub n_active: usize,
    pub n_users: usize,
    pub test_fraction: f64,
    /// Probability that a training user saw a given ad.
    pub exposure: f64,
    /// Probability that a test user saw a given active ad.
    pub test_exposure: f64,
    pub embedding_dim: usize,
    pub intercept_mean: f64,
    pub intercept_sd: f64,
    /// Multiplies every non-bias latent weight; 0 gives content-blind ads.
    pub affinity_scale: f64,
    /// Standard deviation of per-impression logit noise.
    pub logit_noise_sd: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_features: 16,
            n_retired: 455,
            n_active: 120,
            n_users: 10_000,
            test_fraction: 0.2,
            exposure: 0.2,
            test_exposure: 1.0,
            embedding_dim: 64,
            intercept_mean: -1.5,
            intercept_sd: 0.3,
            affinity_scale: 1.0,
            logit_noise_sd: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_features", self.n_features),
            ("n_retired", self.n_retired),
            ("n_active", self.n_active),
            ("n_users", self.n_users),
            ("embedding_dim", self.embedding_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_features < 3 {
            return Err(Error::Config("n_features must be at least 3".into()));
        }
        let unit = [
            ("test_fraction", self.test_fraction),
            ("exposure", self.exposure),
            ("test_exposure", self.test_exposure),
        ];
        for (name, v) in unit {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        let test_users = (self.n_users as f64 * self.test_fraction).round() as usize;
        if test_users == 0 || test_users >= self.n_users {
            return Err(Error::Config("test_fraction leaves no train or no test users".into()));
        }
        for (name, v) in [("intercept_sd", self.intercept_sd), ("logit_noise_sd", self.logit_noise_sd)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !self.intercept_mean.is_finite() || !self.affinity_scale.is_finite() {
            return Err(Error::Config("intercept_mean and affinity_scale must be finite".into()));
        }
        Ok(())
    }
}

/// Latent parameters of one ad.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdTruth {
    pub ad_id: AdId,
    pub primary: String,
    pub secondary: String,
    pub negative: Option<String>,
    /// Full weight vector, intercept first.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub retired: Vec<AdId>,
    pub active: Vec<AdId>,
    pub train_users: Vec<UserId>,
    pub test_users: Vec<UserId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub schema: FeatureSchema,
    pub ads: Vec<AdRecord>,
    pub users: Vec<FeatureVector>,
    pub interactions: Vec<InteractionRecord>,
    pub truth: Vec<AdTruth>,
    pub labels: Vec<GroundTruthLabel>,
    pub split: Split,
    pub user_embeddings: Vec<EmbeddingRecord>,
}

struct Category {
    name: &'static str,
    description: &'static str,
    keywords: [&'static str; 4],
}

const CATEGORIES: [Category; 16] = [
    Category { name: "patio_garden", description: "Interest in patio furniture, grills and gardening", keywords: ["patio", "garden", "grill", "lawn"] },
    Category { name: "kitchen_cooking", description: "Interest in cookware, recipes and kitchen appliances", keywords: ["kitchen", "cookware", "recipe", "blender"] },
    Category { name: "fitness_sports", description: "Interest in workouts, sports gear and athletic wear", keywords: ["fitness", "running", "yoga", "sneakers"] },
    Category { name: "toys_games", description: "Interest in toys, board games and video games", keywords: ["toys", "puzzle", "console", "lego"] },
    Category { name: "beauty_care", description: "Interest in cosmetics, skincare and grooming", keywords: ["skincare", "makeup", "fragrance", "salon"] },
    Category { name: "pet_supplies", description: "Interest in pet food, pet toys and pet care", keywords: ["dog", "cat", "kibble", "leash"] },
    Category { name: "home_decor", description: "Interest in furniture, lighting and home decoration", keywords: ["sofa", "lamp", "rug", "curtains"] },
    Category { name: "electronics", description: "Interest in phones, laptops and consumer electronics", keywords: ["laptop", "phone", "headphones", "tablet"] },
    Category { name: "books_media", description: "Interest in books, music and streaming media", keywords: ["novel", "audiobook", "vinyl", "streaming"] },
    Category { name: "travel_outdoor", description: "Interest in travel, camping and outdoor adventure", keywords: ["camping", "luggage", "hiking", "tent"] },
    Category { name: "baby_kids", description: "Interest in baby products and children's clothing", keywords: ["stroller", "diapers", "nursery", "toddler"] },
    Category { name: "automotive", description: "Interest in car parts, tires and vehicle care", keywords: ["tires", "motor", "wiper", "dashcam"] },
    Category { name: "health_wellness", description: "Interest in vitamins, supplements and wellness", keywords: ["vitamins", "supplements", "wellness", "protein"] },
    Category { name: "fashion_apparel", description: "Interest in clothing, shoes and accessories", keywords: ["dress", "jacket", "handbag", "denim"] },
    Category { name: "grocery_food", description: "Interest in groceries, snacks and beverages", keywords: ["snacks", "coffee", "organic", "pantry"] },
    Category { name: "home_improvement", description: "Interest in tools, hardware and home repair", keywords: ["drill", "roof", "gutter", "paint"] },
];

const PREFIXES: [&str; 8] = ["Spring", "Summer", "Fall", "Winter", "Weekend", "Flash", "Holiday", "Everyday"];
const SUFFIXES: [&str; 6] = ["Sale", "Deals", "Savings", "Essentials", "Collection", "Event"];

/// Name, description and keywords of feature `i` (0-based, bias excluded).
fn category(i: usize) -> (String, String, Vec<String>) {
    match CATEGORIES.get(i) {
        Some(c) => (c.name.to_owned(), c.description.to_owned(), c.keywords.iter().map(|s| s.to_string()).collect()),
        None => (
            format!("segment_{i:03}"),
            format!("Interest in product segment {i}"),
            (0..4).map(|k| format!("seg{i}{}", (b'a' + k) as char)).collect(),
        ),
    }
}

/// Per-purpose RNG stream.
fn stream(seed: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, &["world", purpose]))
}

/// Click probability of `user` on an ad with latent weights `truth` (noise-free).
pub fn click_probability(truth: &[f64], user: &FeatureVector) -> f64 {
    sigmoid_unchecked(dot(truth, user.values()))
}

/// Draws one click label under the world's click model.
pub fn draw_click(rng: &mut impl Rng, truth: &[f64], user: &FeatureVector, noise: Option<&Normal<f64>>) -> u8 {
    let mut z = dot(truth, user.values());
    if let Some(n) = noise {
        z += n.sample(rng);
    }
    u8::from(rng.random::<f64>() < sigmoid_unchecked(z))
}

pub fn generate_world(cfg: &WorldConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let n = cfg.n_features;
    let cats: Vec<(String, String, Vec<String>)> = (0..n).map(category).collect();
    let schema = FeatureSchema::new(cats.iter().map(|(name, d, _)| FeatureDef::new(name.clone(), d.clone())).collect())?;
    let std = Normal::new(0.0, 1.0).expect("unit normal");

    let mut rng = stream(cfg.seed, "users");
    let users: Vec<FeatureVector> = (0..cfg.n_users)
        .map(|u| {
            let values: Vec<f64> = (0..n).map(|_| std.sample(&mut rng)).collect();
            FeatureVector::from_features(format!("u{u:05}"), &values)
        })
        .collect::<Result<_>>()?;

    let mut rng = stream(cfg.seed, "ads");
    let base = Normal::new(0.0, 0.15).expect("finite sd");
    let intercept = Normal::new(cfg.intercept_mean, cfg.intercept_sd).expect("finite sd");
    let n_ads = cfg.n_retired + cfg.n_active;
    let mut ads = Vec::with_capacity(n_ads);
    let mut truth = Vec::with_capacity(n_ads);
    let mut labels = Vec::with_capacity(n_ads);
    for a in 0..n_ads {
        let ad_id = AdId::new(format!("ad{a:04}"));
        let primary = rng.random_range(0..n);
        let secondary = (primary + rng.random_range(1..n)) % n;
        let negative = if rng.random::<f64>() < 0.5 {
            let c = (0..n).filter(|&c| c != primary && c != secondary).collect::<Vec<_>>();
            c.choose(&mut rng).copied()
        } else {
            None
        };
        let mut values = vec![0.0; n + 1];
        values[0] = intercept.sample(&mut rng);
        for v in values.iter_mut().skip(1) {
            *v = base.sample(&mut rng);
        }
        values[primary + 1] += rng.random_range(0.8..1.5);
        values[secondary + 1] += rng.random_range(0.3..0.8);
        if let Some(c) = negative {
            values[c + 1] -= rng.random_range(0.3..0.8);
        }
        for v in values.iter_mut().skip(1) {
            *v *= cfg.affinity_scale;
        }
        let (pk, sk) = (&cats[primary].2, &cats[secondary].2);
        let title = format!(
            "{} {} {} and {} {} #{a}",
            PREFIXES.choose(&mut rng).expect("non-empty"),
            capitalize(pk.choose(&mut rng).expect("keywords")),
            capitalize(pk.choose(&mut rng).expect("keywords")),
            capitalize(sk.choose(&mut rng).expect("keywords")),
            SUFFIXES.choose(&mut rng).expect("non-empty"),
        );
        let caption = format!(
            "photo of {} and {} next to a {}",
            pk.choose(&mut rng).expect("keywords"),
            pk.choose(&mut rng).expect("keywords"),
            sk.choose(&mut rng).expect("keywords"),
        );
        let lifecycle = if a < cfg.n_retired { Lifecycle::Retired } else { Lifecycle::Active };
        let mut ad = AdRecord::new(ad_id.clone(), title, caption, lifecycle)?;
        ad.image_ref = Some(format!("images/{ad_id}.png"));
        ads.push(ad);
        labels.push(GroundTruthLabel { ad_id: ad_id.clone(), target_features: vec![cats[primary].0.clone()] });
        truth.push(AdTruth {
            ad_id,
            primary: cats[primary].0.clone(),
            secondary: cats[secondary].0.clone(),
            negative: negative.map(|c| cats[c].0.clone()),
            values,
        });
    }

    let mut rng = stream(cfg.seed, "split");
    let mut order: Vec<usize> = (0..cfg.n_users).collect();
    order.shuffle(&mut rng);
    let n_test = (cfg.n_users as f64 * cfg.test_fraction).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let mut rng = stream(cfg.seed, "clicks");
    let noise = (cfg.logit_noise_sd > 0.0).then(|| Normal::new(0.0, cfg.logit_noise_sd).expect("finite sd"));
    let mut interactions = Vec::new();
    for (a, t) in truth.iter().enumerate() {
        let active = a >= cfg.n_retired;
        let pools: &[(&[usize], f64)] = if active {
            &[(&train_idx, cfg.exposure), (&test_idx, cfg.test_exposure)]
        } else {
            &[(&train_idx, cfg.exposure)]
        };
        for &(pool, p) in pools {
            for &u in pool {
                if p < 1.0 && rng.random::<f64>() >= p {
                    continue;
                }
                let label = draw_click(&mut rng, &t.values, &users[u], noise.as_ref());
                interactions.push(InteractionRecord { user_id: users[u].user_id.clone(), ad_id: t.ad_id.clone(), label });
            }
        }
    }

    let embedder = HashEmbedder::new(cfg.embedding_dim, cfg.seed);
    let user_embeddings = users
        .iter()
        .map(|u| {
            let text = user_profile_text(u, &cats);
            EmbeddingRecord {
                ad_id: AdId::new(u.user_id.as_str()),
                provider_tag: embedder.tag().to_string(),
                vector: embedder.embed_text(&text),
            }
        })
        .collect();

    let split = Split {
        retired: ads[..cfg.n_retired].iter().map(|a| a.ad_id.clone()).collect(),
        active: ads[cfg.n_retired..].iter().map(|a| a.ad_id.clone()).collect(),
        train_users: train_idx.iter().map(|&u| users[u].user_id.clone()).collect(),
        test_users: test_idx.iter().map(|&u| users[u].user_id.clone()).collect(),
    };
    Ok(SyntheticWorld { config: cfg.clone(), schema, ads, users, interactions, truth, labels, split, user_embeddings })
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Keywords of the user's three strongest interests; stands in for a textual
/// summary of their history when embedding users.
fn user_profile_text(user: &FeatureVector, cats: &[(String, String, Vec<String>)]) -> String {
    let v = &user.values()[1..];
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx.iter().take(3).flat_map(|&i| cats[i].2.iter().cloned()).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WorldManifest {
    config: WorldConfig,
    content_hash: String,
}

impl SyntheticWorld {
    pub fn ad(&self, id: &AdId) -> Option<&AdRecord> {
        self.ads.iter().find(|a| &a.ad_id == id)
    }

    pub fn users_by_id(&self) -> HashMap<UserId, FeatureVector> {
        self.users.iter().map(|u| (u.user_id.clone(), u.clone())).collect()
    }

    /// SHA-256 over the serialized world.
    pub fn content_hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Ground truth as `ad -> feature -> weight` for the oracle chat client.
    pub fn oracle_truth(&self) -> HashMap<AdId, HashMap<String, f64>> {
        self.truth
            .iter()
            .map(|t| {
                let m = self
                    .schema
                    .features()
                    .iter()
                    .zip(&t.values[1..])
                    .map(|(f, v)| (f.name.clone(), *v))
                    .collect();
                (t.ad_id.clone(), m)
            })
            .collect()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(dir.join("schema.json"), &self.schema)?;
        write_jsonl(dir.join("ads.jsonl"), &self.ads)?;
        write_jsonl(dir.join("users.jsonl"), &self.users)?;
        write_jsonl(dir.join("interactions.jsonl"), &self.interactions)?;
        write_jsonl(dir.join("truth.jsonl"), &self.truth)?;
        write_jsonl(dir.join("labels.jsonl"), &self.labels)?;
        write_json(dir.join("split.json"), &self.split)?;
        write_jsonl(dir.join("user_embeddings.jsonl"), &self.user_embeddings)?;
        write_json(
            dir.join("world.json"),
            &WorldManifest { config: self.config.clone(), content_hash: self.content_hash()? },
        )
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: WorldManifest = read_json(dir.join("world.json"))?;
        let world = Self {
            config: manifest.config,
            schema: read_json(dir.join("schema.json"))?,
            ads: read_jsonl(dir.join("ads.jsonl"))?,
            users: read_jsonl(dir.join("users.jsonl"))?,
            interactions: read_jsonl(dir.join("interactions.jsonl"))?,
            truth: read_jsonl(dir.join("truth.jsonl"))?,
            labels: read_jsonl(dir.join("labels.jsonl"))?,
            split: read_json(dir.join("split.json"))?,
            user_embeddings: read_jsonl(dir.join("user_embeddings.jsonl"))?,
        };
        for u in &world.users {
            world.schema.check_dimension(u.dimension(), "user features")?;
        }
        for a in &world.ads {
            a.validate()?;
        }
        for l in &world.labels {
            l.validate(&world.schema)?;
        }
        Ok(world)
    }
}
