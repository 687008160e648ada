//! Cold-start CTR weights generated by a language model from retrieved warm
//! campaigns, then normalized, calibrated and served by a linear ranker.

pub mod calibrate;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod jsonl;
pub mod model;
pub mod prompt;
pub mod seed;
pub mod serve;
pub mod tolerance;
pub mod train;

pub use error::{Error, Result};
pub use model::{
    AdId, AdRecord, FeatureDef, FeatureSchema, FeatureVector, InteractionRecord, Lifecycle, Ranked, Source, Stage,
    UserId, WeightVector,
};
pub use tolerance::Tolerances;
