//! Prompt assembly for weight generation, reasoning, counterfactual rewrites
//! and judge checks.
//!
//! Every builder is a pure function of its inputs: rendering the same inputs
//! twice yields byte-identical bundles.

mod templates;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use templates::{render, TemplateSet, BUILTIN_TEMPLATE_VERSION};

use crate::embed::NeighborSet;
use crate::error::{Error, Result};
use crate::model::{AdId, AdRecord, FeatureSchema};
use crate::train::WarmWeightStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Weights,
    Reasoning,
    Counterfactual,
    JudgeValidation,
    JudgePolarity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMetadata {
    pub kind: PromptKind,
    pub ad_id: Option<AdId>,
    pub shot_count: usize,
    pub with_image: bool,
    pub template_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub format_text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_refs: Vec<String>,
    pub feature_batch: Vec<String>,
    pub metadata: PromptMetadata,
}

impl PromptBundle {
    /// User text followed by the output-format block, as sent in one message.
    pub fn user_message(&self) -> String {
        format!("{}\n\n{}", self.user_text, self.format_text)
    }
}

/// A retrieved warm ad shown as a reference example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub ad_title: String,
    pub image_caption: String,
    /// Trained weights restricted to the current feature batch.
    pub weights_subset: BTreeMap<String, f64>,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modification {
    Enhanced,
    Diminished,
    Neutralized,
}

impl Modification {
    pub const ALL: [Modification; 3] = [Modification::Enhanced, Modification::Diminished, Modification::Neutralized];

    pub fn as_str(self) -> &'static str {
        match self {
            Modification::Enhanced => "enhanced",
            Modification::Diminished => "diminished",
            Modification::Neutralized => "neutralized",
        }
    }

    fn instruction(self) -> &'static str {
        match self {
            Modification::Enhanced => "For 'enhanced': Modify to BETTER align with target features",
            Modification::Diminished => "For 'diminished': Modify to LESS align with target features",
            Modification::Neutralized => "For 'neutralized': Make more GENERIC, removing category references",
        }
    }
}

impl fmt::Display for Modification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "enhanced" => Ok(Modification::Enhanced),
            "diminished" => Ok(Modification::Diminished),
            "neutralized" | "neutralised" => Ok(Modification::Neutralized),
            other => Err(Error::Domain(format!("unknown modification type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRequest {
    pub ad_id: AdId,
    pub original_title: String,
    pub original_summary: String,
    /// (feature name, description)
    pub target_features: Vec<(String, String)>,
    pub modification: Modification,
}

/// Splits the non-bias features into contiguous batches of at most `batch_size`.
pub fn batch_features(schema: &FeatureSchema, batch_size: usize) -> Result<Vec<Vec<String>>> {
    if batch_size < 1 {
        return Err(Error::Domain("batch_size must be at least 1".into()));
    }
    Ok(schema
        .features()
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|f| f.name.clone()).collect())
        .collect())
}

/// Turns retrieved neighbours into reference examples for one feature batch.
pub fn few_shot_examples(
    neighbors: &NeighborSet,
    ads: &BTreeMap<AdId, AdRecord>,
    warm: &WarmWeightStore,
    schema: &FeatureSchema,
    batch: &[String],
) -> Result<Vec<FewShotExample>> {
    neighbors
        .neighbors
        .iter()
        .map(|n| {
            let ad = ads
                .get(&n.ad_id)
                .ok_or_else(|| Error::Alignment(format!("neighbour {} has no ad record", n.ad_id)))?;
            let w = warm
                .get(&n.ad_id)
                .ok_or_else(|| Error::Alignment(format!("neighbour {} has no trained weights", n.ad_id)))?;
            schema.check_dimension(w.dimension(), "neighbour weights")?;
            let weights_subset = batch
                .iter()
                .map(|f| {
                    let i = schema
                        .index_of(f)
                        .ok_or_else(|| Error::Schema(format!("unknown feature `{f}`")))?;
                    Ok((f.clone(), w.values()[i]))
                })
                .collect::<Result<_>>()?;
            Ok(FewShotExample {
                ad_title: ad.title.clone(),
                image_caption: ad.image_caption.clone(),
                weights_subset,
                similarity: n.similarity,
            })
        })
        .collect()
}

/// Sample values shown in the output-format skeleton.
const SKELETON_VALUES: [&str; 5] = ["0.123", "-0.456", "0.789", "-0.234", "0.567"];

#[derive(Debug, Clone)]
pub struct PromptBuilder {
    pub templates: TemplateSet,
    /// When false, captions and image attachments are left out of every prompt.
    pub include_image: bool,
    pub min_batch: usize,
    pub max_batch: usize,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        Self {
            templates: TemplateSet::builtin(),
            include_image: true,
            min_batch: 1,
            max_batch: 10,
        }
    }
}

impl PromptBuilder {
    pub fn new(templates: TemplateSet) -> Self {
        Self {
            templates,
            ..Self::default()
        }
    }

    pub fn with_image(mut self, include_image: bool) -> Self {
        self.include_image = include_image;
        self
    }

    fn check_batch(&self, batch: &[String], schema: &FeatureSchema) -> Result<()> {
        if batch.len() < self.min_batch || batch.len() > self.max_batch {
            return Err(Error::Domain(format!(
                "feature batch of {} is outside {}..={}",
                batch.len(),
                self.min_batch,
                self.max_batch
            )));
        }
        let mut seen = HashSet::new();
        for f in batch {
            let def = schema
                .get(f)
                .ok_or_else(|| Error::Schema(format!("feature `{f}` is not in the schema")))?;
            if schema.index_of(f) == Some(0) {
                return Err(Error::Schema("the bias slot cannot be prompted for".into()));
            }
            if def.description.trim().is_empty() {
                return Err(Error::Schema(format!("feature `{f}` has no description")));
            }
            if !seen.insert(f.as_str()) {
                return Err(Error::Schema(format!("feature `{f}` appears twice in the batch")));
            }
        }
        Ok(())
    }

    fn image_line(&self, caption: &str) -> String {
        if self.include_image {
            format!("{}\n", render(&self.templates.image_line, &[("image_caption", caption)]))
        } else {
            String::new()
        }
    }

    fn feature_lines(batch: &[String], schema: &FeatureSchema) -> (String, String) {
        let names = batch.join(", ");
        let descriptions = batch
            .iter()
            .map(|f| format!("  - {f}: {}", schema.get(f).map_or("", |d| d.description.as_str())))
            .collect::<Vec<_>>()
            .join("\n");
        (names, descriptions)
    }

    fn examples_block(&self, batch: &[String], examples: &[FewShotExample]) -> Result<String> {
        if examples.is_empty() {
            return Ok(String::new());
        }
        let wanted: HashSet<&str> = batch.iter().map(String::as_str).collect();
        let mut ordered: Vec<&FewShotExample> = examples.iter().collect();
        // stable: equal similarities keep retrieval order
        ordered.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
        let mut blocks = Vec::with_capacity(ordered.len());
        for (i, ex) in ordered.iter().enumerate() {
            let keys: HashSet<&str> = ex.weights_subset.keys().map(String::as_str).collect();
            if keys != wanted {
                return Err(Error::Alignment(format!(
                    "example `{}` carries weights for {:?}, batch is {:?}",
                    ex.ad_title,
                    ex.weights_subset.keys().collect::<Vec<_>>(),
                    batch
                )));
            }
            let weights = format!(
                "{{{}}}",
                batch
                    .iter()
                    .map(|f| format!("\"{f}\": {:.4}", ex.weights_subset[f]))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            let index = (i + 1).to_string();
            let similarity = format!("{:.4}", ex.similarity);
            let image_line = self.image_line(&ex.image_caption);
            blocks.push(render(
                &self.templates.example,
                &[
                    ("index", &index),
                    ("ad_title", &ex.ad_title),
                    ("image_line", &image_line),
                    ("ad_weights", &weights),
                    ("similarity", &similarity),
                ],
            ));
        }
        let shot_count = ordered.len().to_string();
        let examples = blocks.join("\n\n");
        Ok(format!(
            "{}\n\n",
            render(
                &self.templates.reference_block,
                &[("shot_count", &shot_count), ("examples", &examples)]
            )
        ))
    }

    fn task_user_text(
        &self,
        ad: &AdRecord,
        batch: &[String],
        schema: &FeatureSchema,
        examples: &[FewShotExample],
    ) -> Result<String> {
        self.check_batch(batch, schema)?;
        ad.validate()?;
        let reference_block = self.examples_block(batch, examples)?;
        let (features, descriptions) = Self::feature_lines(batch, schema);
        let image_line = self.image_line(&ad.image_caption);
        Ok(render(
            &self.templates.weight_user,
            &[
                ("reference_block", &reference_block),
                ("ad_title", &ad.title),
                ("image_line", &image_line),
                ("features", &features),
                ("feature_descriptions", &descriptions),
            ],
        ))
    }

    fn image_refs(&self, ad: &AdRecord) -> Vec<String> {
        match (&ad.image_ref, self.include_image) {
            (Some(r), true) => vec![r.clone()],
            _ => Vec::new(),
        }
    }

    fn metadata(&self, kind: PromptKind, ad_id: Option<AdId>, shot_count: usize) -> PromptMetadata {
        PromptMetadata {
            kind,
            ad_id,
            shot_count,
            with_image: self.include_image,
            template_version: self.templates.version.clone(),
        }
    }

    /// Weight-generation prompt: reference examples, target ad, feature
    /// definitions, instructions and a JSON-only output format.
    pub fn weight_prompt(
        &self,
        ad: &AdRecord,
        batch: &[String],
        schema: &FeatureSchema,
        examples: &[FewShotExample],
    ) -> Result<PromptBundle> {
        let user_text = self.task_user_text(ad, batch, schema, examples)?;
        let skeleton = format!(
            "{{\n{}\n}}",
            batch
                .iter()
                .zip(SKELETON_VALUES.iter().cycle())
                .map(|(f, v)| format!("  \"{f}\": {v}"))
                .collect::<Vec<_>>()
                .join(",\n")
        );
        let count = batch.len().to_string();
        let format_text = render(
            &self.templates.weight_format,
            &[("feature_count", &count), ("json_skeleton", &skeleton)],
        );
        Ok(PromptBundle {
            system_text: self.templates.system.clone(),
            user_text,
            format_text,
            image_refs: self.image_refs(ad),
            feature_batch: batch.to_vec(),
            metadata: self.metadata(PromptKind::Weights, Some(ad.ad_id.clone()), examples.len()),
        })
    }

    /// Same task as [`weight_prompt`](Self::weight_prompt) but asks for a
    /// reasoning record per feature ending in a predicted score.
    pub fn reasoning_prompt(
        &self,
        ad: &AdRecord,
        batch: &[String],
        schema: &FeatureSchema,
        examples: &[FewShotExample],
    ) -> Result<PromptBundle> {
        let user_text = self.task_user_text(ad, batch, schema, examples)?;
        let entries = batch
            .iter()
            .map(|f| {
                format!(
                    "  \"{f}\": {{\n    \"ad_analysis\": \"what the ad offers\",\n    \"alignment\": \"matches and mismatches\",\n    \"key_factors\": [\"factor1\", \"factor2\"],\n    \"reasoning_summary\": \"brief explanation\",\n    \"predicted_score\": 0.00\n  }}"
                )
            })
            .collect::<Vec<_>>()
            .join(",\n");
        let skeleton = format!("{{\n{entries}\n}}");
        let format_text = render(&self.templates.reasoning_format, &[("json_skeleton", &skeleton)]);
        Ok(PromptBundle {
            system_text: self.templates.system.clone(),
            user_text,
            format_text,
            image_refs: self.image_refs(ad),
            feature_batch: batch.to_vec(),
            metadata: self.metadata(PromptKind::Reasoning, Some(ad.ad_id.clone()), examples.len()),
        })
    }

    /// Rewrite request for one of the three semantic modifications.
    pub fn counterfactual_prompt(&self, req: &CounterfactualRequest) -> Result<PromptBundle> {
        if req.original_title.trim().is_empty() {
            return Err(Error::Domain("counterfactual request needs a title".into()));
        }
        if req.target_features.is_empty() {
            return Err(Error::Domain("counterfactual request needs target features".into()));
        }
        let features = req
            .target_features
            .iter()
            .map(|(n, _)| n.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        let descriptions = req
            .target_features
            .iter()
            .map(|(n, d)| format!("  - {n}: {d}"))
            .collect::<Vec<_>>()
            .join("\n");
        let user_text = render(
            &self.templates.counterfactual_user,
            &[
                ("original_title", &req.original_title),
                ("original_summary", &req.original_summary),
                ("features", &features),
                ("feature_descriptions", &descriptions),
                ("modification_type", req.modification.as_str()),
                ("modification_instruction", req.modification.instruction()),
            ],
        );
        Ok(PromptBundle {
            system_text: self.templates.system.clone(),
            user_text,
            format_text: self.templates.counterfactual_format.clone(),
            image_refs: Vec::new(),
            feature_batch: req.target_features.iter().map(|(n, _)| n.clone()).collect(),
            metadata: self.metadata(PromptKind::Counterfactual, Some(req.ad_id.clone()), 0),
        })
    }

    /// Judge check of generated weights for one batch.
    pub fn judge_validation_prompt(&self, ad: &AdRecord, weights: &[(String, f64)], schema: &FeatureSchema) -> PromptBundle {
        let lines = weights
            .iter()
            .map(|(f, w)| {
                let desc = schema.get(f).map_or("", |d| d.description.as_str());
                format!("- {f} ({desc}): {w:.4}")
            })
            .collect::<Vec<_>>()
            .join("\n");
        let user_text = render(
            &self.templates.judge_validate,
            &[("ad_title", &ad.title), ("image_caption", &ad.image_caption), ("weights", &lines)],
        );
        PromptBundle {
            system_text: self.templates.judge_system.clone(),
            user_text,
            format_text: String::new(),
            image_refs: Vec::new(),
            feature_batch: weights.iter().map(|(f, _)| f.clone()).collect(),
            metadata: self.metadata(PromptKind::JudgeValidation, Some(ad.ad_id.clone()), 0),
        }
    }

    /// Asks a judge for the sentiment polarity of a reasoning text.
    pub fn polarity_prompt(&self, ad_id: &AdId, feature: &str, reasoning: &str) -> PromptBundle {
        PromptBundle {
            system_text: self.templates.judge_system.clone(),
            user_text: render(&self.templates.judge_polarity, &[("feature", feature), ("reasoning", reasoning)]),
            format_text: String::new(),
            image_refs: Vec::new(),
            feature_batch: vec![feature.to_owned()],
            metadata: self.metadata(PromptKind::JudgePolarity, Some(ad_id.clone()), 0),
        }
    }
}

/// Extracts the reasoning text embedded by [`PromptBuilder::polarity_prompt`].
pub fn polarity_prompt_reasoning(bundle: &PromptBundle) -> Option<&str> {
    let start = bundle.user_text.find("<<<\n")? + 4;
    let end = bundle.user_text[start..].find("\n>>>")? + start;
    Some(&bundle.user_text[start..end])
}
