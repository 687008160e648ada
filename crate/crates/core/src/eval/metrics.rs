//! Ranking, explainability and robustness metrics.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{ChatClient, ReasoningRecord};
use crate::model::{AdId, FeatureSchema, WeightVector};
use crate::prompt::{polarity_prompt_reasoning, Modification, PromptBuilder, PromptBundle, PromptKind};

/// Area under the ROC curve in Mann-Whitney form; tied scores count one half.
///
/// Accumulates twice the U statistic in integers, so the result equals the
/// pairwise count `(wins + ties / 2) / (P N)` exactly.
pub fn auc(scored: &[(f64, u8)]) -> Result<f64> {
    if let Some((s, _)) = scored.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::Domain(format!("AUC input contains non-finite score {s}")));
    }
    let mut sorted: Vec<(f64, bool)> = scored.iter().map(|&(s, l)| (s, l == 1)).collect();
    sorted.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let (mut pos, mut neg, mut u2) = (0u64, 0u64, 0u128);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        u2 += u128::from(p) * u128::from(2 * neg + n);
        pos += p;
        neg += n;
        i = j;
    }
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((u2 as f64 / 2.0) / (pos as f64 * neg as f64))
}

/// NDCG over the first `k` positions with gain `2^rel - 1` and a `log2(pos + 1)`
/// discount; 0 when the list holds no relevant item.
pub fn ndcg_at_k(ranked_labels: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Domain("NDCG cut-off must be at least 1".into()));
    }
    let dcg = |labels: &[f64]| -> f64 {
        labels
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &l)| (l.exp2() - 1.0) / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal = ranked_labels.to_vec();
    ideal.sort_unstable_by(|a, b| b.total_cmp(a));
    let idcg = dcg(&ideal);
    Ok(if idcg > 0.0 { dcg(ranked_labels) / idcg } else { 0.0 })
}

/// Human-labelled target features of an ad.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub ad_id: AdId,
    pub target_features: Vec<String>,
}

impl GroundTruthLabel {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.target_features.is_empty() {
            return Err(Error::Schema(format!("ad {} has no target features", self.ad_id)));
        }
        for f in &self.target_features {
            match schema.index_of(f) {
                Some(i) if i > 0 => {}
                _ => return Err(Error::Schema(format!("label for {} names unknown feature `{f}`", self.ad_id))),
            }
        }
        Ok(())
    }
}

/// The five non-bias features with the largest weights; ties keep schema order.
pub fn top5_features<'s>(weights: &WeightVector, schema: &'s FeatureSchema) -> Result<Vec<&'s str>> {
    schema.check_dimension(weights.dimension(), "weights")?;
    if schema.features().len() < 5 {
        return Err(Error::Config(format!(
            "top-5 metrics need at least 5 features, schema has {}",
            schema.features().len()
        )));
    }
    let mut idx: Vec<usize> = (1..schema.dimension()).collect();
    let v = weights.values();
    // stable sort keeps schema order among equal weights
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    Ok(idx[..5].iter().map(|&i| schema.entries()[i].name.as_str()).collect())
}

/// 1 when any target feature is among the top five.
pub fn hit_at_5(weights: &WeightVector, label: &GroundTruthLabel, schema: &FeatureSchema) -> Result<f64> {
    label.validate(schema)?;
    let top = top5_features(weights, schema)?;
    Ok(if label.target_features.iter().any(|f| top.contains(&f.as_str())) { 1.0 } else { 0.0 })
}

/// Jaccard overlap of the top-five set with the target features.
pub fn jaccard_at_5(weights: &WeightVector, label: &GroundTruthLabel, schema: &FeatureSchema) -> Result<f64> {
    label.validate(schema)?;
    let top: BTreeSet<&str> = top5_features(weights, schema)?.into_iter().collect();
    let gt: BTreeSet<&str> = label.target_features.iter().map(String::as_str).collect();
    Ok(top.intersection(&gt).count() as f64 / top.union(&gt).count() as f64)
}

fn mean_over(pairs: &[(&WeightVector, &GroundTruthLabel)], f: impl Fn(&WeightVector, &GroundTruthLabel) -> Result<f64>) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("no labelled ads".into()));
    }
    let mut total = 0.0;
    for (w, l) in pairs {
        if w.ad_id != l.ad_id {
            return Err(Error::Alignment(format!("weights for {} paired with label for {}", w.ad_id, l.ad_id)));
        }
        total += f(w, l)?;
    }
    Ok(total / pairs.len() as f64)
}

pub fn hitrate_at_5(pairs: &[(&WeightVector, &GroundTruthLabel)], schema: &FeatureSchema) -> Result<f64> {
    mean_over(pairs, |w, l| hit_at_5(w, l, schema))
}

pub fn coverage_at_5(pairs: &[(&WeightVector, &GroundTruthLabel)], schema: &FeatureSchema) -> Result<f64> {
    mean_over(pairs, |w, l| jaccard_at_5(w, l, schema))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Neutral,
    Negative,
}

impl Polarity {
    pub fn of_score(score: f64, neutral_band: f64) -> Polarity {
        if score > neutral_band {
            Polarity::Positive
        } else if score < -neutral_band {
            Polarity::Negative
        } else {
            Polarity::Neutral
        }
    }

    /// First polarity word in a judge reply.
    pub fn parse_reply(raw: &str) -> Option<Polarity> {
        raw.split(|c: char| !c.is_ascii_alphabetic())
            .find_map(|w| match w.to_ascii_lowercase().as_str() {
                "positive" => Some(Polarity::Positive),
                "neutral" => Some(Polarity::Neutral),
                "negative" => Some(Polarity::Negative),
                _ => None,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub rate: f64,
    pub agreed: usize,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Fraction of records whose judged reasoning polarity matches the sign of the score.
pub fn consistency_rate(
    records: &[ReasoningRecord],
    judge: &dyn ChatClient,
    prompts: &PromptBuilder,
    neutral_band: f64,
) -> Result<ConsistencyReport> {
    let (mut agreed, mut evaluated, mut skipped) = (0, 0, 0);
    for r in records {
        if !r.predicted_score.is_finite() {
            return Err(Error::Domain(format!("non-finite score for {} / {}", r.ad_id, r.feature_name)));
        }
        let bundle = prompts.polarity_prompt(&r.ad_id, &r.feature_name, &r.reasoning);
        let judged = match judge.complete(&bundle, 0.0, None) {
            Ok(raw) => Polarity::parse_reply(&raw),
            Err(e) => {
                log::warn!("polarity judge failed for {} / {}: {e}", r.ad_id, r.feature_name);
                None
            }
        };
        match judged {
            Some(p) => {
                evaluated += 1;
                if p == Polarity::of_score(r.predicted_score, neutral_band) {
                    agreed += 1;
                }
            }
            None => skipped += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::UndefinedMetric(format!("no record could be judged ({skipped} skipped)")));
    }
    Ok(ConsistencyReport {
        rate: agreed as f64 / evaluated as f64,
        agreed,
        evaluated,
        skipped,
    })
}

const POSITIVE_WORDS: &[&str] = &[
    "align", "aligned", "aligns", "alignment", "strong", "strongly", "relevant", "match", "matches", "appeal",
    "appealing", "positive", "interested", "fits",
];
const NEGATIVE_WORDS: &[&str] = &[
    "conflict", "conflicts", "conflicting", "mismatch", "irrelevant", "unlikely", "negative", "opposed", "lower",
    "unrelated", "contradicts",
];

/// Rule-based polarity judge: counts positive against negative cue words in
/// the reasoning text. Stands in for an LLM judge in offline runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeywordJudge;

impl KeywordJudge {
    pub fn classify(text: &str) -> Polarity {
        let (mut pos, mut neg) = (0i32, 0i32);
        for w in text.split(|c: char| !c.is_ascii_alphanumeric()) {
            let w = w.to_ascii_lowercase();
            if POSITIVE_WORDS.contains(&w.as_str()) {
                pos += 1;
            } else if NEGATIVE_WORDS.contains(&w.as_str()) {
                neg += 1;
            }
        }
        match pos.cmp(&neg) {
            std::cmp::Ordering::Greater => Polarity::Positive,
            std::cmp::Ordering::Less => Polarity::Negative,
            std::cmp::Ordering::Equal => Polarity::Neutral,
        }
    }
}

impl ChatClient for KeywordJudge {
    fn complete(&self, bundle: &PromptBundle, _temperature: f64, _seed: Option<u64>) -> Result<String> {
        if bundle.metadata.kind != PromptKind::JudgePolarity {
            return Err(Error::Domain("keyword judge only answers polarity prompts".into()));
        }
        let text = polarity_prompt_reasoning(bundle)
            .ok_or_else(|| Error::Parse("polarity prompt has no delimited reasoning".into()))?;
        Ok(match Self::classify(text) {
            Polarity::Positive => "positive",
            Polarity::Neutral => "neutral",
            Polarity::Negative => "negative",
        }
        .to_owned())
    }
}

/// Whether a counterfactual score moved the way the modification intends.
/// Strict inequalities: an unchanged score counts as wrong.
pub fn counterfactual_direction(orig: f64, cf: f64, m: Modification) -> Result<bool> {
    if !orig.is_finite() || !cf.is_finite() {
        return Err(Error::Domain(format!("non-finite counterfactual scores {orig} / {cf}")));
    }
    Ok(match m {
        Modification::Enhanced => cf > orig,
        Modification::Diminished => cf < orig,
        Modification::Neutralized => cf.abs() < orig.abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub ad_id: AdId,
    pub feature: String,
    pub modification: Modification,
    pub s_orig: f64,
    pub s_cf: f64,
    pub direction_correct: bool,
}

pub fn direction_accuracy(results: &[CounterfactualResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::UndefinedMetric("no counterfactual results".into()));
    }
    Ok(results.iter().filter(|r| r.direction_correct).count() as f64 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean_diff: f64,
    /// One-sided p-value for `mean(a) > mean(b)`.
    pub p_value: f64,
    pub p_two_sided: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
    pub n: usize,
}

/// Paired bootstrap of the mean difference `a - b` over matched units.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<BootstrapResult> {
    if a.len() != b.len() {
        return Err(Error::Alignment(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() || resamples == 0 {
        return Err(Error::UndefinedMetric("bootstrap needs data and at least one resample".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let observed = diffs.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut s = 0.0;
        for _ in 0..n {
            s += diffs[rng.random_range(0..n)];
        }
        means.push(s / n as f64);
    }
    let le = means.iter().filter(|&&m| m <= 0.0).count();
    let ge = means.iter().filter(|&&m| m >= 0.0).count();
    let p = |c: usize| (c + 1) as f64 / (resamples + 1) as f64;
    means.sort_unstable_by(f64::total_cmp);
    let pick = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Ok(BootstrapResult {
        mean_diff: observed,
        p_value: p(le),
        p_two_sided: (2.0 * p(le).min(p(ge))).min(1.0),
        ci_low: pick(0.025),
        ci_high: pick(0.975),
        resamples,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedClient;
    use crate::model::{FeatureDef, Source, Stage};

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[(0.1, 0), (0.2, 0), (0.8, 1), (0.9, 1)]).unwrap(), 1.0);
        assert_eq!(auc(&[(0.5, 0), (0.5, 1)]).unwrap(), 0.5);
        assert!(matches!(auc(&[(0.1, 1), (0.2, 1)]), Err(Error::UndefinedMetric(_))));
        assert!(auc(&[(f64::NAN, 1), (0.2, 0)]).is_err());
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[1.0, 0.0, 0.0, 0.0, 0.0], 5).unwrap(), 1.0);
        assert!((ndcg_at_k(&[0.0, 1.0, 0.0], 5).unwrap() - 0.6309297536).abs() < 1e-10);
        assert_eq!(ndcg_at_k(&[0.0, 0.0], 5).unwrap(), 0.0);
        assert!(ndcg_at_k(&[1.0], 0).is_err());
    }

    fn schema10() -> FeatureSchema {
        FeatureSchema::new((0..10).map(|i| FeatureDef::new(format!("f{i}"), "d")).collect()).unwrap()
    }

    fn label(ad: &str, fs: &[&str]) -> GroundTruthLabel {
        GroundTruthLabel { ad_id: ad.into(), target_features: fs.iter().map(|s| s.to_string()).collect() }
    }

    #[test]
    fn top5_examples() {
        let s = schema10();
        // f0 largest
        let w = WeightVector::new("a", Stage::Raw, Source::LlmGenerated, {
            let mut v = vec![9.0];
            v.extend((0..10).map(|i| 1.0 - i as f64 * 0.1));
            v
        })
        .unwrap();
        assert_eq!(hit_at_5(&w, &label("a", &["f0"]), &s).unwrap(), 1.0);
        assert_eq!(hit_at_5(&w, &label("a", &["f5"]), &s).unwrap(), 0.0);
        assert_eq!(jaccard_at_5(&w, &label("a", &["f0", "f1", "f2", "f3", "f4"]), &s).unwrap(), 1.0);
        assert_eq!(jaccard_at_5(&w, &label("a", &["f9"]), &s).unwrap(), 0.0);
        assert!((jaccard_at_5(&w, &label("a", &["f0", "f7"]), &s).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        let ties = WeightVector::new("a", Stage::Raw, Source::LlmGenerated, vec![0.0; 11]).unwrap();
        assert_eq!(top5_features(&ties, &s).unwrap(), ["f0", "f1", "f2", "f3", "f4"]);
        let small = FeatureSchema::new((0..4).map(|i| FeatureDef::new(format!("f{i}"), "d")).collect()).unwrap();
        let w4 = WeightVector::new("a", Stage::Raw, Source::LlmGenerated, vec![0.0; 5]).unwrap();
        assert!(matches!(hit_at_5(&w4, &label("a", &["f0"]), &small), Err(Error::Config(_))));
    }

    #[test]
    fn direction_examples() {
        assert!(counterfactual_direction(0.192, 0.735, Modification::Enhanced).unwrap());
        assert!(counterfactual_direction(3.750, 1.150, Modification::Diminished).unwrap());
        assert!(counterfactual_direction(1.055, 0.975, Modification::Neutralized).unwrap());
        assert!(!counterfactual_direction(0.5, 0.5, Modification::Enhanced).unwrap());
        assert!(!counterfactual_direction(-0.5, 0.5, Modification::Neutralized).unwrap());
    }

    fn rec(score: f64, text: &str) -> ReasoningRecord {
        ReasoningRecord { ad_id: "a".into(), feature_name: "f".into(), reasoning: text.into(), predicted_score: score }
    }

    #[test]
    fn consistency_with_scripted_judges() {
        let prompts = PromptBuilder::default();
        let recs = vec![rec(0.3, "x"), rec(0.9, "y")];
        let yes = ScriptedClient::constant("Positive.");
        assert_eq!(consistency_rate(&recs, &yes, &prompts, 0.05).unwrap().rate, 1.0);
        let neg_recs = vec![rec(-0.3, "x"), rec(-0.9, "y")];
        assert_eq!(consistency_rate(&neg_recs, &yes, &prompts, 0.05).unwrap().rate, 0.0);
        let flaky = ScriptedClient::new(["positive", "I cannot say"]);
        let r = consistency_rate(&recs, &flaky, &prompts, 0.05).unwrap();
        assert_eq!((r.evaluated, r.skipped), (1, 1));
    }

    #[test]
    fn keyword_judge_rules() {
        assert_eq!(KeywordJudge::classify("Strong match with the feature"), Polarity::Positive);
        assert_eq!(KeywordJudge::classify("a mismatch; categories conflict"), Polarity::Negative);
        assert_eq!(KeywordJudge::classify("weak relevance, neutral"), Polarity::Neutral);
    }

    #[test]
    fn bootstrap_detects_clear_shift() {
        let a: Vec<f64> = (0..200).map(|i| 0.5 + (i % 7) as f64 * 0.01).collect();
        let b: Vec<f64> = a.iter().map(|x| x - 0.05).collect();
        let r = paired_bootstrap(&a, &b, 2000, 1).unwrap();
        assert!((r.mean_diff - 0.05).abs() < 1e-12);
        assert!(r.p_value < 0.001 && r.ci_low > 0.0);
        let same = paired_bootstrap(&a, &a, 500, 1).unwrap();
        assert_eq!(same.p_value, 1.0);
        assert!(paired_bootstrap(&a, &b[..3], 10, 1).is_err());
    }
}
