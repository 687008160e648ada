//! Lenient extraction of JSON payloads from model responses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Every top-level balanced `{...}` span that parses as a JSON object, in order.
///
/// Models wrap JSON in code fences and prose, and prose may itself contain
/// stray braces, so every `{` is tried as a start until one parses.
pub fn json_objects(raw: &str) -> Vec<Map<String, Value>> {
    let bytes = raw.as_bytes();
    let mut found = Vec::new();
    let mut from = 0;
    while let Some(offset) = raw[from..].find('{') {
        let start = from + offset;
        from = start + 1;
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&raw[start..=end]) {
                found.push(map);
                from = end + 1;
            }
        }
    }
    found
}

/// The first JSON object in `raw`.
pub fn extract_json_object(raw: &str) -> Option<Map<String, Value>> {
    json_objects(raw).into_iter().next()
}

/// The first object holding every key in `keys`, else the first object.
/// Drafts and scratch objects before the answer are skipped this way.
fn object_with_keys(raw: &str, keys: &[String]) -> Option<Map<String, Value>> {
    let mut objects = json_objects(raw);
    let pick = objects.iter().position(|o| keys.iter().all(|k| o.contains_key(k))).unwrap_or(0);
    (pick < objects.len()).then(|| objects.swap_remove(pick))
}

/// Index of the `}` closing the object opened at `start`, honouring strings.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Accepts JSON numbers and numeric strings; rejects anything non-finite.
fn as_finite(value: &Value) -> Option<f64> {
    let v = match value {
        Value::Number(n) => n.as_f64()?,
        Value::String(s) => s.trim().parse::<f64>().ok()?,
        _ => return None,
    };
    v.is_finite().then_some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedWeights {
    pub weights: BTreeMap<String, f64>,
    /// Keys in the response that are not in the batch (ignored).
    pub extra_keys: Vec<String>,
    /// Batch features whose |weight| exceeded the outlier threshold (kept).
    pub outliers: Vec<String>,
}

/// Parses a weight-generation response for `batch`.
pub fn parse_weight_response(raw: &str, batch: &[String], outlier_threshold: f64) -> Result<ParsedWeights> {
    if batch.is_empty() {
        return Err(Error::Domain("cannot parse weights for an empty batch".into()));
    }
    let obj = object_with_keys(raw, batch).ok_or_else(|| Error::Parse("no JSON object in response".into()))?;
    let mut weights = BTreeMap::new();
    let mut outliers = Vec::new();
    for f in batch {
        let value = obj
            .get(f)
            .ok_or_else(|| Error::Parse(format!("response is missing feature `{f}`")))?;
        let w = as_finite(value)
            .ok_or_else(|| Error::Parse(format!("feature `{f}` has non-numeric or non-finite value {value}")))?;
        if w.abs() > outlier_threshold {
            outliers.push(f.clone());
        }
        weights.insert(f.clone(), w);
    }
    let extra_keys: Vec<String> = obj.keys().filter(|k| !batch.contains(k)).cloned().collect();
    if !extra_keys.is_empty() {
        log::warn!("ignoring unexpected keys in weight response: {extra_keys:?}");
    }
    Ok(ParsedWeights {
        weights,
        extra_keys,
        outliers,
    })
}

/// One feature's reasoning payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningPayload {
    #[serde(default)]
    pub ad_analysis: String,
    #[serde(default)]
    pub alignment: String,
    #[serde(default)]
    pub key_factors: Vec<String>,
    #[serde(default)]
    pub reasoning_summary: String,
    pub predicted_score: f64,
}

impl ReasoningPayload {
    /// The natural-language reasoning judged for polarity.
    pub fn reasoning_text(&self) -> String {
        [self.alignment.as_str(), self.reasoning_summary.as_str()]
            .iter()
            .filter(|s| !s.trim().is_empty())
            .copied()
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Parses a reasoning response keyed by feature name.
///
/// A bare single-record object is accepted when the batch has one feature.
pub fn parse_reasoning_response(raw: &str, batch: &[String]) -> Result<BTreeMap<String, ReasoningPayload>> {
    let single = batch.len() == 1 && json_objects(raw).iter().any(|o| o.contains_key("predicted_score"));
    let obj = if single {
        object_with_keys(raw, &["predicted_score".to_owned()])
    } else {
        object_with_keys(raw, batch)
    }
    .ok_or_else(|| Error::Parse("no JSON object in response".into()))?;
    let mut out = BTreeMap::new();
    if single && obj.contains_key("predicted_score") {
        out.insert(batch[0].clone(), payload(&batch[0], Value::Object(obj))?);
        return Ok(out);
    }
    for f in batch {
        let v = obj
            .get(f)
            .cloned()
            .ok_or_else(|| Error::Parse(format!("reasoning response is missing feature `{f}`")))?;
        out.insert(f.clone(), payload(f, v)?);
    }
    Ok(out)
}

fn payload(feature: &str, mut v: Value) -> Result<ReasoningPayload> {
    // tolerate numeric strings for the score
    if let Some(score) = v.get("predicted_score").and_then(as_finite) {
        v["predicted_score"] = Value::from(score);
    } else {
        return Err(Error::Parse(format!("feature `{feature}` lacks a finite predicted_score")));
    }
    serde_json::from_value(v).map_err(|e| Error::Parse(format!("feature `{feature}`: {e}")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualRewrite {
    pub modified_title: String,
    pub modified_summary: String,
    #[serde(default)]
    pub modification_explanation: String,
}

pub fn parse_counterfactual_response(raw: &str) -> Result<CounterfactualRewrite> {
    let obj = extract_json_object(raw).ok_or_else(|| Error::Parse("no JSON object in response".into()))?;
    let rewrite: CounterfactualRewrite =
        serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Parse(format!("counterfactual rewrite: {e}")))?;
    if rewrite.modified_title.trim().is_empty() {
        return Err(Error::Parse("counterfactual rewrite has an empty title".into()));
    }
    Ok(rewrite)
}
