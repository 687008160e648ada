use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Version recorded for the templates compiled into the crate. Bump on any edit.
pub const BUILTIN_TEMPLATE_VERSION: &str = "builtin-v1";

const FILES: [&str; 12] = [
    "system",
    "reference_block",
    "example",
    "image_line",
    "weight_user",
    "weight_format",
    "reasoning_format",
    "counterfactual_user",
    "counterfactual_format",
    "judge_validate",
    "judge_polarity",
    "judge_system",
];

/// Prompt templates with `{placeholder}` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub version: String,
    pub system: String,
    pub reference_block: String,
    pub example: String,
    pub image_line: String,
    pub weight_user: String,
    pub weight_format: String,
    pub reasoning_format: String,
    pub counterfactual_user: String,
    pub counterfactual_format: String,
    pub judge_validate: String,
    pub judge_polarity: String,
    pub judge_system: String,
}

fn clean(s: &str) -> String {
    s.trim_end_matches(['\n', '\r']).to_owned()
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            version: BUILTIN_TEMPLATE_VERSION.to_owned(),
            system: clean(include_str!("../../templates/system.txt")),
            reference_block: clean(include_str!("../../templates/reference_block.txt")),
            example: clean(include_str!("../../templates/example.txt")),
            image_line: clean(include_str!("../../templates/image_line.txt")),
            weight_user: clean(include_str!("../../templates/weight_user.txt")),
            weight_format: clean(include_str!("../../templates/weight_format.txt")),
            reasoning_format: clean(include_str!("../../templates/reasoning_format.txt")),
            counterfactual_user: clean(include_str!("../../templates/counterfactual_user.txt")),
            counterfactual_format: clean(include_str!("../../templates/counterfactual_format.txt")),
            judge_validate: clean(include_str!("../../templates/judge_validate.txt")),
            judge_polarity: clean(include_str!("../../templates/judge_polarity.txt")),
            judge_system: JUDGE_SYSTEM.to_owned(),
        }
    }

    /// Loads `<name>.txt` for every template from `dir`; files that are absent
    /// keep the built-in text. The version is derived from the content hash.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::Config(format!("template dir {} does not exist", dir.display())));
        }
        let mut set = Self::builtin();
        for name in FILES {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                continue;
            }
            let text = clean(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?);
            *set.slot_mut(name) = text;
        }
        let mut hasher = Sha256::new();
        for name in FILES {
            hasher.update(name.as_bytes());
            hasher.update([0]);
            hasher.update(set.slot_mut(name).as_bytes());
            hasher.update([0]);
        }
        let digest = hasher.finalize();
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        set.version = if set == Self::builtin_with_version(&set.version) {
            BUILTIN_TEMPLATE_VERSION.to_owned()
        } else {
            format!("custom-{hex}")
        };
        Ok(set)
    }

    fn builtin_with_version(version: &str) -> Self {
        Self {
            version: version.to_owned(),
            ..Self::builtin()
        }
    }

    fn slot_mut(&mut self, name: &str) -> &mut String {
        match name {
            "system" => &mut self.system,
            "reference_block" => &mut self.reference_block,
            "example" => &mut self.example,
            "image_line" => &mut self.image_line,
            "weight_user" => &mut self.weight_user,
            "weight_format" => &mut self.weight_format,
            "reasoning_format" => &mut self.reasoning_format,
            "counterfactual_user" => &mut self.counterfactual_user,
            "counterfactual_format" => &mut self.counterfactual_format,
            "judge_validate" => &mut self.judge_validate,
            "judge_polarity" => &mut self.judge_polarity,
            "judge_system" => &mut self.judge_system,
            other => unreachable!("unknown template {other}"),
        }
    }
}

const JUDGE_SYSTEM: &str = "You are a careful reviewer of advertising relevance judgements. You answer strictly in the requested format.";

/// Substitutes `{name}` slots in a single pass.
///
/// Braces that do not enclose a known slot name (such as literal JSON in an
/// output-format block) are left untouched, and substituted values are never
/// rescanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        let name = &after[..name_len];
        let closed = after[name_len..].starts_with('}');
        match vars.iter().find(|(k, _)| *k == name) {
            Some((_, value)) if closed && !name.is_empty() => {
                out.push_str(value);
                rest = &after[name_len + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
