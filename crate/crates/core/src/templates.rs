//! Versioned prompt templates with `{name}` placeholders.
//!
//! The first line of every bundled template is `### task: <task> v<n>`, which
//! is also how the mock chat backend recognizes what it is being asked.

use std::collections::BTreeMap;
use std::path::Path;

use crate::digest::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template {template}: no value for placeholder {{{name}}}")]
    MissingValue { template: String, name: String },
    #[error("unknown template {0}")]
    Unknown(String),
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    text: String,
}

impl Template {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            text: text.into(),
        }
    }

    pub fn from_file(name: &str, path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|source| TemplateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::new(name, text))
    }

    /// Bundled template by name (`conversation`, `noun_phrases`, `judge_qa`, ...).
    pub fn builtin(name: &str) -> Result<Self, TemplateError> {
        BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(n, text)| Self::new(*n, *text))
            .ok_or_else(|| TemplateError::Unknown(name.to_string()))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// SHA-256 of the template text; reports cite this.
    pub fn hash(&self) -> String {
        sha256_hex(self.text.as_bytes())
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for (_, name, _) in scan(&self.text) {
            if !out.contains(&name) {
                out.push(name);
            }
        }
        out
    }

    /// Single-pass substitution; values are never re-scanned for placeholders.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len());
        let mut at = 0;
        for (start, name, end) in scan(&self.text) {
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::MissingValue {
                    template: self.name.clone(),
                    name: name.to_string(),
                })?;
            out.push_str(&self.text[at..start]);
            out.push_str(value);
            at = end;
        }
        out.push_str(&self.text[at..]);
        Ok(out)
    }
}

/// `(start, name, end)` for every `{identifier}` in `text`.
fn scan(text: &str) -> Vec<(usize, &str, usize)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j].is_ascii_digit() || bytes[j] == b'_') {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                out.push((i, &text[i + 1..j], j + 1));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Task tag from a rendered prompt's first line, e.g. `judge_qa`.
pub fn task_of(prompt: &str) -> Option<&str> {
    let first = prompt.lines().next()?;
    let rest = first.strip_prefix("### task: ")?;
    rest.split_whitespace().next()
}

const BUILTIN: &[(&str, &str)] = &[
    ("conversation", include_str!("../templates/conversation_v1.txt")),
    ("noun_phrases", include_str!("../templates/noun_phrases_v1.txt")),
    ("entity_match", include_str!("../templates/entity_match_v1.txt")),
    ("mine_questions", include_str!("../templates/mine_questions_v1.txt")),
    ("answer", include_str!("../templates/answer_v1.txt")),
    ("judge_correctness", include_str!("../templates/judge_correctness_v1.txt")),
    ("judge_detail", include_str!("../templates/judge_detail_v1.txt")),
    ("judge_context", include_str!("../templates/judge_context_v1.txt")),
    ("judge_temporal", include_str!("../templates/judge_temporal_v1.txt")),
    ("judge_consistency", include_str!("../templates/judge_consistency_v1.txt")),
    ("judge_qa", include_str!("../templates/judge_qa_v1.txt")),
];

/// Names of all bundled templates.
pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

/// Name → hash for a set of templates, as recorded in manifests.
pub fn hashes<'a>(templates: impl IntoIterator<Item = &'a Template>) -> BTreeMap<String, String> {
    templates
        .into_iter()
        .map(|t| (t.name().to_string(), t.hash()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_substitutes_once() {
        let t = Template::new("t", "a {x} b {y} {x}");
        assert_eq!(t.render(&[("x", "{y}"), ("y", "2")]).unwrap(), "a {y} b 2 {y}");
    }

    #[test]
    fn json_braces_are_not_placeholders() {
        let t = Template::builtin("judge_qa").unwrap();
        assert_eq!(t.placeholders(), vec!["question", "reference", "prediction"]);
    }

    #[test]
    fn missing_value_is_an_error() {
        let t = Template::new("t", "{a}");
        assert!(matches!(t.render(&[]), Err(TemplateError::MissingValue { .. })));
    }

    #[test]
    fn every_builtin_carries_its_task_tag() {
        for name in builtin_names() {
            let t = Template::builtin(name).unwrap();
            assert_eq!(task_of(t.text()), Some(name));
        }
    }

    #[test]
    fn hash_is_stable_hex() {
        let h = Template::new("t", "abc").hash();
        assert_eq!(h, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
