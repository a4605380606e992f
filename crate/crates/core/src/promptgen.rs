//! Prompt rendering.
//!
//! Detection prompts rewrite the question for the current context: at the
//! root it asks about toxic content, at a child it asks about that child's
//! category. The built-in templates are locked by the files under `golden/`.
//!
//! Templates use `{name}` placeholders. Unknown names are rejected when a
//! template is loaded; substitution is single-pass, so statement text that
//! happens to contain `{category}` is inserted verbatim.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::BackendKind;
use crate::tree::ContextNode;

pub const DETECT_BLACK_BOX: &str = "Context: {context}.
{demos}Sentence: {statement}.
Does this sentence contain {category} content?
First, answer in \"Yes\" or \"No\".
Second, rate the {category} level out of 100.
Third, explain your rationale briefly.
The output format is given below:
Answer: ...
{category} level: .../100.
Rationale: ...";

pub const DETECT_WHITE_BOX: &str = "{context}.
{demos}### Human: \"{statement}\". Does this sentence contain {category} content? Answer yes or no, and explain your answer.
### Assistant:";

pub const CLASSIFY: &str = "Rationale: {rationale}
Which one of the following categories is the rationale above most relevant to?
{menu}
Answer with the category name only.";

pub const NO_RATIONALE: &str = "(no rationale given)";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("failed to read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template {name}: unknown placeholder {{{placeholder}}}")]
    UnknownPlaceholder { name: String, placeholder: String },
    #[error("template {name}: missing required placeholder {{{placeholder}}}")]
    MissingPlaceholder { name: String, placeholder: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptVariant {
    DetectBlackBox,
    DetectWhiteBox,
    Classify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub variant: PromptVariant,
    pub context_category: String,
    pub demo_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoLabel {
    Toxic,
    Benign,
}

impl DemoLabel {
    pub fn from_label(label: u8) -> Self {
        if label == 1 {
            DemoLabel::Toxic
        } else {
            DemoLabel::Benign
        }
    }
}

impl fmt::Display for DemoLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DemoLabel::Toxic => "toxic",
            DemoLabel::Benign => "benign",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub statement: String,
    pub label: DemoLabel,
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    name: &'static str,
    source: String,
}

const DETECT_PLACEHOLDERS: &[&str] = &["context", "demos", "statement", "category"];
const CLASSIFY_PLACEHOLDERS: &[&str] = &["rationale", "menu"];

enum Piece<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

fn pieces(source: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = source;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name_ok = close
            .map(|c| {
                !after[..c].is_empty() && after[..c].chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_')
            })
            .unwrap_or(false);
        if name_ok {
            let c = close.unwrap();
            out.push(Piece::Literal(&rest[..open]));
            out.push(Piece::Slot(&after[..c]));
            rest = &after[c + 1..];
        } else {
            out.push(Piece::Literal(&rest[..=open]));
            rest = after;
        }
    }
    out.push(Piece::Literal(rest));
    out
}

impl Template {
    fn new(
        name: &'static str,
        source: String,
        allowed: &[&str],
        required: &[&str],
    ) -> Result<Self, TemplateError> {
        let mut seen = Vec::new();
        for piece in pieces(&source) {
            if let Piece::Slot(slot) = piece {
                if !allowed.contains(&slot) {
                    return Err(TemplateError::UnknownPlaceholder {
                        name: name.into(),
                        placeholder: slot.into(),
                    });
                }
                seen.push(slot.to_string());
            }
        }
        for req in required {
            if !seen.iter().any(|s| s == req) {
                return Err(TemplateError::MissingPlaceholder {
                    name: name.into(),
                    placeholder: (*req).into(),
                });
            }
        }
        Ok(Template { name, source })
    }

    pub fn name(&self) -> &str {
        self.name
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.source.len() + 256);
        for piece in pieces(&self.source) {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(slot) => {
                    let v = values.iter().find(|(k, _)| *k == slot).map(|(_, v)| *v).unwrap_or_default();
                    out.push_str(v);
                }
            }
        }
        out
    }
}

/// The three prompt templates used by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub detect_black_box: Template,
    pub detect_white_box: Template,
    pub classify: Template,
}

impl Default for Templates {
    fn default() -> Self {
        Templates::builtin()
    }
}

impl Templates {
    pub fn builtin() -> Self {
        Templates::from_sources(DETECT_BLACK_BOX, DETECT_WHITE_BOX, CLASSIFY)
            .expect("built-in templates are valid")
    }

    pub fn from_sources(
        detect_black_box: &str,
        detect_white_box: &str,
        classify: &str,
    ) -> Result<Self, TemplateError> {
        Ok(Templates {
            detect_black_box: Template::new(
                "detect_blackbox",
                detect_black_box.to_string(),
                DETECT_PLACEHOLDERS,
                &["statement"],
            )?,
            detect_white_box: Template::new(
                "detect_whitebox",
                detect_white_box.to_string(),
                DETECT_PLACEHOLDERS,
                &["statement"],
            )?,
            classify: Template::new("classify", classify.to_string(), CLASSIFY_PLACEHOLDERS, &["menu"])?,
        })
    }

    /// Loads `detect_blackbox.txt`, `detect_whitebox.txt` and `classify.txt`
    /// from `dir`; files that do not exist keep the built-in template. One
    /// trailing newline is stripped from each file.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let dir = dir.as_ref();
        let read = |file: &str, fallback: &str| -> Result<String, TemplateError> {
            let path = dir.join(file);
            match std::fs::read_to_string(&path) {
                Ok(s) => Ok(s
                    .strip_suffix('\n')
                    .map(|t| t.strip_suffix('\r').unwrap_or(t))
                    .unwrap_or(&s)
                    .to_string()),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(fallback.to_string()),
                Err(source) => Err(TemplateError::Io { path: path.display().to_string(), source }),
            }
        };
        Templates::from_sources(
            &read("detect_blackbox.txt", DETECT_BLACK_BOX)?,
            &read("detect_whitebox.txt", DETECT_WHITE_BOX)?,
            &read("classify.txt", CLASSIFY)?,
        )
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in [&self.detect_black_box, &self.detect_white_box, &self.classify] {
            h.update(t.name.as_bytes());
            h.update([0]);
            h.update(t.source.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }

    pub fn render_detection(
        &self,
        statement: &str,
        node: &ContextNode,
        kind: BackendKind,
        demos: &[Demonstration],
    ) -> RenderedPrompt {
        let (template, variant) = match kind {
            BackendKind::BlackBox => (&self.detect_black_box, PromptVariant::DetectBlackBox),
            BackendKind::WhiteBox => (&self.detect_white_box, PromptVariant::DetectWhiteBox),
        };
        let demo_block = render_demos(demos);
        let text = template.render(&[
            ("context", without_final_period(node.context_text())),
            ("demos", &demo_block),
            ("statement", without_final_period(statement)),
            ("category", node.category()),
        ]);
        RenderedPrompt {
            text,
            variant,
            context_category: node.category().to_string(),
            demo_count: demos.len(),
        }
    }

    /// `context_category` is the context the rationale was produced under; it
    /// is carried on the prompt for scenario keying and traces.
    pub fn render_classification(
        &self,
        rationale: &str,
        categories: &[&str],
        context_category: &str,
    ) -> RenderedPrompt {
        let menu = categories
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {c}", i + 1))
            .collect::<Vec<_>>()
            .join("\n");
        let rationale = rationale.trim();
        let rationale = if rationale.is_empty() { NO_RATIONALE } else { rationale };
        RenderedPrompt {
            text: self.classify.render(&[("rationale", rationale), ("menu", &menu)]),
            variant: PromptVariant::Classify,
            context_category: context_category.to_string(),
            demo_count: 0,
        }
    }
}

/// The templates add their own terminating period.
fn without_final_period(text: &str) -> &str {
    let t = text.trim();
    t.strip_suffix('.').unwrap_or(t)
}

/// Demonstrations are written as numbered example blocks, each followed by a
/// blank line, in the order given.
fn render_demos(demos: &[Demonstration]) -> String {
    let mut out = String::new();
    for (i, d) in demos.iter().enumerate() {
        let answer = match d.label {
            DemoLabel::Toxic => "Yes",
            DemoLabel::Benign => "No",
        };
        out.push_str(&format!(
            "Example {}:\nSentence: {}.\nAnswer: {answer}\n",
            i + 1,
            without_final_period(&d.statement)
        ));
        if let Some(r) = &d.rationale {
            out.push_str(&format!("Rationale: {}\n", r.trim()));
        }
        out.push('\n');
    }
    out
}
