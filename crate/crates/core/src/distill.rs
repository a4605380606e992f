//! Rationale-distillation records and a reference loss.
//!
//! With labels, a record always targets the gold answer and carries the
//! teacher's rationale only when the teacher agreed with the gold label.
//! Without labels, the teacher's answer and rationale are both targets.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Answer, BackendKind};
use crate::engine::DetectionResult;
use crate::promptgen::Templates;
use crate::tree::ContextTree;

pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("no gold label for detection {0:?}")]
    MissingGoldLabel(String),
    #[error("answer log-probabilities are empty")]
    EmptyAnswer,
    #[error("log-probability {0} is not a finite value <= 0")]
    InvalidLogprob(f64),
    #[error("lambda must be finite and >= 0, got {0}")]
    InvalidLambda(f64),
    #[error("record line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMode {
    WithLabels,
    WithoutLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelSource {
    LlmLabel,
    HumanLabel,
}

/// One fine-tuning example. Field order is the serialized order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub id: String,
    pub input: String,
    pub target_answer: Answer,
    pub target_rationale: Option<String>,
    pub rationale_mask: bool,
    pub label_source: LabelSource,
}

impl DistillRecord {
    /// Yes -> 1, No -> 0.
    pub fn target_label(&self) -> u8 {
        self.target_answer.label().unwrap_or(0)
    }
}

/// The student sees the plain white-box question at the tree root.
pub fn student_input(statement: &str, tree: &ContextTree, templates: &Templates) -> String {
    let root = tree.node(tree.root()).expect("root exists");
    templates.render_detection(statement, root, BackendKind::WhiteBox, &[]).text
}

pub fn build_records(
    detections: &[DetectionResult],
    gold_labels: Option<&HashMap<String, u8>>,
    mode: DistillMode,
    tree: &ContextTree,
    templates: &Templates,
) -> Result<Vec<DistillRecord>, DistillError> {
    let mut records = Vec::with_capacity(detections.len());
    let mut skipped = 0usize;
    for d in detections {
        let gold = match mode {
            DistillMode::WithLabels => Some(
                *gold_labels
                    .and_then(|g| g.get(&d.statement_id))
                    .ok_or_else(|| DistillError::MissingGoldLabel(d.statement_id.clone()))?,
            ),
            DistillMode::WithoutLabels => None,
        };
        let Some(predicted) = d.answer.label() else {
            skipped += 1;
            continue;
        };
        let input = student_input(&d.statement, tree, templates);
        let record = match gold {
            Some(y) => {
                let agree = predicted == y;
                DistillRecord {
                    id: d.statement_id.clone(),
                    input,
                    target_answer: Answer::from_label(y),
                    target_rationale: agree.then(|| d.rationale.clone()),
                    rationale_mask: agree,
                    label_source: LabelSource::HumanLabel,
                }
            }
            None => DistillRecord {
                id: d.statement_id.clone(),
                input,
                target_answer: d.answer,
                target_rationale: Some(d.rationale.clone()),
                rationale_mask: true,
                label_source: LabelSource::LlmLabel,
            },
        };
        records.push(record);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} detections with an unparsed answer");
    }
    Ok(records)
}

/// Fraction of records whose rationale is kept. With gold labels this is
/// the teacher's agreement rate over the parsed detections.
pub fn mask_rate(records: &[DistillRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let kept = records.iter().filter(|r| r.rationale_mask).count();
    Some(kept as f64 / records.len() as f64)
}

pub fn export_jsonl<W: Write>(records: &[DistillRecord], mut out: W) -> Result<usize, DistillError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records.len())
}

pub fn import_jsonl<R: BufRead>(input: R) -> Result<Vec<DistillRecord>, DistillError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| DistillError::Parse { line: i + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub answer_ce: f64,
    /// Zero when the rationale is masked out.
    pub rationale_ce: f64,
    pub lambda: f64,
    pub total: f64,
}

fn mean_ce(logprobs: &[f64]) -> Result<f64, DistillError> {
    if let Some(&bad) = logprobs.iter().find(|lp| !lp.is_finite() || **lp > 0.0) {
        return Err(DistillError::InvalidLogprob(bad));
    }
    if logprobs.is_empty() {
        return Ok(0.0);
    }
    Ok(-logprobs.iter().sum::<f64>() / logprobs.len() as f64)
}

/// Token-averaged cross-entropy of the answer plus `lambda` times that of
/// the rationale when `mask` is set. Rationale inputs are ignored otherwise.
pub fn distill_loss(
    answer_logprobs: &[f64],
    rationale_logprobs: &[f64],
    mask: bool,
    lambda: f64,
) -> Result<LossBreakdown, DistillError> {
    if answer_logprobs.is_empty() {
        return Err(DistillError::EmptyAnswer);
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(DistillError::InvalidLambda(lambda));
    }
    let answer_ce = mean_ce(answer_logprobs)?;
    let rationale_ce = if mask { mean_ce(rationale_logprobs)? } else { 0.0 };
    Ok(LossBreakdown { answer_ce, rationale_ce, lambda, total: answer_ce + lambda * rationale_ce })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::Decision;
    use crate::tree::default_tree;
    use proptest::prelude::*;

    fn det(id: &str, answer: Answer, rationale: &str) -> DetectionResult {
        DetectionResult {
            statement_id: id.into(),
            statement: format!("statement {id}"),
            answer,
            rationale: rationale.into(),
            final_confidence: 1.0,
            final_decision: Decision::Confident,
            toxicity_rating: Some(95),
            returned_step: 0,
            trace: Vec::new(),
        }
    }

    fn build(
        ds: &[DetectionResult],
        gold: Option<&HashMap<String, u8>>,
        mode: DistillMode,
    ) -> Vec<DistillRecord> {
        build_records(ds, gold, mode, &default_tree(), &Templates::builtin()).unwrap()
    }

    #[test]
    fn with_labels_agreement_and_disagreement() {
        let ds = [det("a", Answer::Yes, "slur"), det("b", Answer::Yes, "mean")];
        let gold: HashMap<_, _> = [("a".to_string(), 1), ("b".to_string(), 0)].into();
        let r = build(&ds, Some(&gold), DistillMode::WithLabels);
        assert_eq!(r[0].target_answer, Answer::Yes);
        assert_eq!(r[0].target_rationale.as_deref(), Some("slur"));
        assert!(r[0].rationale_mask);
        assert_eq!(r[1].target_answer, Answer::No);
        assert_eq!(r[1].target_rationale, None);
        assert!(!r[1].rationale_mask);
        assert_eq!(r[1].target_label(), 0);
        assert_eq!(mask_rate(&r), Some(0.5));
    }

    #[test]
    fn without_labels_uses_teacher() {
        let r = build(&[det("a", Answer::No, "benign")], None, DistillMode::WithoutLabels);
        assert_eq!(r[0].target_answer, Answer::No);
        assert_eq!(r[0].target_rationale.as_deref(), Some("benign"));
        assert!(r[0].rationale_mask);
        assert_eq!(r[0].label_source, LabelSource::LlmLabel);
        assert!(r[0].input.starts_with("Toxic"), "{}", r[0].input);
        assert!(r[0].input.contains("\"statement a\""));
    }

    #[test]
    fn missing_gold_and_unparsed() {
        let ds = [det("a", Answer::Yes, "x")];
        let err = build_records(
            &ds,
            Some(&HashMap::new()),
            DistillMode::WithLabels,
            &default_tree(),
            &Templates::builtin(),
        );
        assert!(matches!(err, Err(DistillError::MissingGoldLabel(id)) if id == "a"));
        let r = build(&[det("u", Answer::Unparsed, "")], None, DistillMode::WithoutLabels);
        assert!(r.is_empty());
        assert_eq!(mask_rate(&r), None);
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = [
            det("a", Answer::Yes, "line one\nline \"two\""),
            det("b", Answer::No, "ok"),
            det("c", Answer::Yes, ""),
        ];
        let r = build(&ds, None, DistillMode::WithoutLabels);
        let mut buf = Vec::new();
        assert_eq!(export_jsonl(&r, &mut buf).unwrap(), 3);
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("{\"id\":\"a\",\"input\":"));
        assert_eq!(import_jsonl(buf.as_slice()).unwrap(), r);

        let mut empty = Vec::new();
        assert_eq!(export_jsonl(&[], &mut empty).unwrap(), 0);
        assert!(empty.is_empty());
    }

    #[test]
    fn loss_examples() {
        let l = distill_loss(&[-0.1, -0.3], &[-0.2], true, 1.0).unwrap();
        assert!((l.answer_ce - 0.2).abs() < 1e-12);
        assert!((l.rationale_ce - 0.2).abs() < 1e-12);
        assert!((l.total - 0.4).abs() < 1e-12);
        let l = distill_loss(&[-0.1, -0.3], &[-0.2], false, 1.0).unwrap();
        assert!((l.total - 0.2).abs() < 1e-12);
        let l = distill_loss(&[-0.1, -0.3], &[-0.2], true, 0.0).unwrap();
        assert_eq!(l.total, l.answer_ce);
    }

    #[test]
    fn loss_errors() {
        assert!(matches!(distill_loss(&[], &[-1.0], true, 1.0), Err(DistillError::EmptyAnswer)));
        assert!(matches!(distill_loss(&[0.5], &[], true, 1.0), Err(DistillError::InvalidLogprob(_))));
        assert!(matches!(distill_loss(&[-0.5], &[], true, -1.0), Err(DistillError::InvalidLambda(_))));
    }

    proptest! {
        #[test]
        fn loss_linear_in_lambda(a in prop::collection::vec(-5.0f64..0.0, 1..8), r in prop::collection::vec(-5.0f64..0.0, 1..8), lambda in 0.0f64..4.0) {
            let l0 = distill_loss(&a, &r, true, 0.0).unwrap().total;
            let l1 = distill_loss(&a, &r, true, 1.0).unwrap().total;
            let l = distill_loss(&a, &r, true, lambda).unwrap().total;
            prop_assert!((l - (l0 + lambda * (l1 - l0))).abs() < 1e-9);
        }

        #[test]
        fn masked_loss_ignores_rationale(a in prop::collection::vec(-5.0f64..0.0, 1..8), r1 in prop::collection::vec(-5.0f64..0.0, 0..8), r2 in prop::collection::vec(-5.0f64..0.0, 0..8)) {
            prop_assert_eq!(distill_loss(&a, &r1, false, 1.0).unwrap(), distill_loss(&a, &r2, false, 1.0).unwrap());
        }
    }
}
