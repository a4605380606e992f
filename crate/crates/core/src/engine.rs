//! The detection loop.
//!
//! Starting at the root context, each step renders a prompt, queries the
//! model and checks confidence. A confident answer ends the run. An
//! unconfident answer moves to the most relevant child context, as long as
//! the current node has children and the step budget allows another step.
//! When neither holds, the last answer is returned (or the most confident one
//! with `return_best`).

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Answer, Backend, BackendError, BackendKind, Call, ModelResponse};
use crate::confidence::{
    check, confidence_score, AnswerLogprobs, AnswerProbability, ConfidenceConfig, ConfidenceError,
    ConfidenceVerdict, Decision,
};
use crate::promptgen::{Demonstration, RenderedPrompt, Templates};
use crate::selector::{
    candidate_rationales, relevance_blackbox, relevance_whitebox, select, RelevanceMode, RelevanceScores,
    SelectorError,
};
use crate::tree::{ContextTree, NodeId};

pub const YES_VERBALIZER: &str = "Yes";
pub const NO_VERBALIZER: &str = "No";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FewShotMode {
    #[default]
    ZeroShot,
    /// K nearest toxic and K nearest benign demonstrations.
    Fs,
    /// As `Fs`, with each demonstration's stored rationale.
    Fsr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtotConfig {
    pub max_steps: usize,
    pub confidence: ConfidenceConfig,
    pub mode: FewShotMode,
    /// Demonstrations per class.
    pub k: usize,
    pub return_best: bool,
    pub relevance: RelevanceMode,
}

impl Default for DtotConfig {
    fn default() -> Self {
        DtotConfig {
            max_steps: 2,
            confidence: ConfidenceConfig::default(),
            mode: FewShotMode::ZeroShot,
            k: 3,
            return_best: false,
            relevance: RelevanceMode::LengthNormalized,
        }
    }
}

impl DtotConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_steps == 0 {
            return Err("max steps must be at least 1".into());
        }
        if self.mode != FewShotMode::ZeroShot && self.k == 0 {
            return Err("few-shot modes need k >= 1".into());
        }
        self.confidence.validate().map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub id: String,
    pub text: String,
}

impl Statement {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Statement { id: id.into(), text: text.into() }
    }
}

/// Supplies few-shot demonstrations for a statement.
pub trait DemoSource: Send + Sync {
    fn demonstrations(
        &self,
        statement: &Statement,
        mode: FewShotMode,
        k: usize,
    ) -> Result<Vec<Demonstration>, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedChild {
    pub index: usize,
    pub category: String,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub context_category: String,
    pub prompt: RenderedPrompt,
    pub response: ModelResponse,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_logprobs: Option<AnswerLogprobs>,
    pub verdict: ConfidenceVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<RelevanceScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification_reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_child: Option<SelectedChild>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub statement_id: String,
    pub statement: String,
    pub answer: Answer,
    pub rationale: String,
    pub final_confidence: f64,
    pub final_decision: Decision,
    pub toxicity_rating: Option<u8>,
    /// Index into `trace` of the step whose answer is returned.
    pub returned_step: usize,
    pub trace: Vec<StepRecord>,
}

impl DetectionResult {
    pub fn context_path(&self) -> Vec<&str> {
        self.trace.iter().map(|s| s.context_category.as_str()).collect()
    }
}

#[derive(Debug, Error)]
pub enum DetectErrorKind {
    #[error(transparent)]
    Backend(Box<BackendError>),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error("few-shot retrieval failed: {0}")]
    Demonstrations(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl From<BackendError> for DetectErrorKind {
    fn from(e: BackendError) -> Self {
        DetectErrorKind::Backend(Box::new(e))
    }
}

#[derive(Debug, Error)]
#[error("detection failed for statement {statement_id:?} after {} step(s): {kind}", trace.len())]
pub struct DetectError {
    pub statement_id: String,
    pub kind: DetectErrorKind,
    pub trace: Vec<StepRecord>,
}

type DetectOutcome = Result<DetectionResult, DetectError>;

pub struct Detector<'a> {
    tree: &'a ContextTree,
    backend: &'a dyn Backend,
    templates: &'a Templates,
    config: DtotConfig,
    demos: Option<&'a dyn DemoSource>,
}

impl<'a> Detector<'a> {
    pub fn new(
        tree: &'a ContextTree,
        backend: &'a dyn Backend,
        templates: &'a Templates,
        config: DtotConfig,
    ) -> Self {
        Detector { tree, backend, templates, config, demos: None }
    }

    pub fn with_demonstrations(mut self, source: &'a dyn DemoSource) -> Self {
        self.demos = Some(source);
        self
    }

    pub fn config(&self) -> &DtotConfig {
        &self.config
    }

    pub fn detect(&self, statement: &Statement) -> Result<DetectionResult, DetectError> {
        let mut trace = Vec::new();
        match self.run(statement, &mut trace) {
            Ok(returned_step) => Ok(self.finish(statement, trace, returned_step)),
            Err(kind) => Err(DetectError { statement_id: statement.id.clone(), kind, trace }),
        }
    }

    fn demonstrations(&self, statement: &Statement) -> Result<Vec<Demonstration>, DetectErrorKind> {
        if self.config.mode == FewShotMode::ZeroShot {
            return Ok(Vec::new());
        }
        let source = self
            .demos
            .ok_or_else(|| DetectErrorKind::Config("few-shot mode requires a demonstration source".into()))?;
        source
            .demonstrations(statement, self.config.mode, self.config.k)
            .map_err(DetectErrorKind::Demonstrations)
    }

    fn answer_logprobs(
        &self,
        call: &Call<'_>,
        response: &ModelResponse,
    ) -> Result<Option<AnswerLogprobs>, BackendError> {
        if self.backend.kind() != BackendKind::WhiteBox || response.answer == Answer::Unparsed {
            return Ok(None);
        }
        let yes = self.backend.sequence_logprob(call, YES_VERBALIZER)?;
        let no = self.backend.sequence_logprob(call, NO_VERBALIZER)?;
        let full = match self.config.confidence.answer_probability {
            AnswerProbability::Raw if !response.raw_text.trim().is_empty() => {
                Some(self.backend.sequence_logprob(call, response.raw_text.trim())?)
            }
            _ => None,
        };
        Ok(Some(AnswerLogprobs { yes, no, full }))
    }

    /// Runs the loop, appending to `trace`; returns the index of the step to report.
    fn run(&self, statement: &Statement, trace: &mut Vec<StepRecord>) -> Result<usize, DetectErrorKind> {
        self.config.validate().map_err(DetectErrorKind::Config)?;
        let demos = self.demonstrations(statement)?;
        let kind = self.backend.kind();
        let mut node_id: NodeId = self.tree.root();

        for step in 0..self.config.max_steps {
            let node = self.tree.node(node_id).expect("node ids come from this tree");
            let prompt = self.templates.render_detection(&statement.text, node, kind, &demos);
            let call = Call::new(&statement.id, &prompt);
            let response = self.backend.complete(&call)?;
            let answer_logprobs = self.answer_logprobs(&call, &response)?;

            let mut score =
                confidence_score(&response, kind, &self.config.confidence, answer_logprobs.as_ref());
            if response.answer == Answer::Unparsed {
                if score > 0.0 {
                    log::warn!(
                        "statement {}: rated answer without a parseable Yes/No at step {step}; treating as unconfident",
                        statement.id
                    );
                }
                score = 0.0;
            }
            let verdict = check(score, &self.config.confidence)?;

            trace.push(StepRecord {
                step,
                context_category: node.category().to_string(),
                prompt,
                response,
                answer_logprobs,
                verdict,
                relevance: None,
                classification_reply: None,
                selected_child: None,
            });

            let children = self.tree.children(node_id).expect("node ids come from this tree");
            if verdict.is_confident() || children.is_empty() || step + 1 >= self.config.max_steps {
                break;
            }

            let categories: Vec<&str> = children
                .iter()
                .map(|&c| self.tree.node(c).expect("child of a known node").category())
                .collect();
            let record = trace.last_mut().expect("just pushed");
            let scores = match kind {
                BackendKind::BlackBox => {
                    let (scores, _, reply) = relevance_blackbox(
                        self.backend,
                        self.templates,
                        &statement.id,
                        &record.response.rationale,
                        &categories,
                        node.category(),
                    )?;
                    record.classification_reply = Some(reply.raw_text);
                    scores
                }
                BackendKind::WhiteBox => {
                    let call = Call::new(&statement.id, &record.prompt);
                    relevance_whitebox(
                        self.backend,
                        &call,
                        &candidate_rationales(&categories),
                        self.config.relevance,
                    )?
                }
            };
            let selection = select(&scores)?;
            if selection.fallback {
                log::warn!(
                    "statement {}: classification named no child of {:?}; defaulting to {:?}",
                    statement.id,
                    node.category(),
                    categories[selection.index]
                );
            }
            record.relevance = Some(scores);
            record.selected_child = Some(SelectedChild {
                index: selection.index,
                category: categories[selection.index].to_string(),
                fallback: selection.fallback,
            });
            node_id = children[selection.index];
        }

        let last = trace.len() - 1;
        if self.config.return_best && !trace[last].verdict.is_confident() {
            // First step attaining the highest score.
            let best = trace.iter().enumerate().fold(0, |b, (i, s)| {
                if s.verdict.score > trace[b].verdict.score {
                    i
                } else {
                    b
                }
            });
            return Ok(best);
        }
        Ok(last)
    }

    fn finish(&self, statement: &Statement, trace: Vec<StepRecord>, returned_step: usize) -> DetectionResult {
        let chosen = &trace[returned_step];
        DetectionResult {
            statement_id: statement.id.clone(),
            statement: statement.text.clone(),
            answer: chosen.response.answer,
            rationale: chosen.response.rationale.clone(),
            final_confidence: chosen.verdict.score,
            final_decision: chosen.verdict.decision,
            toxicity_rating: chosen.response.toxicity_rating,
            returned_step,
            trace,
        }
    }
}

/// Runs `detect` over `statements` with up to `parallelism` worker threads.
/// Output order follows input order; failures are kept per statement.
pub fn detect_batch(
    detector: &Detector<'_>,
    statements: &[Statement],
    parallelism: usize,
) -> Vec<Result<DetectionResult, DetectError>> {
    let workers = parallelism.max(1).min(statements.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<DetectOutcome>>> = Mutex::new((0..statements.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(statement) = statements.get(i) else {
                    break;
                };
                let outcome = detector.detect(statement);
                slots.lock().unwrap()[i] = Some(outcome);
            });
        }
    });

    slots.into_inner().unwrap().into_iter().map(|slot| slot.expect("every index is processed")).collect()
}

/// One JSONL trace line: a step plus the statement it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub statement_id: String,
    pub statement: String,
    /// True for the step whose answer the run returned.
    pub returned: bool,
    #[serde(flatten)]
    pub record: StepRecord,
}

pub fn trace_lines(result: &DetectionResult) -> impl Iterator<Item = TraceLine> + '_ {
    result.trace.iter().enumerate().map(|(i, record)| TraceLine {
        statement_id: result.statement_id.clone(),
        statement: result.statement.clone(),
        returned: i == result.returned_step,
        record: record.clone(),
    })
}

pub fn write_trace<W: Write>(mut out: W, results: &[DetectionResult]) -> std::io::Result<usize> {
    let mut n = 0;
    for r in results {
        for line in trace_lines(r) {
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
            n += 1;
        }
    }
    Ok(n)
}

#[derive(Debug, Error)]
pub enum TraceReadError {
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("statement {0:?} has no returned step in the trace")]
    NoReturnedStep(String),
}

/// Rebuilds detection results from a JSONL trace, in first-seen order.
pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<DetectionResult>, TraceReadError> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: std::collections::HashMap<String, Vec<TraceLine>> = Default::default();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine =
            serde_json::from_str(&line).map_err(|source| TraceReadError::Parse { line: i + 1, source })?;
        if !grouped.contains_key(&parsed.statement_id) {
            order.push(parsed.statement_id.clone());
        }
        grouped.entry(parsed.statement_id.clone()).or_default().push(parsed);
    }
    order
        .into_iter()
        .map(|id| {
            let mut lines = grouped.remove(&id).unwrap();
            lines.sort_by_key(|l| l.record.step);
            let returned_step = lines
                .iter()
                .position(|l| l.returned)
                .ok_or_else(|| TraceReadError::NoReturnedStep(id.clone()))?;
            let statement = lines[0].statement.clone();
            let trace: Vec<StepRecord> = lines.into_iter().map(|l| l.record).collect();
            let chosen = &trace[returned_step];
            Ok(DetectionResult {
                statement_id: id,
                statement,
                answer: chosen.response.answer,
                rationale: chosen.response.rationale.clone(),
                final_confidence: chosen.verdict.score,
                final_decision: chosen.verdict.decision,
                toxicity_rating: chosen.response.toxicity_rating,
                returned_step,
                trace,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{LogprobEntry, ScenarioEntry, ScenarioVariant, ScriptedBackend};
    use crate::tree::default_tree;

    fn detect_entry(id: &str, category: &str, reply: &str) -> ScenarioEntry {
        ScenarioEntry {
            statement_id: id.into(),
            context_category: category.into(),
            variant: ScenarioVariant::Detect,
            reply_text: reply.into(),
            logprob_table: None,
        }
    }

    fn classify_entry(id: &str, category: &str, reply: &str) -> ScenarioEntry {
        ScenarioEntry { variant: ScenarioVariant::Classify, ..detect_entry(id, category, reply) }
    }

    fn rated(answer: &str, category: &str, rating: u8) -> String {
        format!("Answer: {answer}\n{category} level: {rating}/100.\nRationale: reason at {category}.")
    }

    #[test]
    fn unconfident_root_descends_to_selected_child() {
        let tree = default_tree();
        let backend = ScriptedBackend::new(
            BackendKind::BlackBox,
            [
                detect_entry("s", "toxic", &rated("Yes", "toxic", 50)),
                classify_entry("s", "toxic", "hate speech"),
                detect_entry("s", "hate speech", &rated("Yes", "hate speech", 95)),
            ],
        )
        .unwrap();
        let templates = Templates::builtin();
        let d = Detector::new(&tree, &backend, &templates, DtotConfig::default());
        let r = d.detect(&Statement::new("s", "why do you have to come here")).unwrap();
        assert_eq!(r.trace.len(), 2);
        assert_eq!(r.context_path(), ["toxic", "hate speech"]);
        assert_eq!(r.answer, Answer::Yes);
        assert_eq!(r.rationale, "reason at hate speech.");
        assert_eq!(r.final_decision, Decision::Confident);
        assert_eq!(r.trace[0].selected_child.as_ref().unwrap().index, 0);
        assert_eq!(r.trace[0].classification_reply.as_deref(), Some("hate speech"));
        assert!(r.trace[1].selected_child.is_none());
    }

    #[test]
    fn confident_root_stops_immediately() {
        let tree = default_tree();
        let backend = ScriptedBackend::new(
            BackendKind::BlackBox,
            [detect_entry("s", "toxic", &rated("Yes", "toxic", 95))],
        )
        .unwrap();
        let templates = Templates::builtin();
        let d = Detector::new(&tree, &backend, &templates, DtotConfig::default());
        let r = d.detect(&Statement::new("s", "x")).unwrap();
        assert_eq!(r.trace.len(), 1);
        assert!(r.trace[0].selected_child.is_none());
    }

    #[test]
    fn budget_exhaustion_returns_last_step() {
        let tree = default_tree();
        let backend = ScriptedBackend::new(
            BackendKind::BlackBox,
            [
                detect_entry("s", "toxic", &rated("Yes", "toxic", 50)),
                classify_entry("s", "toxic", "violent"),
                detect_entry("s", "violent", &rated("No", "violent", 40)),
            ],
        )
        .unwrap();
        let templates = Templates::builtin();
        let d = Detector::new(&tree, &backend, &templates, DtotConfig::default());
        let r = d.detect(&Statement::new("s", "x")).unwrap();
        assert_eq!(r.trace.len(), 2);
        assert_eq!(r.answer, Answer::No);
        assert_eq!(r.final_decision, Decision::Unconfident);
        assert_eq!(r.returned_step, 1);
    }

    #[test]
    fn return_best_prefers_most_confident() {
        let tree = default_tree();
        let backend = ScriptedBackend::new(
            BackendKind::WhiteBox,
            [
                ScenarioEntry {
                    logprob_table: Some(
                        [
                            ("Yes".to_string(), LogprobEntry::Value(-0.2)),
                            ("No".to_string(), LogprobEntry::Value(-1.5)),
                            (
                                "This statement contains biased content.".to_string(),
                                LogprobEntry::Value(-1.0),
                            ),
                            (
                                "This statement contains hate speech content.".to_string(),
                                LogprobEntry::Value(-30.0),
                            ),
                            (
                                "This statement contains sexual content.".to_string(),
                                LogprobEntry::Value(-30.0),
                            ),
                            (
                                "This statement contains violent content.".to_string(),
                                LogprobEntry::Value(-30.0),
                            ),
                            (
                                "This statement contains bullying content.".to_string(),
                                LogprobEntry::Value(-30.0),
                            ),
                        ]
                        .into_iter()
                        .collect(),
                    ),
                    ..detect_entry("s", "toxic", "Yes, it is.")
                },
                ScenarioEntry {
                    logprob_table: Some(
                        [
                            ("Yes".to_string(), LogprobEntry::Value(-0.7)),
                            ("No".to_string(), LogprobEntry::Value(-0.69)),
                        ]
                        .into_iter()
                        .collect(),
                    ),
                    ..detect_entry("s", "biased", "No, it is not.")
                },
            ],
        )
        .unwrap();
        let templates = Templates::builtin();
        let cfg = DtotConfig { return_best: true, ..Default::default() };
        let d = Detector::new(&tree, &backend, &templates, cfg);
        let r = d.detect(&Statement::new("s", "x")).unwrap();
        assert_eq!(r.context_path(), ["toxic", "biased"]);
        assert_eq!(r.returned_step, 0);
        assert_eq!(r.answer, Answer::Yes);

        let d = Detector::new(&tree, &backend, &templates, DtotConfig::default());
        let r = d.detect(&Statement::new("s", "x")).unwrap();
        assert_eq!(r.returned_step, 1);
        assert_eq!(r.answer, Answer::No);
    }

    #[test]
    fn unparsed_answer_with_rating_is_unconfident() {
        let tree = default_tree();
        let backend = ScriptedBackend::new(
            BackendKind::BlackBox,
            [
                detect_entry("s", "toxic", "toxic level: 99/100."),
                classify_entry("s", "toxic", "???"),
                detect_entry("s", "hate speech", "still nothing"),
            ],
        )
        .unwrap();
        let templates = Templates::builtin();
        let d = Detector::new(&tree, &backend, &templates, DtotConfig::default());
        let r = d.detect(&Statement::new("s", "x")).unwrap();
        assert_eq!(r.trace[0].verdict.decision, Decision::Unconfident);
        assert!(r.trace[0].selected_child.as_ref().unwrap().fallback);
        assert_eq!(r.answer, Answer::Unparsed);
    }

    #[test]
    fn backend_failure_keeps_partial_trace() {
        let tree = default_tree();
        let backend = ScriptedBackend::new(
            BackendKind::BlackBox,
            [detect_entry("s", "toxic", &rated("Yes", "toxic", 50))],
        )
        .unwrap();
        let templates = Templates::builtin();
        let d = Detector::new(&tree, &backend, &templates, DtotConfig::default());
        let err = d.detect(&Statement::new("s", "x")).unwrap_err();
        assert_eq!(err.trace.len(), 1);
        assert!(matches!(
            err.kind,
            DetectErrorKind::Selector(SelectorError::Backend(BackendError::ScenarioMiss { .. }))
        ));
    }

    #[test]
    fn few_shot_without_source_is_a_config_error() {
        let tree = default_tree();
        let backend = ScriptedBackend::new(BackendKind::BlackBox, []).unwrap();
        let templates = Templates::builtin();
        let cfg = DtotConfig { mode: FewShotMode::Fs, ..Default::default() };
        let d = Detector::new(&tree, &backend, &templates, cfg);
        let err = d.detect(&Statement::new("s", "x")).unwrap_err();
        assert!(matches!(err.kind, DetectErrorKind::Config(_)));
    }

    #[test]
    fn trace_round_trip() {
        let tree = default_tree();
        let backend = ScriptedBackend::new(
            BackendKind::BlackBox,
            [
                detect_entry("a", "toxic", &rated("Yes", "toxic", 50)),
                classify_entry("a", "toxic", "bullying"),
                detect_entry("a", "bullying", &rated("Yes", "bullying", 100)),
                detect_entry("b", "toxic", &rated("No", "toxic", 0)),
            ],
        )
        .unwrap();
        let templates = Templates::builtin();
        let d = Detector::new(&tree, &backend, &templates, DtotConfig::default());
        let results: Vec<_> = detect_batch(&d, &[Statement::new("a", "x\ny"), Statement::new("b", "z")], 2)
            .into_iter()
            .map(Result::unwrap)
            .collect();
        let mut buf = Vec::new();
        assert_eq!(write_trace(&mut buf, &results).unwrap(), 3);
        let back = read_trace(buf.as_slice()).unwrap();
        assert_eq!(back, results);
    }
}
