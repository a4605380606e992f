//! Few-shot demonstration retrieval from an embedded development set.
//!
//! For each input statement the K most cosine-similar toxic entries and the
//! K most similar benign entries are chosen (ties by id, ascending; an entry
//! whose text equals the input is skipped). The two lists are merged by
//! descending similarity with toxic entries first on equal similarity.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Embedder};
use crate::engine::{DemoSource, FewShotMode, Statement};
use crate::eval::LabeledDataset;
use crate::promptgen::{DemoLabel, Demonstration};

#[derive(Debug, Error)]
pub enum FewShotError {
    #[error("cannot take cosine similarity of a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("class {label} has {available} entries, need at least {needed}")]
    ClassStarvation { label: DemoLabel, available: usize, needed: usize },
    #[error("embedding failed for entry {id:?}: {source}")]
    Embedding {
        id: String,
        #[source]
        source: BackendError,
    },
    #[error("devset line {line}: {message}")]
    Index { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, FewShotError> {
    if a.len() != b.len() {
        return Err(FewShotError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(FewShotError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevEntry {
    pub id: String,
    pub statement: String,
    pub label: DemoLabel,
    #[serde(default)]
    pub rationale: Option<String>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DevSet {
    entries: Vec<DevEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDemo {
    pub id: String,
    pub similarity: f64,
    pub demonstration: Demonstration,
}

impl DevSet {
    /// Validates dimensions, ids and non-zero embeddings.
    pub fn from_entries(entries: Vec<DevEntry>) -> Result<Self, FewShotError> {
        let mut ids = HashSet::new();
        let dim = entries.first().map(|e| e.embedding.len()).unwrap_or(0);
        for (i, e) in entries.iter().enumerate() {
            let bad = |message: String| FewShotError::Index { line: i + 1, message };
            if !ids.insert(e.id.as_str()) {
                return Err(bad(format!("duplicate id {:?}", e.id)));
            }
            if e.embedding.len() != dim {
                return Err(bad(format!("embedding has dimension {}, expected {dim}", e.embedding.len())));
            }
            if e.embedding.iter().all(|x| *x == 0.0) || e.embedding.iter().any(|x| !x.is_finite()) {
                return Err(bad(format!("entry {:?} has a zero or non-finite embedding", e.id)));
            }
        }
        Ok(DevSet { entries })
    }

    pub fn entries(&self) -> &[DevEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.entries.first().map(|e| e.embedding.len())
    }

    pub fn class_count(&self, label: DemoLabel) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn require_per_class(&self, k: usize) -> Result<(), FewShotError> {
        for label in [DemoLabel::Toxic, DemoLabel::Benign] {
            let available = self.class_count(label);
            if available < k {
                return Err(FewShotError::ClassStarvation { label, available, needed: k });
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), FewShotError> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, FewShotError> {
        let mut entries = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: DevEntry = serde_json::from_str(&line)
                .map_err(|e| FewShotError::Index { line: i + 1, message: e.to_string() })?;
            entries.push(e);
        }
        Self::from_entries(entries)
    }

    fn top_k(
        &self,
        query_text: &str,
        query: &[f64],
        label: DemoLabel,
        k: usize,
        with_rationales: bool,
    ) -> Result<Vec<ScoredDemo>, FewShotError> {
        let mut scored = Vec::new();
        let mut skipped = 0usize;
        for e in self.entries.iter().filter(|e| e.label == label) {
            if e.statement == query_text {
                continue;
            }
            if with_rationales && e.rationale.is_none() {
                skipped += 1;
                continue;
            }
            scored.push((cosine_similarity(query, &e.embedding)?, e));
        }
        if skipped > 0 {
            log::warn!("skipped {skipped} {label} devset entries without a rationale");
        }
        // partial_cmp so that 0.0 and -0.0 tie; similarities are finite here
        scored.sort_by(|(sa, ea), (sb, eb)| {
            sb.partial_cmp(sa).unwrap_or(std::cmp::Ordering::Equal).then_with(|| ea.id.cmp(&eb.id))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(similarity, e)| ScoredDemo {
                id: e.id.clone(),
                similarity,
                demonstration: Demonstration {
                    statement: e.statement.clone(),
                    label: e.label,
                    rationale: if with_rationales { e.rationale.clone() } else { None },
                },
            })
            .collect())
    }

    /// Top-k per class, merged into prompt order.
    pub fn select_scored(
        &self,
        query_text: &str,
        query: &[f64],
        k: usize,
        with_rationales: bool,
    ) -> Result<Vec<ScoredDemo>, FewShotError> {
        if query.iter().any(|x| !x.is_finite()) {
            return Err(FewShotError::Index { line: 0, message: "query embedding is not finite".into() });
        }
        let toxic = self.top_k(query_text, query, DemoLabel::Toxic, k, with_rationales)?;
        let benign = self.top_k(query_text, query, DemoLabel::Benign, k, with_rationales)?;
        let mut merged = Vec::with_capacity(toxic.len() + benign.len());
        let (mut t, mut b) = (toxic.into_iter().peekable(), benign.into_iter().peekable());
        loop {
            let take_toxic = match (t.peek(), b.peek()) {
                (Some(x), Some(y)) => x.similarity >= y.similarity,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            merged.push(if take_toxic { t.next() } else { b.next() }.unwrap());
        }
        Ok(merged)
    }

    pub fn select_demonstrations(
        &self,
        query_text: &str,
        query: &[f64],
        k: usize,
        with_rationales: bool,
    ) -> Result<Vec<Demonstration>, FewShotError> {
        Ok(self
            .select_scored(query_text, query, k, with_rationales)?
            .into_iter()
            .map(|s| s.demonstration)
            .collect())
    }
}

/// Embeds every dataset entry (with up to `parallelism` concurrent calls)
/// and checks that each class has at least `k` entries. `rationales` maps
/// entry ids to stored rationales.
pub fn build_devset(
    dataset: &LabeledDataset,
    embedder: &dyn Embedder,
    k: usize,
    rationales: Option<&HashMap<String, String>>,
    parallelism: usize,
) -> Result<DevSet, FewShotError> {
    let entries = &dataset.entries;
    let next = AtomicUsize::new(0);
    type Slot = Option<Result<Vec<f64>, BackendError>>;
    let embedded: Mutex<Vec<Slot>> = Mutex::new((0..entries.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..parallelism.max(1).min(entries.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(e) = entries.get(i) else { break };
                let v = embedder.embed(&e.text);
                embedded.lock().unwrap()[i] = Some(v);
            });
        }
    });

    let mut out = Vec::with_capacity(entries.len());
    for (e, v) in entries.iter().zip(embedded.into_inner().unwrap()) {
        let embedding = v
            .expect("every entry is embedded")
            .map_err(|source| FewShotError::Embedding { id: e.id.clone(), source })?;
        out.push(DevEntry {
            id: e.id.clone(),
            statement: e.text.clone(),
            label: DemoLabel::from_label(e.label),
            rationale: rationales.and_then(|r| r.get(&e.id).cloned()),
            embedding,
        });
    }
    let devset = DevSet::from_entries(out)?;
    devset.require_per_class(k)?;
    Ok(devset)
}

/// Teacher rationales keyed by statement id, kept only where the teacher's
/// answer matches the gold label.
pub fn agreeing_rationales(
    dataset: &LabeledDataset,
    results: &[crate::engine::DetectionResult],
) -> HashMap<String, String> {
    let gold: HashMap<&str, u8> = dataset.entries.iter().map(|e| (e.id.as_str(), e.label)).collect();
    results
        .iter()
        .filter(|r| {
            r.answer.label().is_some() && r.answer.label() == gold.get(r.statement_id.as_str()).copied()
        })
        .map(|r| (r.statement_id.clone(), r.rationale.clone()))
        .collect()
}

/// A devset paired with the embedder used for incoming statements.
pub struct FewShot<'a> {
    pub devset: &'a DevSet,
    pub embedder: &'a dyn Embedder,
}

impl DemoSource for FewShot<'_> {
    fn demonstrations(
        &self,
        statement: &Statement,
        mode: FewShotMode,
        k: usize,
    ) -> Result<Vec<Demonstration>, String> {
        if mode == FewShotMode::ZeroShot {
            return Ok(Vec::new());
        }
        let query = self.embedder.embed(&statement.text).map_err(|e| e.to_string())?;
        self.devset
            .select_demonstrations(&statement.text, &query, k, mode == FewShotMode::Fsr)
            .map_err(|e| e.to_string())
    }
}
