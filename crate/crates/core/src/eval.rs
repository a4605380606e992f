//! Dataset ingestion, sampling and metrics.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Answer, BackendKind};
use crate::engine::DetectionResult;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("entry {id:?} has no toxicity level")]
    MissingLevel { id: String },
    #[error("requested {requested} entries but the dataset has {available}")]
    InsufficientData { requested: usize, available: usize },
    #[error("no predictions to score")]
    Empty,
    #[error("no detection result for entry {0:?}")]
    MissingResult(String),
    #[error("unknown dataset format for {0:?} (expected .csv or .jsonl)")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Jsonl,
}

impl DataFormat {
    pub fn from_path(path: &Path) -> Result<Self, EvalError> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("csv") => Ok(DataFormat::Csv),
            Some("jsonl") | Some("json") => Ok(DataFormat::Jsonl),
            _ => Err(EvalError::UnknownFormat(path.display().to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    #[serde(alias = "statement")]
    pub text: String,
    pub label: u8,
    #[serde(default, rename = "level", alias = "toxicity_level", skip_serializing_if = "Option::is_none")]
    pub toxicity_level: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabeledDataset {
    pub entries: Vec<DatasetEntry>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn validate(entries: Vec<(u64, DatasetEntry)>) -> Result<Self, EvalError> {
        let mut ids = HashSet::new();
        for (line, e) in &entries {
            let bad = |message: String| EvalError::Parse { line: *line, message };
            if e.label > 1 {
                return Err(bad(format!("label must be 0 or 1, got {}", e.label)));
            }
            if e.id.is_empty() {
                return Err(bad("empty id".into()));
            }
            if !ids.insert(e.id.clone()) {
                return Err(bad(format!("duplicate id {:?}", e.id)));
            }
        }
        Ok(LabeledDataset { entries: entries.into_iter().map(|(_, e)| e).collect() })
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    id: String,
    text: String,
    label: String,
    #[serde(default, alias = "toxicity_level")]
    level: Option<String>,
}

fn parse_small_int(s: &str, what: &str, line: u64) -> Result<u8, EvalError> {
    s.trim().parse::<u8>().map_err(|_| EvalError::Parse {
        line,
        message: format!("{what} {s:?} is not a small non-negative integer"),
    })
}

pub fn load_dataset<R: Read>(source: R, format: DataFormat) -> Result<LabeledDataset, EvalError> {
    let mut rows = Vec::new();
    match format {
        DataFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::Headers).from_reader(source);
            let csv_err = |e: csv::Error| EvalError::Parse {
                line: e.position().map(|p| p.line()).unwrap_or(1),
                message: e.to_string(),
            };
            let headers = reader.headers().map_err(csv_err)?.clone();
            for record in reader.records() {
                let record = record.map_err(csv_err)?;
                let line = record.position().map(|p| p.line()).unwrap_or(0);
                let row: CsvRow = record
                    .deserialize(Some(&headers))
                    .map_err(|e| EvalError::Parse { line, message: e.to_string() })?;
                let label = parse_small_int(&row.label, "label", line)?;
                let toxicity_level = match row.level.as_deref().map(str::trim) {
                    None | Some("") => None,
                    Some(s) => Some(parse_small_int(s, "level", line)?),
                };
                rows.push((line, DatasetEntry { id: row.id, text: row.text, label, toxicity_level }));
            }
        }
        DataFormat::Jsonl => {
            for (i, line) in std::io::BufReader::new(source).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let n = i as u64 + 1;
                let e: DatasetEntry = serde_json::from_str(&line)
                    .map_err(|e| EvalError::Parse { line: n, message: e.to_string() })?;
                rows.push((n, e));
            }
        }
    }
    LabeledDataset::validate(rows)
}

pub fn load_dataset_path(path: impl AsRef<Path>) -> Result<LabeledDataset, EvalError> {
    let path = path.as_ref();
    let format = DataFormat::from_path(path)?;
    let file = std::fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    load_dataset(file, format)
}

pub fn filter_ambiguous(dataset: &LabeledDataset, excluded_level: u8) -> Result<LabeledDataset, EvalError> {
    let mut entries = Vec::with_capacity(dataset.len());
    for e in &dataset.entries {
        match e.toxicity_level {
            None => return Err(EvalError::MissingLevel { id: e.id.clone() }),
            Some(l) if l == excluded_level => {}
            Some(_) => entries.push(e.clone()),
        }
    }
    if entries.is_empty() && !dataset.is_empty() {
        log::warn!("every entry has toxicity level {excluded_level}; the filtered dataset is empty");
    }
    Ok(LabeledDataset { entries })
}

/// Disjoint uniform samples drawn from one seeded permutation.
pub fn sample_split(
    dataset: &LabeledDataset,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), EvalError> {
    let requested = n_train.saturating_add(n_test);
    if requested > dataset.len() {
        return Err(EvalError::InsufficientData { requested, available: dataset.len() });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick =
        |idx: &[usize]| LabeledDataset { entries: idx.iter().map(|&i| dataset.entries[i].clone()).collect() };
    Ok((pick(&order[..n_train]), pick(&order[n_train..requested])))
}

/// Toxic-class score used for AUC. Black-box results have none unless
/// `rating_as_score` is set, in which case the rating is divided by 100.
pub fn score_of(result: &DetectionResult, kind: BackendKind, rating_as_score: bool) -> Option<f64> {
    match kind {
        BackendKind::WhiteBox => match result.answer {
            Answer::Yes => Some(result.final_confidence),
            Answer::No => Some(1.0 - result.final_confidence),
            Answer::Unparsed => None,
        },
        BackendKind::BlackBox if rating_as_score => result.toxicity_rating.map(|r| f64::from(r) / 100.0),
        BackendKind::BlackBox => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub gold: u8,
    pub predicted: Answer,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Unparsed predictions, already counted as fp or fn.
    pub unparsed: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub macro_f1: f64,
    pub auc: Option<f64>,
    pub auc_available: bool,
    pub counts: Counts,
}

fn f1_from(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        // 2PR/(P+R) reduces to 2tp/(2tp+fp+fn)
        (2 * tp) as f64 / denom as f64
    }
}

/// Mann-Whitney AUC with average ranks for ties. `None` when a class is
/// missing or a score is not finite.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    if scores.iter().any(|s| !s.is_finite()) {
        return None;
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                pos_rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

pub fn metrics(predictions: &[Prediction]) -> Result<EvalReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = Counts::default();
    // benign-class confusion, for macro F1
    let (mut b_tp, mut b_fp, mut b_fn) = (0, 0, 0);
    for p in predictions {
        match (p.predicted, p.gold) {
            (Answer::Yes, 1) => c.tp += 1,
            (Answer::Yes, _) => {
                c.fp += 1;
                b_fn += 1;
            }
            (Answer::No, 1) => {
                c.fn_ += 1;
                b_fp += 1;
            }
            (Answer::No, _) => {
                c.tn += 1;
                b_tp += 1;
            }
            (Answer::Unparsed, 1) => {
                c.fn_ += 1;
                c.unparsed += 1;
            }
            (Answer::Unparsed, _) => {
                c.fp += 1;
                c.unparsed += 1;
                b_fn += 1;
            }
        }
    }
    let total = c.total();
    let f1 = f1_from(c.tp, c.fp, c.fn_);
    let macro_f1 = (f1 + f1_from(b_tp, b_fp, b_fn)) / 2.0;

    let scored: Vec<&Prediction> = predictions.iter().filter(|p| p.predicted != Answer::Unparsed).collect();
    let auc = if !scored.is_empty() && scored.iter().all(|p| p.score.is_some()) {
        let scores: Vec<f64> = scored.iter().map(|p| p.score.unwrap()).collect();
        let labels: Vec<u8> = scored.iter().map(|p| p.gold).collect();
        auc(&scores, &labels)
    } else {
        None
    };

    Ok(EvalReport {
        total,
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        f1,
        macro_f1,
        auc_available: auc.is_some(),
        auc,
        counts: c,
    })
}

/// Pairs each dataset entry with its detection result by id.
pub fn predictions_for(
    dataset: &LabeledDataset,
    results: &[DetectionResult],
    kind: BackendKind,
    rating_as_score: bool,
) -> Result<Vec<Prediction>, EvalError> {
    let by_id: std::collections::HashMap<&str, &DetectionResult> =
        results.iter().map(|r| (r.statement_id.as_str(), r)).collect();
    dataset
        .entries
        .iter()
        .map(|e| {
            let r = by_id.get(e.id.as_str()).ok_or_else(|| EvalError::MissingResult(e.id.clone()))?;
            Ok(Prediction { gold: e.label, predicted: r.answer, score: score_of(r, kind, rating_as_score) })
        })
        .collect()
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.counts;
        writeln!(s, "total      {}", self.total).unwrap();
        writeln!(s, "accuracy   {:.4}", self.accuracy).unwrap();
        writeln!(s, "f1         {:.4}", self.f1).unwrap();
        writeln!(s, "macro_f1   {:.4}", self.macro_f1).unwrap();
        match self.auc {
            Some(a) => writeln!(s, "auc        {a:.4}").unwrap(),
            None => writeln!(s, "auc        N/A").unwrap(),
        }
        writeln!(s, "tp {} fp {} tn {} fn {} (unparsed {})", c.tp, c.fp, c.tn, c.fn_, c.unparsed).unwrap();
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
