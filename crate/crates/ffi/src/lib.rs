//! C ABI for the dtot engine.
//!
//! Every fallible function returns a [`DtotStatus`]. On failure the message
//! is kept per thread and can be read with [`dtot_last_error_message`].
//! Strings handed out by this library must be released with
//! [`dtot_string_free`]; handles with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dtot::backend::{parse_response, ScriptedBackend};
use dtot::confidence::{self, AnswerLogprobs};
use dtot::engine::{self, Detector, DtotConfig, Statement};
use dtot::promptgen::Templates;
use dtot::tree::{default_tree, ContextTree};
use dtot::{Answer, BackendKind, ConfidenceConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtotStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    /// A tree, scenario or trace could not be loaded.
    Load = 4,
    /// The backend failed or had no reply for a request.
    Backend = 5,
    InsufficientData = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtotKind {
    BlackBox = 0,
    WhiteBox = 1,
}

impl From<DtotKind> for BackendKind {
    fn from(k: DtotKind) -> Self {
        match k {
            DtotKind::BlackBox => BackendKind::BlackBox,
            DtotKind::WhiteBox => BackendKind::WhiteBox,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtotAnswer {
    No = 0,
    Yes = 1,
    Unparsed = -1,
}

impl From<Answer> for DtotAnswer {
    fn from(a: Answer) -> Self {
        match a {
            Answer::Yes => DtotAnswer::Yes,
            Answer::No => DtotAnswer::No,
            Answer::Unparsed => DtotAnswer::Unparsed,
        }
    }
}

impl From<DtotAnswer> for Answer {
    fn from(a: DtotAnswer) -> Self {
        match a {
            DtotAnswer::Yes => Answer::Yes,
            DtotAnswer::No => Answer::No,
            DtotAnswer::Unparsed => Answer::Unparsed,
        }
    }
}

/// Detection settings. Start from [`dtot_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DtotOptions {
    pub s_low: u8,
    pub s_high: u8,
    pub s_delta: f64,
    pub max_steps: usize,
    pub return_best: bool,
}

/// Summary of one detection. `rating` is -1 when the reply carried none.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DtotDetection {
    pub answer: DtotAnswer,
    pub confidence: f64,
    pub confident: bool,
    pub rating: i32,
    pub steps: usize,
    pub returned_step: usize,
}

/// Opaque context tree.
pub struct DtotTree(ContextTree);

/// Opaque detector over a scripted backend.
pub struct DtotDetector {
    tree: ContextTree,
    backend: ScriptedBackend,
    templates: Templates,
    config: DtotConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let mut bytes = message.into().into_bytes();
    bytes.retain(|&b| b != 0);
    let message = CString::new(bytes).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

type FfiResult<T> = Result<T, (DtotStatus, String)>;

fn fail<T>(status: DtotStatus, message: impl Into<String>) -> FfiResult<T> {
    Err((status, message.into()))
}

/// Runs `f`, records any error, and turns panics into [`DtotStatus::Panic`].
fn guard(f: impl FnOnce() -> FfiResult<()>) -> DtotStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DtotStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DtotStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(DtotStatus::NullArgument, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(DtotStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    // SAFETY: the caller passes either null or a valid, writable pointer.
    unsafe { p.as_mut() }.ok_or_else(|| (DtotStatus::NullArgument, format!("{name} is null")))
}

fn to_c_string(s: String) -> *mut c_char {
    let mut bytes = s.into_bytes();
    bytes.retain(|&b| b != 0);
    CString::new(bytes).unwrap_or_default().into_raw()
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dtot_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn dtot_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn dtot_options_default() -> DtotOptions {
    let d = DtotConfig::default();
    DtotOptions {
        s_low: d.confidence.s_low,
        s_high: d.confidence.s_high,
        s_delta: d.confidence.s_delta,
        max_steps: d.max_steps,
        return_best: d.return_best,
    }
}

/// The built-in toxic tree with five sub-categories.
#[no_mangle]
pub extern "C" fn dtot_tree_default() -> *mut DtotTree {
    Box::into_raw(Box::new(DtotTree(default_tree())))
}

/// Parses a tree from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dtot_tree_from_json(json: *const c_char, out: *mut *mut DtotTree) -> DtotStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let text = str_arg(json, "json")?;
        let tree = ContextTree::from_json_str(text).or_else(|e| fail(DtotStatus::Load, e.to_string()))?;
        *out = Box::into_raw(Box::new(DtotTree(tree)));
        Ok(())
    })
}

/// # Safety
/// `tree` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn dtot_tree_free(tree: *mut DtotTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Number of nodes, or 0 for a null handle.
///
/// # Safety
/// `tree` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dtot_tree_node_count(tree: *const DtotTree) -> usize {
    tree.as_ref().map_or(0, |t| t.0.len())
}

/// Depth counted in levels, or 0 for a null handle.
///
/// # Safety
/// `tree` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dtot_tree_depth(tree: *const DtotTree) -> usize {
    tree.as_ref().map_or(0, |t| t.0.depth())
}

/// Builds a detector that replays `scenario_json`. The tree is copied, so
/// the caller keeps ownership of `tree`.
///
/// # Safety
/// Pointers must be valid; `options` may be null for defaults.
#[no_mangle]
pub unsafe extern "C" fn dtot_detector_new_scripted(
    tree: *const DtotTree,
    kind: DtotKind,
    scenario_json: *const c_char,
    options: *const DtotOptions,
    out: *mut *mut DtotDetector,
) -> DtotStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let tree = tree.as_ref().ok_or_else(|| (DtotStatus::NullArgument, "tree is null".to_string()))?;
        let text = str_arg(scenario_json, "scenario_json")?;
        let backend = ScriptedBackend::from_json_str(kind.into(), text)
            .or_else(|e| fail(DtotStatus::Load, e.to_string()))?;
        let opts = options.as_ref().copied().unwrap_or(dtot_options_default());
        let config = DtotConfig {
            max_steps: opts.max_steps,
            confidence: ConfidenceConfig {
                s_low: opts.s_low,
                s_high: opts.s_high,
                s_delta: opts.s_delta,
                ..ConfidenceConfig::default()
            },
            return_best: opts.return_best,
            ..DtotConfig::default()
        };
        config.validate().or_else(|e| fail(DtotStatus::InvalidArgument, e))?;
        *out = Box::into_raw(Box::new(DtotDetector {
            tree: tree.0.clone(),
            backend,
            templates: Templates::builtin(),
            config,
        }));
        Ok(())
    })
}

/// # Safety
/// `detector` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn dtot_detector_free(detector: *mut DtotDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Runs detection on one statement. When `trace_json` is non-null it
/// receives the step trace as JSON lines, to be freed with
/// [`dtot_string_free`].
///
/// # Safety
/// Pointers must be valid; `trace_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn dtot_detect(
    detector: *const DtotDetector,
    id: *const c_char,
    text: *const c_char,
    out: *mut DtotDetection,
    trace_json: *mut *mut c_char,
) -> DtotStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if let Some(t) = trace_json.as_mut() {
            *t = ptr::null_mut();
        }
        let d =
            detector.as_ref().ok_or_else(|| (DtotStatus::NullArgument, "detector is null".to_string()))?;
        let statement = Statement::new(str_arg(id, "id")?, str_arg(text, "text")?);
        let detector = Detector::new(&d.tree, &d.backend, &d.templates, d.config);
        let r = detector.detect(&statement).or_else(|e| fail(DtotStatus::Backend, e.to_string()))?;
        *out = DtotDetection {
            answer: r.answer.into(),
            confidence: r.final_confidence,
            confident: r.final_decision == dtot::Decision::Confident,
            rating: r.toxicity_rating.map_or(-1, i32::from),
            steps: r.trace.len(),
            returned_step: r.returned_step,
        };
        if let Some(t) = trace_json.as_mut() {
            let mut buf = Vec::new();
            engine::write_trace(&mut buf, std::slice::from_ref(&r))
                .or_else(|e| fail(DtotStatus::Backend, e.to_string()))?;
            *t = to_c_string(String::from_utf8_lossy(&buf).into_owned());
        }
        Ok(())
    })
}

/// Parses a model reply. `rating` gets -1 when absent; `rationale` may be
/// null, otherwise it receives a string to free with [`dtot_string_free`].
///
/// # Safety
/// Pointers must be valid; `rationale` may be null.
#[no_mangle]
pub unsafe extern "C" fn dtot_parse_response(
    text: *const c_char,
    kind: DtotKind,
    answer: *mut DtotAnswer,
    rating: *mut i32,
    rationale: *mut *mut c_char,
) -> DtotStatus {
    guard(|| {
        let answer = out_arg(answer, "answer")?;
        let rating = out_arg(rating, "rating")?;
        let r = parse_response(str_arg(text, "text")?, kind.into());
        *answer = r.answer.into();
        *rating = r.toxicity_rating.map_or(-1, i32::from);
        if let Some(out) = rationale.as_mut() {
            *out = to_c_string(r.rationale);
        }
        Ok(())
    })
}

/// Black-box confidence of a self-reported rating: 1 outside the open
/// interval `(s_low, s_high)`, 0 inside.
#[no_mangle]
pub extern "C" fn dtot_black_box_confidence(rating: u8, s_low: u8, s_high: u8, out: *mut f64) -> DtotStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = ConfidenceConfig { s_low, s_high, ..ConfidenceConfig::default() };
        cfg.validate().or_else(|e| fail(DtotStatus::InvalidArgument, e.to_string()))?;
        if rating > 100 {
            return fail(DtotStatus::InvalidArgument, format!("rating {rating} exceeds 100"));
        }
        let response = dtot::ModelResponse {
            raw_text: String::new(),
            answer: Answer::Yes,
            toxicity_rating: Some(rating),
            rationale: String::new(),
            answer_token_logprobs: None,
        };
        *out = confidence::confidence_score(&response, BackendKind::BlackBox, &cfg, None);
        Ok(())
    })
}

/// Probability of `answer` normalized over the Yes/No verbalizers. An
/// unparsed answer scores 0.
#[no_mangle]
pub extern "C" fn dtot_white_box_confidence(logprob_yes: f64, logprob_no: f64, answer: DtotAnswer) -> f64 {
    AnswerLogprobs { yes: logprob_yes, no: logprob_no, full: None }.normalized(answer.into())
}

/// ROC-AUC of `scores` against 0/1 `labels`, ties sharing average rank.
/// Fails with [`DtotStatus::InsufficientData`] unless both classes occur.
///
/// # Safety
/// `scores` and `labels` must each point to `n` readable elements.
#[no_mangle]
pub unsafe extern "C" fn dtot_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> DtotStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if n > 0 && (scores.is_null() || labels.is_null()) {
            return fail(DtotStatus::NullArgument, "scores or labels is null");
        }
        let (scores, labels) = if n == 0 {
            (&[][..], &[][..])
        } else {
            (std::slice::from_raw_parts(scores, n), std::slice::from_raw_parts(labels, n))
        };
        if labels.iter().any(|&l| l > 1) {
            return fail(DtotStatus::InvalidArgument, "labels must be 0 or 1");
        }
        *out = dtot::eval::auc(scores, labels).ok_or_else(|| {
            (DtotStatus::InsufficientData, "AUC needs finite scores and both classes".to_string())
        })?;
        Ok(())
    })
}
