//! Confidence-gated, context-tree-guided prompting for toxic content
//! detection, with a distillation dataset builder and evaluation tools.

pub mod backend;
pub mod cli;
pub mod confidence;
pub mod distill;
pub mod engine;
pub mod eval;
pub mod fewshot;
pub mod promptgen;
pub mod selector;
pub mod tree;

pub use backend::{Answer, Backend, BackendError, BackendKind, ModelResponse};
pub use confidence::{ConfidenceConfig, ConfidenceVerdict, Decision};
pub use engine::{detect_batch, DetectionResult, Detector, DtotConfig, FewShotMode, Statement};
pub use promptgen::Templates;
pub use tree::{ContextTree, NodeId};
