//! Context tree: a static mapping from a context node to its ordered,
//! more fine-grained child contexts.
//!
//! Trees are loaded from a JSON document of recursive nodes:
//!
//! ```json
//! { "category": "toxic", "context": "...", "children": [ { "category": "hate speech", "context": "..." } ] }
//! ```
//!
//! The root may additionally state `"depth"`; when present it must match the
//! longest root-to-leaf path. Child order in the file is the child index used
//! everywhere downstream (relevance scores, tie-breaks, traces).

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("failed to read tree file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed tree document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid tree: {0}")]
    Validation(String),
    #[error("node does not belong to this tree")]
    UnknownNode,
}

static NEXT_TREE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node inside one particular [`ContextTree`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    tree: u64,
    index: usize,
}

#[derive(Debug, Clone)]
pub struct ContextNode {
    category: String,
    context_text: String,
    children: Vec<NodeId>,
    parent: Option<NodeId>,
    level: usize,
}

impl ContextNode {
    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn context_text(&self) -> &str {
        &self.context_text
    }

    pub fn parent(&self) -> Option<NodeId> {
        self.parent
    }

    /// Distance from the root (root is 0).
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn child_count(&self) -> usize {
        self.children.len()
    }
}

/// On-disk node shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub category: String,
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NodeSpec>,
}

/// Immutable context tree. Nodes live in an arena in pre-order, so the root
/// is index 0 and a parent always precedes its children.
#[derive(Debug, Clone)]
pub struct ContextTree {
    id: u64,
    nodes: Vec<ContextNode>,
    depth: usize,
}

impl PartialEq for ContextTree {
    fn eq(&self, other: &Self) -> bool {
        self.to_spec() == other.to_spec()
    }
}

impl ContextTree {
    pub fn load<R: Read>(source: R) -> Result<Self, TreeError> {
        let spec: NodeSpec = serde_json::from_reader(source)?;
        Self::from_spec(&spec)
    }

    pub fn load_path(path: impl AsRef<Path>) -> Result<Self, TreeError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|source| TreeError::Io { path: path.display().to_string(), source })?;
        Self::load(std::io::BufReader::new(file))
    }

    pub fn from_json_str(text: &str) -> Result<Self, TreeError> {
        Self::load(text.as_bytes())
    }

    pub fn from_spec(spec: &NodeSpec) -> Result<Self, TreeError> {
        let id = NEXT_TREE_ID.fetch_add(1, Ordering::Relaxed);
        let mut tree = ContextTree { id, nodes: Vec::new(), depth: 0 };
        let mut seen = HashSet::new();
        tree.push(spec, None, 0, &mut seen)?;
        tree.depth = tree.nodes.iter().map(|n| n.level + 1).max().unwrap_or(1);

        if let Some(stated) = spec.depth {
            if stated > 1 && spec.children.is_empty() {
                return Err(TreeError::Validation(format!(
                    "root has no children but depth {stated} is stated"
                )));
            }
            if stated != tree.depth {
                return Err(TreeError::Validation(format!(
                    "stated depth {stated} does not match actual depth {}",
                    tree.depth
                )));
            }
        }
        Ok(tree)
    }

    fn push(
        &mut self,
        spec: &NodeSpec,
        parent: Option<NodeId>,
        level: usize,
        seen: &mut HashSet<String>,
    ) -> Result<NodeId, TreeError> {
        let category = spec.category.trim();
        if category.is_empty() {
            return Err(TreeError::Validation("empty category".into()));
        }
        if spec.context.trim().is_empty() {
            return Err(TreeError::Validation(format!("empty context for category {category:?}")));
        }
        if level > 0 && spec.depth.is_some() {
            return Err(TreeError::Validation(format!(
                "depth may only be stated on the root, found on {category:?}"
            )));
        }
        if !seen.insert(category.to_lowercase()) {
            return Err(TreeError::Validation(format!("duplicate category {category:?}")));
        }

        let node_id = NodeId { tree: self.id, index: self.nodes.len() };
        self.nodes.push(ContextNode {
            category: category.to_string(),
            context_text: spec.context.trim().to_string(),
            children: Vec::with_capacity(spec.children.len()),
            parent,
            level,
        });
        for child in &spec.children {
            let child_id = self.push(child, Some(node_id), level + 1, seen)?;
            self.nodes[node_id.index].children.push(child_id);
        }
        Ok(node_id)
    }

    pub fn root(&self) -> NodeId {
        NodeId { tree: self.id, index: 0 }
    }

    /// Longest root-to-leaf path, counted in nodes.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&ContextNode, TreeError> {
        if id.tree != self.id {
            return Err(TreeError::UnknownNode);
        }
        self.nodes.get(id.index).ok_or(TreeError::UnknownNode)
    }

    /// Child contexts of `id` in file order; empty for leaves.
    pub fn children(&self, id: NodeId) -> Result<&[NodeId], TreeError> {
        Ok(&self.node(id)?.children)
    }

    pub fn find(&self, category: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.category.eq_ignore_ascii_case(category))
            .map(|index| NodeId { tree: self.id, index })
    }

    pub fn is_child_of(&self, child: NodeId, parent: NodeId) -> bool {
        self.node(child).map(|n| n.parent == Some(parent)).unwrap_or(false)
    }

    /// All node ids in pre-order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(|index| NodeId { tree: self.id, index })
    }

    pub fn to_spec(&self) -> NodeSpec {
        self.spec_of(0)
    }

    fn spec_of(&self, index: usize) -> NodeSpec {
        let node = &self.nodes[index];
        NodeSpec {
            category: node.category.clone(),
            context: node.context_text.clone(),
            depth: None,
            children: node.children.iter().map(|c| self.spec_of(c.index)).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_spec()).expect("tree spec serializes")
    }

    /// SHA-256 over the canonical compact serialization.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.to_spec()).expect("tree spec serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// The tree shipped in `trees/default_toxic.json`.
pub const DEFAULT_TREE_JSON: &str = include_str!("../../../trees/default_toxic.json");

pub fn default_tree() -> ContextTree {
    ContextTree::from_json_str(DEFAULT_TREE_JSON).expect("shipped tree is valid")
}
