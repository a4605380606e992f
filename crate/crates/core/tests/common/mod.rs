//! Shared fixtures for integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use dtot::backend::BackendKind;
use dtot::promptgen::{DemoLabel, Demonstration, Templates};
use dtot::tree::default_tree;

pub const STATEMENT: &str = "People like them should not be allowed to vote.";
pub const RATIONALE: &str = "The sentence denies a group of people a basic right because of who they are.";

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../golden")
}

fn demos(with_rationales: bool) -> Vec<Demonstration> {
    let rows = [
        (
            "Those immigrants are ruining everything here.",
            DemoLabel::Toxic,
            "It blames an entire group for social problems.",
        ),
        (
            "Voting rules differ from state to state.",
            DemoLabel::Benign,
            "It states a neutral fact about elections.",
        ),
        (
            "Women are too emotional to lead.",
            DemoLabel::Toxic,
            "It repeats a demeaning stereotype about women.",
        ),
        (
            "Everyone over eighteen may register to vote.",
            DemoLabel::Benign,
            "It describes eligibility without judging anyone.",
        ),
        (
            "Go back to your own country.",
            DemoLabel::Toxic,
            "It tells people they do not belong because of their origin.",
        ),
        (
            "My neighbors moved here from Peru.",
            DemoLabel::Benign,
            "It mentions origin without any hostility.",
        ),
    ];
    rows.iter()
        .map(|(s, l, r)| Demonstration {
            statement: s.to_string(),
            label: *l,
            rationale: with_rationales.then(|| r.to_string()),
        })
        .collect()
}

fn slug(category: &str) -> String {
    category.replace(' ', "_")
}

/// (file name, rendered text) for every prompt variant.
pub fn cases() -> Vec<(String, String)> {
    let tree = default_tree();
    let t = Templates::builtin();
    let root = tree.node(tree.root()).unwrap();
    let mut out = vec![
        ("blackbox_root".to_string(), t.render_detection(STATEMENT, root, BackendKind::BlackBox, &[]).text),
        ("whitebox_root".to_string(), t.render_detection(STATEMENT, root, BackendKind::WhiteBox, &[]).text),
    ];
    for &child in tree.children(tree.root()).unwrap() {
        let node = tree.node(child).unwrap();
        for (prefix, kind) in [("blackbox", BackendKind::BlackBox), ("whitebox", BackendKind::WhiteBox)] {
            out.push((
                format!("{prefix}_{}", slug(node.category())),
                t.render_detection(STATEMENT, node, kind, &[]).text,
            ));
        }
    }
    out.push((
        "blackbox_root_fs".into(),
        t.render_detection(STATEMENT, root, BackendKind::BlackBox, &demos(false)).text,
    ));
    out.push((
        "blackbox_root_fsr".into(),
        t.render_detection(STATEMENT, root, BackendKind::BlackBox, &demos(true)).text,
    ));
    let categories: Vec<&str> =
        tree.children(tree.root()).unwrap().iter().map(|&c| tree.node(c).unwrap().category()).collect();
    out.push(("classify_default".into(), t.render_classification(RATIONALE, &categories, "toxic").text));
    out
}
