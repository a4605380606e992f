//! Calls through the exported C functions the way a C caller would.

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use dtot_ffi::*;

const SCENARIO: &str = r#"[
  {"statement_id": "a", "context_category": "toxic", "variant": "detect",
   "reply_text": "Answer: Yes\ntoxic level: 60/100.\nRationale: Unsure."},
  {"statement_id": "a", "context_category": "toxic", "variant": "classify",
   "reply_text": "This statement contains violent content."},
  {"statement_id": "a", "context_category": "violent", "variant": "detect",
   "reply_text": "Answer: Yes\ntoxic level: 97/100.\nRationale: It threatens harm."}
]"#;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = dtot_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut c_char) -> String {
    let text = CStr::from_ptr(s).to_string_lossy().into_owned();
    dtot_string_free(s);
    text
}

#[test]
fn detect_descends_into_the_selected_child() {
    unsafe {
        let tree = dtot_tree_default();
        assert_eq!(dtot_tree_node_count(tree), 6);
        assert_eq!(dtot_tree_depth(tree), 2);
        let mut det = ptr::null_mut();
        let scenario = c(SCENARIO);
        let status =
            dtot_detector_new_scripted(tree, DtotKind::BlackBox, scenario.as_ptr(), ptr::null(), &mut det);
        assert_eq!(status, DtotStatus::Ok);
        // the detector holds its own copy of the tree
        dtot_tree_free(tree);

        let mut out = std::mem::zeroed::<DtotDetection>();
        let mut trace = ptr::null_mut();
        let (id, text) = (c("a"), c("I will hurt you."));
        assert_eq!(dtot_detect(det, id.as_ptr(), text.as_ptr(), &mut out, &mut trace), DtotStatus::Ok);
        assert_eq!(out.answer, DtotAnswer::Yes);
        assert_eq!(out.rating, 97);
        assert_eq!(out.steps, 2);
        assert_eq!(out.returned_step, 1);
        assert!(out.confident);
        assert_eq!(out.confidence, 1.0);
        let trace = take(trace);
        assert_eq!(trace.lines().count(), 2);
        assert!(trace.lines().nth(1).unwrap().contains("\"context_category\":\"violent\""));

        let missing = c("b");
        let status = dtot_detect(det, missing.as_ptr(), text.as_ptr(), &mut out, ptr::null_mut());
        assert_eq!(status, DtotStatus::Backend);
        assert!(last_error().contains("\"b\""), "{}", last_error());
        dtot_detector_free(det);
    }
}

#[test]
fn options_are_validated() {
    unsafe {
        let tree = dtot_tree_default();
        let scenario = c("[]");
        let mut det = ptr::null_mut();
        let mut opts = dtot_options_default();
        assert_eq!((opts.s_low, opts.s_high, opts.s_delta, opts.max_steps), (0, 90, 0.9, 2));
        opts.max_steps = 0;
        let status = dtot_detector_new_scripted(tree, DtotKind::WhiteBox, scenario.as_ptr(), &opts, &mut det);
        assert_eq!(status, DtotStatus::InvalidArgument);
        assert!(det.is_null());
        assert!(last_error().contains("max steps"));

        let bad = c("{not json");
        let status =
            dtot_detector_new_scripted(tree, DtotKind::BlackBox, bad.as_ptr(), ptr::null(), &mut det);
        assert_eq!(status, DtotStatus::Load);
        let status = dtot_detector_new_scripted(
            ptr::null(),
            DtotKind::BlackBox,
            scenario.as_ptr(),
            ptr::null(),
            &mut det,
        );
        assert_eq!(status, DtotStatus::NullArgument);
        dtot_tree_free(tree);
    }
}

#[test]
fn trees_from_json() {
    unsafe {
        let mut tree = ptr::null_mut();
        let json = c(
            r#"{"category": "toxic", "context": "Rude talk", "children": [{"category": "insult", "context": "Name calling"}]}"#,
        );
        assert_eq!(dtot_tree_from_json(json.as_ptr(), &mut tree), DtotStatus::Ok);
        assert_eq!(dtot_tree_node_count(tree), 2);
        dtot_tree_free(tree);

        let broken = c(r#"{"category": "toxic"}"#);
        assert_eq!(dtot_tree_from_json(broken.as_ptr(), &mut tree), DtotStatus::Load);
        assert!(tree.is_null());
        assert_eq!(dtot_tree_node_count(ptr::null()), 0);
    }
}

#[test]
fn parsing_and_confidence() {
    unsafe {
        let reply = c("Answer: No\ntoxic level: 4/100.\nRationale: A plain question.");
        let (mut answer, mut rating, mut rationale) = (DtotAnswer::Unparsed, 0, ptr::null_mut());
        assert_eq!(
            dtot_parse_response(reply.as_ptr(), DtotKind::BlackBox, &mut answer, &mut rating, &mut rationale),
            DtotStatus::Ok
        );
        assert_eq!((answer, rating), (DtotAnswer::No, 4));
        assert_eq!(take(rationale), "A plain question.");

        let garbage = c("no idea");
        dtot_parse_response(garbage.as_ptr(), DtotKind::BlackBox, &mut answer, &mut rating, ptr::null_mut());
        assert_eq!((answer, rating), (DtotAnswer::Unparsed, -1));

        let bytes = [0xffu8, 0xfe, 0];
        let status = dtot_parse_response(
            bytes.as_ptr().cast(),
            DtotKind::BlackBox,
            &mut answer,
            &mut rating,
            ptr::null_mut(),
        );
        assert_eq!(status, DtotStatus::InvalidUtf8);
    }

    let mut score = -1.0;
    for (rating, want) in [(0, 1.0), (1, 0.0), (89, 0.0), (90, 1.0), (100, 1.0)] {
        assert_eq!(dtot_black_box_confidence(rating, 0, 90, &mut score), DtotStatus::Ok);
        assert_eq!(score, want, "rating {rating}");
    }
    assert_eq!(dtot_black_box_confidence(101, 0, 90, &mut score), DtotStatus::InvalidArgument);

    let p = dtot_white_box_confidence(-0.1, -3.0, DtotAnswer::Yes);
    assert!((p - 1.0 / (1.0 + (-2.9f64).exp())).abs() < 1e-12);
    assert_eq!(dtot_white_box_confidence(-0.1, -3.0, DtotAnswer::Unparsed), 0.0);
}

#[test]
fn auc_through_the_abi() {
    unsafe {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0u8, 0, 1, 1];
        let mut out = 0.0;
        assert_eq!(dtot_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut out), DtotStatus::Ok);
        assert!((out - 0.75).abs() < 1e-12);

        let one_class = [1u8, 1, 1, 1];
        assert_eq!(dtot_auc(scores.as_ptr(), one_class.as_ptr(), 4, &mut out), DtotStatus::InsufficientData);
        assert_eq!(dtot_auc(ptr::null(), ptr::null(), 0, &mut out), DtotStatus::InsufficientData);
        assert_eq!(dtot_auc(ptr::null(), labels.as_ptr(), 4, &mut out), DtotStatus::NullArgument);
        let bad = [0u8, 2, 1, 0];
        assert_eq!(dtot_auc(scores.as_ptr(), bad.as_ptr(), 4, &mut out), DtotStatus::InvalidArgument);
    }
}
