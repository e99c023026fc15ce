use std::io::Cursor;

use immunegrid::eventlog::{read_log, replay, run_to_log, LogError};
use immunegrid::scenario::{builtin_scenario, Axis, InjectSpec, Placement};
use immunegrid::service::RunManager;

fn small_feedback() -> immunegrid::scenario::Scenario {
    let mut sc = builtin_scenario("feedback_local").unwrap();
    sc.compartments[0].dims = [16, 16, 4];
    sc
}

#[test]
fn same_seed_same_bytes() {
    let sc = builtin_scenario("bcell_crosslink").unwrap();
    let (_, a) = run_to_log(&sc, 4, 80, Vec::new(), |_, _| {}).unwrap();
    let (_, b) = run_to_log(&sc, 4, 80, Vec::new(), |_, _| {}).unwrap();
    assert_eq!(a, b);
    let (_, c) = run_to_log(&sc, 5, 80, Vec::new(), |_, _| {}).unwrap();
    assert_ne!(a, c);
}

#[test]
fn replay_matches_final_hash() {
    let sc = small_feedback();
    let (w, log) = run_to_log(&sc, 9, 200, Vec::new(), |_, _| {}).unwrap();
    let out = replay(Cursor::new(&log)).unwrap();
    assert_eq!(out.tick, 200);
    assert_eq!(out.actual, w.hash());
    assert!(out.matches());
}

#[test]
fn truncated_log_names_line() {
    let sc = builtin_scenario("bcell_crosslink").unwrap();
    let (_, log) = run_to_log(&sc, 1, 30, Vec::new(), |_, _| {}).unwrap();
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let cut = lines[..lines.len() - 1].join("\n");
    match read_log(Cursor::new(cut)) {
        Err(LogError::Truncated { line }) => assert_eq!(line, lines.len()),
        other => panic!("{other:?}"),
    }
    // a half-written record
    let mut torn = lines[..lines.len() - 1].join("\n");
    torn.push_str("\n{\"t\":30,\"se");
    match read_log(Cursor::new(torn)) {
        Err(LogError::Parse { line, .. }) => assert_eq!(line, lines.len()),
        other => panic!("{other:?}"),
    }
}

#[test]
fn edited_header_fails_digest() {
    let sc = builtin_scenario("bcell_crosslink").unwrap();
    let (_, log) = run_to_log(&sc, 1, 5, Vec::new(), |_, _| {}).unwrap();
    let text = String::from_utf8(log).unwrap();
    let edited = text.replacen("\"AG\"", "\"AGX\"", 1);
    assert_ne!(edited, text);
    assert!(matches!(read_log(Cursor::new(edited)), Err(LogError::DigestMismatch { .. })));
}

#[test]
fn tampered_end_hash_is_detected() {
    let sc = builtin_scenario("bcell_crosslink").unwrap();
    let (w, log) = run_to_log(&sc, 1, 20, Vec::new(), |_, _| {}).unwrap();
    let text = String::from_utf8(log).unwrap();
    let bad = text.replace(&w.hash(), &"0".repeat(64));
    let out = replay(Cursor::new(bad)).unwrap();
    assert!(!out.matches());
}

#[test]
fn service_log_with_injection_replays() {
    let m = RunManager::new();
    let h = m.create_run(small_feedback(), 3).unwrap();
    m.advance(&h.id, 15).unwrap();
    let (placed, tick) = m
        .inject(
            &h.id,
            InjectSpec {
                compartment: "tissue".into(),
                agent: "C1".into(),
                placement: Placement::Wall {
                    axis: Axis::X,
                    face: immunegrid::scenario::Face::Low,
                },
                count: 300,
            },
        )
        .unwrap();
    assert_eq!((placed, tick), (300, 15));
    m.advance(&h.id, 15).unwrap();
    let log = m.export_log(&h.id).unwrap();
    let out = replay(Cursor::new(log)).unwrap();
    assert_eq!(out.tick, 30);
    assert!(out.matches());
}
