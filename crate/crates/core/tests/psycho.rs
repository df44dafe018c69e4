mod common;

use common::*;
use dist_core::psycho::*;
use proptest::prelude::*;
use std::collections::HashSet;

fn check_structure(s: &TrialSchedule, n: usize) {
    assert_eq!(s.len(), trial_count(n));
    assert_eq!(s.len(), n + n / 10);
    let mut standard_seen = 0;
    for (i, t) in s.trials.iter().enumerate() {
        assert_eq!(t.index, i);
        match t.kind {
            TrialKind::Standard => standard_seen += 1,
            TrialKind::Catch => {
                assert!(standard_seen > 0 && standard_seen % CATCH_EVERY == 0);
                assert_eq!(s.trials[i - 1].kind, TrialKind::Standard);
            }
        }
        assert!(t.correct_index < 3);
    }
    let catches: Vec<usize> = s.trials.iter().filter(|t| t.kind == TrialKind::Catch).map(|t| t.index).collect();
    assert_eq!(catches, (1..=n / 10).map(|k| k * 11 - 1).collect::<Vec<_>>());
    // The (100k)-th standard trial has 10k - 1 catch trials ahead of it.
    let breaks: Vec<usize> = (1..=n / 100).map(|k| 100 * k - 1 + 10 * k - 1).collect();
    assert_eq!(s.break_after, breaks);
    for &b in &s.break_after {
        let before = s.trials[..=b].iter().filter(|t| t.kind == TrialKind::Standard).count();
        assert_eq!(before % BREAK_EVERY, 0);
    }

    let standard_imgs: HashSet<&String> =
        s.trials.iter().filter(|t| t.kind == TrialKind::Standard).flat_map(|t| &t.images).collect();
    let catch_imgs: HashSet<&String> =
        s.trials.iter().filter(|t| t.kind == TrialKind::Catch).flat_map(|t| &t.images).collect();
    assert!(standard_imgs.is_disjoint(&catch_imgs));
    let ids: HashSet<&String> = s.trials.iter().map(|t| &t.source_id).collect();
    assert_eq!(ids.len(), s.len());
}

#[test]
fn schedule_structure_for_standard_sizes() {
    for n in [10, 100, 1000] {
        let m = stub_manifest(n + 17, n / 10 + 3);
        check_structure(&build_schedule(&m, n, 4).unwrap(), n);
    }
}

#[test]
fn correct_positions_are_uniform() {
    let m = stub_manifest(3000, 300);
    let s = build_schedule(&m, 3000, 11).unwrap();
    let mut counts = [0f64; 3];
    for t in s.trials.iter().filter(|t| t.kind == TrialKind::Standard) {
        counts[t.correct_index] += 1.0;
    }
    let expect = 1000.0;
    let chi2: f64 = counts.iter().map(|c| (c - expect).powi(2) / expect).sum();
    // Two degrees of freedom: P(chi2 > 9.21) = 0.01.
    assert!(chi2 < 9.21, "{counts:?} chi2 {chi2}");
}

#[test]
fn correct_index_points_at_the_odd_image() {
    let m = stub_manifest(50, 5);
    for t in build_schedule(&m, 50, 2).unwrap().trials {
        let odd = &t.images[t.correct_index];
        match t.kind {
            TrialKind::Standard => assert!(odd.ends_with("_original.png")),
            TrialKind::Catch => assert!(odd.ends_with("_disrupted.png")),
        }
    }
}

#[test]
fn schedule_hash_is_deterministic() {
    let m = stub_manifest(200, 20);
    let a = build_schedule(&m, 100, 9).unwrap();
    assert_eq!(a.hash().unwrap(), build_schedule(&m, 100, 9).unwrap().hash().unwrap());
    assert_ne!(a.hash().unwrap(), build_schedule(&m, 100, 10).unwrap().hash().unwrap());
}

#[test]
fn response_window_boundary() {
    let m = stub_manifest(10, 1);
    let s = build_schedule(&m, 10, 0).unwrap();
    let mut session = Session::new("s", s.clone());
    let key = (s.trials[0].correct_index + 1) as u8;
    assert!(session.submit_response(0, Some(key), 1999.0, None).unwrap().valid);
    assert!(session.submit_response(1, Some(1), 2000.0, None).unwrap().valid);
    let late = session.submit_response(2, Some(1), 2001.0, None).unwrap();
    assert!(!late.valid);
    let score = session.score();
    assert_eq!(score.late, 1);
    assert_eq!(score.valid_standard, 2);
}

#[test]
fn log_is_append_only_and_replays_to_the_same_score() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    let m = stub_manifest(20, 2);
    let s = build_schedule(&m, 20, 3).unwrap();
    let mut session = Session::with_log("s1", s.clone(), &path).unwrap();
    let mut prev = std::fs::read(&path).unwrap();
    for k in 0..s.len() {
        let key = if k % 7 == 3 { None } else { Some((k % 3 + 1) as u8) };
        session.submit_response(k, key, 100.0 * k as f64, Some(5000.0)).unwrap();
        let now = std::fs::read(&path).unwrap();
        assert!(now.starts_with(&prev));
        prev = now;
    }
    let score = session.finalize().unwrap();
    assert!(score.complete);
    assert!(Session::with_log("s1", s, &path).is_err());

    let lines = read_log(&path).unwrap();
    assert!(matches!(lines.first(), Some(LogLine::Header { .. })));
    let responses: Vec<ResponseRecord> = lines
        .iter()
        .filter_map(|l| match l {
            LogLine::Response(r) => Some(r.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(score_responses(&responses, 22), score);
    assert!(matches!(lines.last(), Some(LogLine::Score(s)) if *s == score));
}

#[test]
fn timing_flag_marks_client_times_beyond_server_window() {
    let m = stub_manifest(10, 1);
    let mut session = Session::new("s", build_schedule(&m, 10, 0).unwrap());
    assert!(!session.submit_response(0, Some(1), 900.0, Some(400.0)).unwrap().timing_flag);
    assert!(session.submit_response(1, Some(1), 901.0, Some(400.0)).unwrap().timing_flag);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_seed_gives_a_well_formed_schedule(n in 1usize..250, seed in any::<u64>()) {
        let m = stub_manifest(n + 5, n / 10 + 1);
        check_structure(&build_schedule(&m, n, seed).unwrap(), n);
    }

    #[test]
    fn scoring_counts_add_up(keys in prop::collection::vec((prop::option::of(1u8..=3), 0.0f64..3000.0), 22)) {
        let m = stub_manifest(20, 2);
        let mut session = Session::new("p", build_schedule(&m, 20, 1).unwrap());
        for (k, (key, t)) in keys.iter().enumerate() {
            session.submit_response(k, *key, *t, None).unwrap();
        }
        let s = session.score();
        prop_assert_eq!(s.answered, 22);
        prop_assert_eq!(s.valid_standard + s.valid_catch + s.timeouts + s.late, 22);
        prop_assert!(s.correct_standard <= s.valid_standard);
    }
}
