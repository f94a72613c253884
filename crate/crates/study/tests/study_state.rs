mod common;

use std::collections::BTreeMap;

use common::fixture;
use nariqa_core::config::StudyConfig;
use nariqa_core::corpus::read_manifest;
use nariqa_core::evalkit::two_afc_accuracy;
use nariqa_core::score::decide;
use nariqa_study::state::{effective_votes, tallies_path};
use nariqa_study::{Aggregation, Permutation, Side, StudyError, StudyState, TallyStatus, VoteRecord};
use proptest::prelude::*;

fn rule() -> StudyConfig {
    StudyConfig::default()
}

fn ids(s: &StudyState) -> Vec<String> {
    let mut v: Vec<String> = s.manifest().records.iter().map(|r| r.triplet_id.clone()).collect();
    v.sort();
    v
}

#[test]
fn fresh_rater_gets_lowest_id_then_done() {
    let (_, m) = fixture(3);
    let mut s = StudyState::in_memory(m, rule(), 1).unwrap();
    let order = ids(&s);
    for (i, id) in order.iter().enumerate() {
        let a = s.assign_next("r1", 0).unwrap();
        assert_eq!(a.triplet.as_ref().unwrap().triplet_id, *id);
        assert_eq!(a.progress.voted, i);
        s.record_vote(VoteRecord::new(id, "r1", 0, i as u64)).unwrap();
    }
    let done = s.assign_next("r1", 0).unwrap();
    assert!(done.triplet.is_none());
    assert_eq!((done.progress.voted, done.progress.total), (3, 3));
}

#[test]
fn raters_have_independent_cursors() {
    let (_, m) = fixture(3);
    let mut s = StudyState::in_memory(m, rule(), 1).unwrap();
    let order = ids(&s);
    s.record_vote(VoteRecord::new(&order[0], "a", 1, 1)).unwrap();
    assert_eq!(s.assign_next("a", 0).unwrap().triplet.unwrap().triplet_id, order[1]);
    assert_eq!(s.assign_next("b", 0).unwrap().triplet.unwrap().triplet_id, order[0]);
    // Voting out of order only skips what was voted.
    s.record_vote(VoteRecord::new(&order[2], "b", 0, 2)).unwrap();
    assert_eq!(s.assign_next("b", 0).unwrap().triplet.unwrap().triplet_id, order[0]);
}

#[test]
fn bad_votes_are_rejected_and_not_logged() {
    let (_, m) = fixture(2);
    let mut s = StudyState::in_memory(m, rule(), 1).unwrap();
    let id = ids(&s)[0].clone();
    assert!(matches!(
        s.record_vote(VoteRecord::new("nope", "r", 0, 1)),
        Err(StudyError::UnknownTriplet(_))
    ));
    assert!(matches!(s.record_vote(VoteRecord::new(&id, "r", 2, 1)), Err(StudyError::InvalidChoice(2))));
    assert!(matches!(s.record_vote(VoteRecord::new(&id, "", 0, 1)), Err(StudyError::InvalidRater(_))));
    let mut wrong = VoteRecord::new(&id, "r", 0, 1);
    wrong.permutation = Some(match s.permutation("r", &id) {
        Permutation::Identity => Permutation::Swap,
        Permutation::Swap => Permutation::Identity,
    });
    assert!(matches!(s.record_vote(wrong), Err(StudyError::PermutationMismatch { .. })));
    assert!(s.votes().is_empty());
}

#[test]
fn revote_supersedes_and_idempotency_key_dedups() {
    let (_, m) = fixture(1);
    let mut s = StudyState::in_memory(m, StudyConfig { min_raters: 1, theta: 0.8 }, 1).unwrap();
    let id = ids(&s)[0].clone();
    s.record_vote(VoteRecord::new(&id, "r", 0, 10)).unwrap();
    s.record_vote(VoteRecord::new(&id, "r", 1, 20)).unwrap();
    assert_eq!(s.aggregate().tallies[&id].status, TallyStatus::Labeled { label: 1 });
    let mut v = VoteRecord::new(&id, "q", 0, 30);
    v.idempotency_key = Some("k1".into());
    let first = s.record_vote(v.clone()).unwrap();
    let again = s.record_vote(v).unwrap();
    assert!(!first.duplicate && again.duplicate);
    assert_eq!(first.log_index, again.log_index);
    assert_eq!(s.votes().len(), 3);
}

#[test]
fn dwell_time_is_measured_from_assignment() {
    let (_, m) = fixture(1);
    let mut s = StudyState::in_memory(m, rule(), 1).unwrap();
    let id = s.assign_next("r", 1_000).unwrap().triplet.unwrap().triplet_id;
    s.record_vote(VoteRecord::new(&id, "r", 0, 3_500)).unwrap();
    assert_eq!(s.votes()[0].dwell_ms, Some(2_500));
}

#[test]
fn both_presentation_orders_store_the_same_canonical_choice() {
    let (_, m) = fixture(20);
    let mut s = StudyState::in_memory(m, rule(), 9).unwrap();
    let order = ids(&s);
    let mut seen = [false; 2];
    for (i, id) in order.iter().enumerate() {
        let rater = format!("r{i}");
        let p = s.permutation(&rater, id);
        seen[usize::from(p == Permutation::Swap)] = true;
        // The rater always prefers canonical candidate 1 and clicks wherever it is shown.
        let side = p.side_of(1);
        let mut v = VoteRecord::new(id, &rater, p.canonical(side), i as u64);
        v.permutation = Some(p);
        let ack = s.record_vote(v).unwrap();
        assert_eq!((ack.choice, ack.permutation), (1, p));
    }
    assert_eq!(seen, [true, true]);
    for p in [Permutation::Identity, Permutation::Swap] {
        assert_ne!(p.canonical(Side::Left), p.canonical(Side::Right));
    }
    assert!(s.votes().iter().all(|v| v.choice == 1));
}

#[test]
fn restart_replays_to_identical_aggregation() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("votes.jsonl");
    let (_, m) = fixture(6);
    let before = {
        let mut s = StudyState::open(m.clone(), rule(), 4, &log).unwrap();
        let order = ids(&s);
        for (k, id) in order.iter().enumerate() {
            for r in 0..5 {
                let c = u8::from((k + r) % 3 == 0);
                s.record_vote(VoteRecord::new(id, &format!("r{r}"), c, (k * 10 + r) as u64)).unwrap();
            }
        }
        s.record_vote(VoteRecord::new(&order[0], "r0", 1, 1_000)).unwrap();
        (s.aggregate(), s.progress(), s.votes().to_vec())
    };
    let s = StudyState::open(m, rule(), 4, &log).unwrap();
    assert_eq!(s.aggregate(), before.0);
    assert_eq!(s.progress(), before.1);
    assert_eq!(s.votes(), before.2.as_slice());
}

#[test]
fn replay_rejects_votes_for_other_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("votes.jsonl");
    let line = serde_json::to_string(&VoteRecord::new("zzz", "r", 0, 1)).unwrap();
    std::fs::write(&log, format!("{line}\n")).unwrap();
    let (_, m) = fixture(2);
    assert!(matches!(StudyState::open(m, rule(), 1, &log), Err(StudyError::LogCorrupt { line: 1, .. })));
}

#[test]
fn no_votes_exports_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (_, m) = fixture(4);
    let s = StudyState::in_memory(m, rule(), 1).unwrap();
    let out = dir.path().join("labels.jsonl");
    let sum = s.export_labels(&out).unwrap();
    assert_eq!((sum.labeled, sum.pending, sum.excluded), (0, 4, 0));
    assert!(read_manifest(&out).unwrap().records.is_empty());
}

/// Five raters on twenty triplets: unanimous, 4-1 and 3-2 splits.
#[test]
fn five_rater_study_feeds_benchmark_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let (_, m) = fixture(20);
    let mut s = StudyState::open(m.clone(), rule(), 2, dir.path().join("votes.jsonl")).unwrap();
    let order = ids(&s);
    let mut truth = BTreeMap::new();
    for (k, id) in order.iter().enumerate() {
        let t = u8::from(k % 4 == 3);
        truth.insert(id.clone(), t);
        let dissent = match k {
            0..=9 => 0,
            10..=14 => 1,
            _ => 2,
        };
        for r in 0..5 {
            let c = if r >= 5 - dissent { 1 - t } else { t };
            let a = s.assign_next(&format!("r{r}"), 0).unwrap();
            assert_eq!(a.triplet.unwrap().triplet_id, *id);
            s.record_vote(VoteRecord::new(id, &format!("r{r}"), c, (k * 5 + r) as u64)).unwrap();
        }
    }
    let out = dir.path().join("labels.jsonl");
    let sum = s.export_labels(&out).unwrap();
    assert_eq!((sum.labeled, sum.excluded, sum.pending), (15, 5, 0));

    let labeled = read_manifest(&out).unwrap();
    let (expected, _) = s.labeled_manifest();
    assert_eq!(labeled, expected);
    for (k, id) in order.iter().enumerate() {
        let rec = labeled.get(id);
        if k < 15 {
            assert_eq!(rec.unwrap().label, Some(truth[id]));
        } else {
            assert!(rec.is_none());
        }
    }
    let tallies: Aggregation = serde_json::from_slice(&std::fs::read(tallies_path(&out)).unwrap()).unwrap();
    assert_eq!(tallies, s.aggregate());
    assert_eq!(tallies.tallies[&order[12]].fraction, Some(0.8));
    assert_eq!(tallies.tallies[&order[17]].fraction, Some(0.6));

    // Scripted scorer: prefers the milder distortion.
    let decisions: Vec<_> = labeled
        .records
        .iter()
        .map(|r| decide(-f64::from(r.distortion_pos.level), -f64::from(r.distortion_neg.level)))
        .collect();
    let labels: Vec<u8> = labeled.records.iter().map(|r| r.label.unwrap()).collect();
    let scenes: Vec<String> = labeled.records.iter().map(|r| r.scene_id.clone()).collect();
    let rep = two_afc_accuracy(&decisions, &labels, &scenes).unwrap();
    let expected_correct = labeled
        .records
        .iter()
        .filter(|r| {
            let pick = u8::from(r.distortion_neg.level < r.distortion_pos.level);
            Some(pick) == r.label
        })
        .count();
    assert_eq!(rep.total, 15);
    assert_eq!(rep.correct, expected_correct);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_survive_a_rescan_of_the_log(
        raw in proptest::collection::vec((0usize..4, 0usize..7, 0u8..2, 0u64..6), 0..120),
        min_raters in 1usize..6,
        theta_pct in 50u32..=100,
    ) {
        let (_, m) = fixture(4);
        let cfg = StudyConfig { min_raters, theta: f64::from(theta_pct) / 100.0 };
        let mut s = StudyState::in_memory(m, cfg, 1).unwrap();
        let order = ids(&s);
        for &(t, r, c, ts) in &raw {
            s.record_vote(VoteRecord::new(&order[t], &format!("r{r}"), c, ts)).unwrap();
        }
        let agg = s.aggregate();
        // Independent rescan: for each (triplet, rater) keep the last max-timestamp vote.
        let mut eff: BTreeMap<(usize, usize), (u64, usize, u8)> = BTreeMap::new();
        for (i, &(t, r, c, ts)) in raw.iter().enumerate() {
            let e = eff.entry((t, r)).or_insert((ts, i, c));
            if ts >= e.0 {
                *e = (ts, i, c);
            }
        }
        prop_assert_eq!(effective_votes(s.votes()).len(), eff.len());
        for (t, id) in order.iter().enumerate() {
            let votes: Vec<u8> = eff.iter().filter(|(k, _)| k.0 == t).map(|(_, v)| v.2).collect();
            let ones = votes.iter().filter(|&&c| c == 1).count();
            let zeros = votes.len() - ones;
            let tally = &agg.tallies[id];
            prop_assert_eq!((tally.count0, tally.count1), (zeros, ones));
            match tally.status {
                TallyStatus::Labeled { label } => {
                    prop_assert!(votes.len() >= min_raters);
                    let majority = zeros.max(ones);
                    prop_assert!(majority as f64 / votes.len() as f64 >= cfg.theta);
                    prop_assert_eq!(label, u8::from(ones > zeros));
                }
                TallyStatus::Pending => prop_assert!(votes.len() < min_raters),
                TallyStatus::Excluded => {
                    prop_assert!(votes.len() >= min_raters);
                    prop_assert!(zeros == ones || (zeros.max(ones) as f64 / votes.len() as f64) < cfg.theta);
                }
            }
        }
    }
}
