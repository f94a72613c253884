mod common;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use common::{oracle_filter, OracleScores};
use nariqa_core::config::RunConfig;
use nariqa_core::corpus::{
    build_triplets, read_manifest_from, score_triplets, ssim, supervision_filter, write_manifest_to, CorpusParams,
    Manifest, ManifestHeader, OrderSource, Orientation, Resolver, Role, ScoreTable, TripletRecord,
};
use nariqa_core::distort::DistortionSpec;
use nariqa_core::flowtroi::{FlowParams, TroiParams};
use nariqa_core::pipeline::{build_corpus, synth_scenes, with_jobs};
use nariqa_core::synth::{render_scene, textured_image, SceneSpec};
use nariqa_core::Image;
use proptest::prelude::*;

fn header() -> ManifestHeader {
    ManifestHeader::new(9, CorpusParams::default(), FlowParams::default(), TroiParams::default())
}

fn record(i: usize) -> TripletRecord {
    TripletRecord {
        triplet_id: format!("p-t{i:05}-0"),
        scene_id: "p".into(),
        target_index: i,
        reference_index: i + 1,
        k: 1,
        distortion_pos: DistortionSpec::new("darken", 2, i as u64).unwrap(),
        distortion_neg: DistortionSpec::new("darken", 5, i as u64 + 1).unwrap(),
        troi_coverage: 0.6,
        mask_seed: i as u64,
        order_source: OrderSource::Construction,
        label: None,
    }
}

fn scene() -> &'static Vec<Image> {
    static FRAMES: OnceLock<Vec<Image>> = OnceLock::new();
    FRAMES.get_or_init(|| render_scene(&SceneSpec::toy(48, 48, 30), 5))
}

proptest! {
    #[test]
    fn filter_output_survives_a_rescan(
        scores in proptest::collection::vec((0u8..20, 0u8..20, 0u8..20, 0u8..20), 1..100),
        tau_a in 0.0f64..0.3,
        tau_b in 0.0f64..0.3,
    ) {
        let records: Vec<TripletRecord> = (0..scores.len()).map(record).collect();
        let mut table = ScoreTable::default();
        let mut oracle = BTreeMap::new();
        for (r, s) in records.iter().zip(&scores) {
            let o = OracleScores {
                a_pos: f64::from(s.0) / 20.0,
                a_neg: f64::from(s.1) / 20.0,
                b_pos: f64::from(s.2) / 20.0,
                b_neg: f64::from(s.3) / 20.0,
            };
            table.push(&r.triplet_id, Role::Pos, "a", o.a_pos, Orientation::LowerBetter);
            table.push(&r.triplet_id, Role::Neg, "a", o.a_neg, Orientation::LowerBetter);
            table.push(&r.triplet_id, Role::Pos, "b", 1.0 - o.b_pos, Orientation::HigherBetter);
            table.push(&r.triplet_id, Role::Neg, "b", 1.0 - o.b_neg, Orientation::HigherBetter);
            oracle.insert(r.triplet_id.clone(), o);
        }
        let m = Manifest { header: header(), records };
        let (out, stats) = supervision_filter(&m, &table, ("a", "b"), (tau_a, tau_b)).unwrap();
        prop_assert_eq!(stats.kept + stats.dropped_ambiguous + stats.dropped_disagreement, scores.len());
        let raw = |id: &str, role: Role, scorer: &str| {
            table.rows.iter().find(|r| r.triplet_id == id && r.role == role && r.scorer == scorer).unwrap().score
        };
        for r in &out.records {
            prop_assert_eq!(r.order_source, OrderSource::Supervision);
            // After reordering, pos must be better under both scorers by at least tau.
            let swapped = r.distortion_pos.level == 5;
            let (p, n) = if swapped { (Role::Neg, Role::Pos) } else { (Role::Pos, Role::Neg) };
            let gap_a = raw(&r.triplet_id, n, "a") - raw(&r.triplet_id, p, "a");
            let gap_b = raw(&r.triplet_id, p, "b") - raw(&r.triplet_id, n, "b");
            prop_assert!(gap_a >= tau_a && gap_a > 0.0);
            prop_assert!(gap_b >= tau_b && gap_b > 0.0);
            prop_assert_eq!(oracle_filter(&oracle[&r.triplet_id], tau_a, tau_b), Some(swapped));
        }
        let kept: usize = oracle.values().filter(|o| oracle_filter(o, tau_a, tau_b).is_some()).count();
        prop_assert_eq!(kept, out.records.len());
    }

    #[test]
    fn build_obeys_distance_and_order_laws(seed in any::<u64>(), k_max in 1usize..=15, per in 1usize..4) {
        let p = CorpusParams { k_max, per_target: per, ..CorpusParams::default() };
        let (recs, _) = build_triplets("s", scene(), &p, seed).unwrap();
        let (again, _) = build_triplets("s", scene(), &p, seed).unwrap();
        prop_assert_eq!(&recs, &again);
        for r in &recs {
            let d = r.target_index.abs_diff(r.reference_index);
            prop_assert!((1..=k_max).contains(&d));
            prop_assert!(r.reference_index < scene().len());
            prop_assert!(r.distortion_pos.level < r.distortion_neg.level);
            prop_assert_eq!(r.order_source, OrderSource::Construction);
        }
    }

    #[test]
    fn manifest_round_trips(seed in any::<u64>()) {
        let (recs, _) = build_triplets("s", scene(), &CorpusParams::default(), seed).unwrap();
        let mut h = header();
        h.scenes.insert("s".into(), "frames/s".into());
        let m = Manifest { header: h, records: recs };
        let mut buf = Vec::new();
        write_manifest_to(&m, &mut buf).unwrap();
        let back = read_manifest_from(buf.as_slice(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_is_symmetric(sa in 0u64..500, sb in 0u64..500) {
        let a = textured_image(40, 40, sa);
        let b = textured_image(40, 40, sb);
        let (x, y) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn supervision_order_law_on_real_scores() {
    let frames = scene().clone();
    let mut scenes = BTreeMap::new();
    scenes.insert("s".to_string(), frames);
    let (recs, _) = build_triplets("s", &scenes["s"], &CorpusParams::default(), 4).unwrap();
    let mut h = header();
    h.scenes.insert("s".into(), "s".into());
    let m = Manifest { header: h, records: recs };
    let mut resolver = Resolver::new(&scenes, &m.header);
    resolver.prepare(&m.records).unwrap();
    let table = score_triplets(&m.records, &resolver).unwrap();
    let (out, _) = supervision_filter(&m, &table, ("ssim", "gmsd"), (0.005, 0.005)).unwrap();
    assert!(!out.records.is_empty());
    for r in &out.records {
        let t = resolver.resolve(r).unwrap();
        // Pos must be the better image under both scorers.
        assert!(ssim(&t.target, &t.pos).unwrap() > ssim(&t.target, &t.neg).unwrap());
        assert!(nariqa_core::corpus::gmsd(&t.target, &t.pos).unwrap() < nariqa_core::corpus::gmsd(&t.target, &t.neg).unwrap());
    }
}

#[test]
fn corpus_and_scores_do_not_depend_on_worker_count() {
    let mut cfg = RunConfig::toy();
    cfg.synth.frames = 20;
    cfg.synth.width = 48;
    cfg.synth.height = 48;
    let build = |jobs: usize| {
        with_jobs(jobs, || {
            let scenes = synth_scenes(&cfg);
            let (m, _) = build_corpus(&cfg, &scenes).unwrap();
            let mut r = Resolver::new(&scenes, &m.header);
            r.prepare(&m.records).unwrap();
            let t = score_triplets(&m.records, &r).unwrap();
            (m, t)
        })
        .unwrap()
    };
    let (m1, t1) = build(1);
    let (m4, t4) = build(4);
    assert_eq!(m1, m4);
    assert_eq!(t1, t4);
}
