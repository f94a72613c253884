#![allow(dead_code)]

use std::collections::BTreeMap;

use nariqa_core::corpus::{build_triplets, CorpusParams, Manifest, ManifestHeader, Scenes};
use nariqa_core::flowtroi::{FlowParams, TroiParams};
use nariqa_core::synth::{render_scene, SceneSpec};

/// A small rendered scene and a manifest holding its first `n` triplets.
pub fn fixture(n: usize) -> (Scenes, Manifest) {
    let mut scenes: Scenes = BTreeMap::new();
    scenes.insert("s".into(), render_scene(&SceneSpec::toy(48, 48, 16), 3));
    let mut header = ManifestHeader::new(11, CorpusParams::default(), FlowParams::default(), TroiParams::default());
    header.scenes.insert("s".into(), "s".into());
    let params = CorpusParams {
        per_target: 2,
        ..CorpusParams::default()
    };
    let (mut recs, _) = build_triplets("s", &scenes["s"], &params, 5).unwrap();
    assert!(recs.len() >= n, "fixture has only {} triplets", recs.len());
    recs.truncate(n);
    (scenes, Manifest { header, records: recs })
}
