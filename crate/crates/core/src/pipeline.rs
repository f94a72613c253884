//! End-to-end toy run: synthetic scenes → triplets → supervision filter →
//! training → held-out 2AFC evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{
    build_triplets, frame_file_name, record_stream_key, score_triplets, supervision_filter,
    write_manifest, BuildStats, FilterStats, Manifest, ManifestHeader, Resolver, Scenes,
    TripletRecord,
};
use crate::embed::{head_forward, image_embedding, patch_features, Embedding, EmbeddingHead};
use crate::error::{Error, Result};
use crate::evalkit::{epoch_window_summary, flip_rate, two_afc_accuracy, EvalReport, WindowSummary};
use crate::imagecore::{save_image, PatchGrid};
use crate::rng::hash_str;
use crate::score::{two_afc_decide, Decision, ReferenceKind};
use crate::synth::{render_scene, SceneSpec};
use crate::train::{train_loop_with, write_checkpoint, write_loss_log, TrainSample};

/// Runs `f` on a pool of `jobs` threads (0 = all cores).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

const PANS: [(i64, i64); 3] = [(1, 0), (0, 1), (1, 1)];
const VELOCITIES: [(i64, i64); 3] = [(2, 1), (-1, 2), (2, -2)];

pub fn scene_id(i: usize) -> String {
    format!("scene{i:02}")
}

pub fn synth_scenes(cfg: &RunConfig) -> Scenes {
    let s = cfg.synth;
    let base = cfg.stage_seed("scenes");
    (0..s.scenes)
        .into_par_iter()
        .map(|i| {
            let spec = SceneSpec {
                pan: PANS[i % 3],
                object_velocity: VELOCITIES[i % 3],
                ..SceneSpec::toy(s.width, s.height, s.frames)
            };
            (scene_id(i), render_scene(&spec, base.wrapping_add(i as u64)))
        })
        .collect()
}

/// Writes every scene as numbered PNGs under `dir/<scene id>/`; returns the
/// relative directory per scene.
pub fn write_scenes(scenes: &Scenes, dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (id, frames) in scenes {
        let sub = dir.join(id);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        frames
            .par_iter()
            .enumerate()
            .try_for_each(|(i, f)| save_image(f, sub.join(frame_file_name(i))))?;
        out.insert(id.clone(), id.clone());
    }
    Ok(out)
}

pub fn build_corpus(cfg: &RunConfig, scenes: &Scenes) -> Result<(Manifest, BuildStats)> {
    let seed = cfg.stage_seed("triplets");
    let mut header = ManifestHeader::new(seed, cfg.corpus, cfg.flow, cfg.troi);
    let mut stats = BuildStats::default();
    let mut records = Vec::new();
    for (id, frames) in scenes {
        let (recs, s) = build_triplets(id, frames, &cfg.corpus, seed)?;
        stats.emitted += s.emitted;
        stats.skipped += s.skipped;
        records.extend(recs);
        header.scenes.insert(id.clone(), id.clone());
    }
    Ok((Manifest { header, records }, stats))
}

/// Splits records by time: targets in the last `fraction` of each scene are
/// held out; training records keep target and reference before the cut.
pub fn split_holdout(
    records: &[TripletRecord],
    scenes: &Scenes,
    fraction: f64,
) -> (Vec<TripletRecord>, Vec<TripletRecord>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in records {
        let n = scenes.get(&r.scene_id).map_or(0, Vec::len);
        let cut = ((n as f64) * (1.0 - fraction)).floor() as usize;
        if r.target_index >= cut {
            test.push(r.clone());
        } else if r.reference_index < cut {
            train.push(r.clone());
        }
    }
    (train, test)
}

pub fn record_samples(records: &[TripletRecord], resolver: &Resolver<'_>, patch: usize) -> Result<Vec<TrainSample>> {
    records
        .par_iter()
        .map(|r| {
            let t = resolver.resolve(r)?;
            let grid = PatchGrid::for_image(&t.target, patch)?;
            Ok(TrainSample {
                id: r.triplet_id.clone(),
                key: record_stream_key(r),
                feats: [
                    patch_features(&t.target, &grid)?,
                    patch_features(&t.reference, &grid)?,
                    patch_features(&t.pos, &grid)?,
                    patch_features(&t.neg, &grid)?,
                ],
            })
        })
        .collect()
}

/// Aligned and non-aligned 2AFC decisions of a head on prepared samples.
pub fn decide_samples(head: &EmbeddingHead, samples: &[TrainSample]) -> Result<(Vec<Decision>, Vec<Decision>)> {
    let per: Vec<(Decision, Decision)> = samples
        .par_iter()
        .map(|s| {
            let e: Vec<Embedding> = s
                .feats
                .iter()
                .map(|f| image_embedding(&head_forward(f, head)?))
                .collect::<Result<_>>()?;
            Ok((two_afc_decide(&e[0], &e[2], &e[3])?, two_afc_decide(&e[1], &e[2], &e[3])?))
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().unzip())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochAccuracy {
    pub epoch: usize,
    pub aligned: f64,
    pub non_aligned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub generated: usize,
    pub skipped: usize,
    pub filter: FilterStats,
    pub train_records: usize,
    pub test_records: usize,
    pub aligned: EvalReport,
    pub non_aligned: EvalReport,
    /// Aligned minus non-aligned accuracy of the final checkpoint.
    pub gap: f64,
    pub flip_rate: f64,
    pub window_aligned: WindowSummary,
    pub window_non_aligned: WindowSummary,
    pub epochs: Vec<EpochAccuracy>,
}

impl PipelineReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "triplets generated {} (skipped {}), kept {} (ambiguous {}, disagreement {})\n\
             train {} / held-out {}\n\n",
            self.generated,
            self.skipped,
            self.filter.kept,
            self.filter.dropped_ambiguous,
            self.filter.dropped_disagreement,
            self.train_records,
            self.test_records
        );
        s.push_str(&self.aligned.to_table());
        s.push('\n');
        s.push_str(&self.non_aligned.to_table());
        s.push_str(&format!("\naligned − non-aligned gap  {:.4}\n", self.gap));
        s
    }
}

/// Runs the toy pipeline. With `out`, every intermediate artifact and the
/// resolved configuration are written there.
pub fn run_pipeline(cfg: &RunConfig, out: Option<&Path>) -> Result<PipelineReport> {
    cfg.validate()?;
    with_jobs(cfg.jobs, || run_inner(cfg, out))?
}

fn run_inner(cfg: &RunConfig, out: Option<&Path>) -> Result<PipelineReport> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.write_snapshot(dir)?;
    }
    let scenes = synth_scenes(cfg);
    if let Some(dir) = out {
        write_scenes(&scenes, &dir.join("frames"))?;
    }
    let (mut manifest, built) = build_corpus(cfg, &scenes)?;
    if out.is_some() {
        manifest.header.scenes = manifest
            .header
            .scenes
            .iter()
            .map(|(k, v)| (k.clone(), format!("frames/{v}")))
            .collect();
    }
    let mut resolver = Resolver::new(&scenes, &manifest.header);
    resolver.prepare(&manifest.records)?;
    let scores = score_triplets(&manifest.records, &resolver)?;
    let f = &cfg.filter;
    let (filtered, filter_stats) = supervision_filter(
        &manifest,
        &scores,
        (f.scorers[0].as_str(), f.scorers[1].as_str()),
        (f.tau[0], f.tau[1]),
    )?;
    if let Some(dir) = out {
        write_manifest(&manifest, dir.join("manifest.jsonl"))?;
        scores.write_csv(dir.join("scores.csv"))?;
        write_manifest(&filtered, dir.join("manifest_filtered.jsonl"))?;
    }

    let (train_recs, test_all) = split_holdout(&filtered.records, &scenes, cfg.eval.holdout_fraction);
    let test_recs: Vec<TripletRecord> = test_all
        .into_iter()
        .filter(|r| r.level_gap() >= cfg.eval.min_level_gap)
        .collect();
    if train_recs.is_empty() || test_recs.is_empty() {
        return Err(Error::NoSamples);
    }
    let tcfg = cfg.trainer();
    let train = record_samples(&train_recs, &resolver, tcfg.patch_size)?;
    let test = record_samples(&test_recs, &resolver, tcfg.patch_size)?;
    let labels = vec![0u8; test.len()];
    let scene_ids: Vec<String> = test_recs.iter().map(|r| r.scene_id.clone()).collect();

    let ck_dir = out.map(|d| d.join("checkpoints"));
    if let Some(d) = &ck_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let keep = tcfg.keep_checkpoints.max(1);
    let mut epochs = Vec::new();
    let mut last = None;
    let result = train_loop_with(&train, &tcfg, |ck| {
        let stored = ck.stored()?;
        let (al, na) = decide_samples(&stored.head, &test)?;
        epochs.push(EpochAccuracy {
            epoch: ck.epoch,
            aligned: two_afc_accuracy(&al, &labels, &[])?.accuracy,
            non_aligned: two_afc_accuracy(&na, &labels, &[])?.accuracy,
        });
        if let Some(d) = &ck_dir {
            write_checkpoint(&stored, d.join(checkpoint_name(ck.epoch)))?;
            if ck.epoch >= keep {
                let old = d.join(checkpoint_name(ck.epoch - keep));
                std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
        last = Some((stored.epoch, al, na));
        Ok(())
    })?;
    if let Some(dir) = out {
        write_loss_log(&result.log, dir.join("loss_log.csv"))?;
    }
    let (last_epoch, al, na) = last.ok_or(Error::NoSamples)?;
    let window = cfg.eval.window.min(epochs.len());
    let acc_a: Vec<f64> = epochs.iter().map(|e| e.aligned).collect();
    let acc_n: Vec<f64> = epochs.iter().map(|e| e.non_aligned).collect();
    let window_aligned = epoch_window_summary(&acc_a, window)?;
    let window_non_aligned = epoch_window_summary(&acc_n, window)?;
    let model_id = format!("toy-head-epoch{last_epoch:03}");
    let mut manifest_bytes = Vec::new();
    crate::corpus::write_manifest_to(&filtered, &mut manifest_bytes).map_err(|e| Error::io("<manifest>", e))?;
    let manifest_id = format!("{:016x}", hash_str(&String::from_utf8_lossy(&manifest_bytes)));
    let flips = flip_rate(
        &al.iter().map(|d| d.choice).collect::<Vec<_>>(),
        &na.iter().map(|d| d.choice).collect::<Vec<_>>(),
    )?;
    let report_for = |kind, decisions: &[Decision], w| -> Result<EvalReport> {
        Ok(EvalReport {
            model_id: model_id.clone(),
            manifest_id: manifest_id.clone(),
            reference_kind: kind,
            accuracy: two_afc_accuracy(decisions, &labels, &scene_ids)?,
            correlations: None,
            flip_rate: Some(flips),
            epoch_window: Some(w),
        })
    };
    let aligned = report_for(ReferenceKind::Aligned, &al, window_aligned)?;
    let non_aligned = report_for(ReferenceKind::NonAligned, &na, window_non_aligned)?;
    let report = PipelineReport {
        generated: built.emitted,
        skipped: built.skipped,
        filter: filter_stats,
        train_records: train.len(),
        test_records: test.len(),
        gap: aligned.accuracy.accuracy - non_aligned.accuracy.accuracy,
        aligned,
        non_aligned,
        flip_rate: flips,
        window_aligned,
        window_non_aligned,
        epochs,
    };
    if let Some(dir) = out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
        let p = dir.join("report.json");
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("report.txt");
        std::fs::write(&p, report.to_table()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch:03}.nvck")
}
