//! Triplet corpora: construction from frame sequences, full-reference
//! scoring, dual-scorer supervision filtering and JSON Lines manifests.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distort::{apply_masked, catalog_list, DistortionSpec, LEVELS};
use crate::error::{Error, Result};
use crate::flowtroi::{
    estimate_flow_with, feather_mask, flow_magnitude, troi_from_flow, FlowParams, TroiMask,
    TroiParams,
};
use crate::imagecore::{load_image, Image, Plane};
use crate::rng::{hash_str, mix, stream};

pub const MANIFEST_FORMAT: &str = "nariqa-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MIN_FRAMES: usize = 16;

/// Frames per scene, keyed by scene id.
pub type Scenes = BTreeMap<String, Vec<Image>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusParams {
    pub per_target: usize,
    pub k_max: usize,
    pub coverage_min: f64,
    pub coverage_max: f64,
    /// Mean absolute luma difference between consecutive frames that counts
    /// as a scene cut.
    pub scene_change_threshold: f64,
    pub max_attempts: usize,
    pub target_stride: usize,
    /// Distortions are confined to the motion mask; when false they cover
    /// the whole frame.
    pub use_troi: bool,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            per_target: 3,
            k_max: 15,
            coverage_min: 0.30,
            coverage_max: 0.85,
            scene_change_threshold: 30.0 / 255.0,
            max_attempts: 20,
            target_stride: 1,
            use_troi: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderSource {
    Construction,
    Supervision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub triplet_id: String,
    pub scene_id: String,
    pub target_index: usize,
    pub reference_index: usize,
    pub k: usize,
    pub distortion_pos: DistortionSpec,
    pub distortion_neg: DistortionSpec,
    pub troi_coverage: f64,
    pub mask_seed: u64,
    pub order_source: OrderSource,
    /// 0 when the first distorted image is preferred.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl TripletRecord {
    pub fn level_gap(&self) -> i32 {
        i32::from(self.distortion_neg.level) - i32::from(self.distortion_pos.level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub corpus: CorpusParams,
    pub flow: FlowParams,
    pub troi: TroiParams,
    /// Scene id → directory of numbered PNG frames.
    #[serde(default)]
    pub scenes: BTreeMap<String, String>,
}

impl ManifestHeader {
    pub fn new(seed: u64, corpus: CorpusParams, flow: FlowParams, troi: TroiParams) -> Self {
        Self {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            seed,
            corpus,
            flow,
            troi,
            scenes: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<TripletRecord>,
}

impl Manifest {
    pub fn empty(header: ManifestHeader) -> Self {
        Self {
            header,
            records: Vec::new(),
        }
    }

    pub fn with_records(&self, records: Vec<TripletRecord>) -> Self {
        Self {
            header: self.header.clone(),
            records,
        }
    }

    pub fn get(&self, triplet_id: &str) -> Option<&TripletRecord> {
        self.records.iter().find(|r| r.triplet_id == triplet_id)
    }
}

/// True when a scene cut lies between frames `i` and `j`.
pub fn scene_change_guard(frames: &[Image], i: usize, j: usize, threshold: f64) -> Result<bool> {
    if i >= frames.len() || j >= frames.len() {
        return Err(Error::InvalidArgument(format!(
            "frame index out of range ({i}, {j}) for {} frames",
            frames.len()
        )));
    }
    let (lo, hi) = (i.min(j), i.max(j));
    let lumas: Vec<Plane> = frames[lo..=hi].iter().map(Image::luma).collect();
    Ok(lumas
        .windows(2)
        .any(|w| mean_abs_diff(&w[0], &w[1]) > threshold))
}

fn mean_abs_diff(a: &Plane, b: &Plane) -> f64 {
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    s / a.data.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub emitted: usize,
    /// Records dropped because no admissible reference was found.
    pub skipped: usize,
}

/// Builds `per_target` triplets around every selected target frame.
pub fn build_triplets(
    scene_id: &str,
    frames: &[Image],
    params: &CorpusParams,
    seed: u64,
) -> Result<(Vec<TripletRecord>, BuildStats)> {
    let n = frames.len();
    if n < MIN_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "scene {scene_id} has {n} frames, need at least {MIN_FRAMES}"
        )));
    }
    if params.k_max == 0 || params.per_target == 0 || params.target_stride == 0 {
        return Err(Error::InvalidArgument(
            "k_max, per_target and target_stride must be ≥ 1".into(),
        ));
    }
    if !(params.coverage_min <= params.coverage_max) {
        return Err(Error::InvalidArgument("coverage range is empty".into()));
    }
    if let Some(f) = frames.iter().find(|f| !f.same_shape(&frames[0])) {
        return Err(Error::DimensionMismatch(format!(
            "scene {scene_id} mixes {}x{} and {}x{} frames",
            frames[0].width(),
            frames[0].height(),
            f.width(),
            f.height()
        )));
    }
    let lumas: Vec<Plane> = frames.par_iter().map(Image::luma).collect();
    let cuts: Vec<bool> = lumas
        .windows(2)
        .map(|w| mean_abs_diff(&w[0], &w[1]) > params.scene_change_threshold)
        .collect();
    // blocked(i, j): any cut between consecutive frames in [min, max].
    let blocked = |i: usize, j: usize| cuts[i.min(j)..i.max(j)].iter().any(|&c| c);
    let catalog = catalog_list();
    let targets: Vec<usize> = (0..n).step_by(params.target_stride).collect();
    let per_target: Vec<(Vec<TripletRecord>, usize)> = targets
        .par_iter()
        .map(|&i| {
            let mut rng = stream(&[seed, hash_str(scene_id), i as u64]);
            let mut out = Vec::with_capacity(params.per_target);
            let mut skipped = 0;
            for j in 0..params.per_target {
                let mut reference = None;
                for _ in 0..params.max_attempts {
                    let k = rng.random_range(1..=params.k_max);
                    let plus = rng.random_bool(0.5);
                    let r = match (i.checked_sub(k), i + k < n) {
                        (Some(minus), true) => {
                            if plus {
                                i + k
                            } else {
                                minus
                            }
                        }
                        (Some(minus), false) => minus,
                        (None, true) => i + k,
                        (None, false) => continue,
                    };
                    if !blocked(i, r) {
                        reference = Some((r, k));
                        break;
                    }
                }
                let type_index = rng.random_range(0..catalog.len());
                let coverage = if params.coverage_max > params.coverage_min {
                    rng.random_range(params.coverage_min..params.coverage_max)
                } else {
                    params.coverage_min
                };
                let l1 = rng.random_range(1..=LEVELS as u8);
                let mut l2 = rng.random_range(1..LEVELS as u8);
                if l2 >= l1 {
                    l2 += 1;
                }
                let (lp, ln) = (l1.min(l2), l1.max(l2));
                let seed_pos: u64 = rng.random();
                let seed_neg: u64 = rng.random();
                let mask_seed: u64 = rng.random();
                let Some((r, k)) = reference else {
                    skipped += 1;
                    continue;
                };
                let type_id = &catalog.entries[type_index].type_id;
                out.push(TripletRecord {
                    triplet_id: format!("{scene_id}-t{i:05}-{j}"),
                    scene_id: scene_id.to_string(),
                    target_index: i,
                    reference_index: r,
                    k,
                    distortion_pos: DistortionSpec::new(type_id, lp, seed_pos)?,
                    distortion_neg: DistortionSpec::new(type_id, ln, seed_neg)?,
                    troi_coverage: coverage,
                    mask_seed,
                    order_source: OrderSource::Construction,
                    label: None,
                });
            }
            Ok((out, skipped))
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    let mut stats = BuildStats::default();
    for (recs, skipped) in per_target {
        stats.skipped += skipped;
        records.extend(recs);
    }
    stats.emitted = records.len();
    Ok((records, stats))
}

/// The four images of a triplet plus the mask used for both distortions.
#[derive(Debug, Clone)]
pub struct ResolvedTriplet {
    pub target: Image,
    pub reference: Image,
    pub pos: Image,
    pub neg: Image,
    pub mask: TroiMask,
}

/// Materializes triplet images from scene frames; masks are computed once
/// per (scene, target, coverage).
pub struct Resolver<'a> {
    scenes: &'a Scenes,
    header: &'a ManifestHeader,
    masks: HashMap<(String, usize, u64), TroiMask>,
}

impl<'a> Resolver<'a> {
    pub fn new(scenes: &'a Scenes, header: &'a ManifestHeader) -> Self {
        Self {
            scenes,
            header,
            masks: HashMap::new(),
        }
    }

    fn frames(&self, scene: &str) -> Result<&'a [Image]> {
        self.scenes
            .get(scene)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scene `{scene}`")))
    }

    fn mask_key(rec: &TripletRecord) -> (String, usize, u64) {
        (rec.scene_id.clone(), rec.target_index, rec.troi_coverage.to_bits())
    }

    fn compute_mask(&self, rec: &TripletRecord) -> Result<TroiMask> {
        let frames = self.frames(&rec.scene_id)?;
        let i = rec.target_index;
        if i >= frames.len() || rec.reference_index >= frames.len() {
            return Err(Error::InvalidArgument(format!(
                "record {} points past the end of scene {}",
                rec.triplet_id, rec.scene_id
            )));
        }
        let target = &frames[i];
        if !self.header.corpus.use_troi {
            return Ok(TroiMask::full(target.width(), target.height()));
        }
        let neighbor = if i > 0 { &frames[i - 1] } else { &frames[(i + 1).min(frames.len() - 1)] };
        let flow = estimate_flow_with(neighbor, target, &self.header.flow)?;
        let troi = TroiParams {
            min_coverage: self.header.troi.min_coverage.min(rec.troi_coverage),
            max_coverage: self.header.troi.max_coverage.max(rec.troi_coverage),
            ..self.header.troi
        };
        let mask = troi_from_flow(&flow_magnitude(&flow), rec.troi_coverage, &troi)?;
        Ok(feather_mask(&mask, self.header.troi.feather_sigma))
    }

    /// Computes all masks needed by `records` in parallel.
    pub fn prepare(&mut self, records: &[TripletRecord]) -> Result<()> {
        let mut todo: Vec<&TripletRecord> = Vec::new();
        let mut seen = HashSet::new();
        for r in records {
            let key = Self::mask_key(r);
            if !self.masks.contains_key(&key) && seen.insert(key) {
                todo.push(r);
            }
        }
        let computed: Vec<_> = todo
            .par_iter()
            .map(|r| Ok((Self::mask_key(r), self.compute_mask(r)?)))
            .collect::<Result<_>>()?;
        self.masks.extend(computed);
        Ok(())
    }

    pub fn mask(&self, rec: &TripletRecord) -> Result<TroiMask> {
        match self.masks.get(&Self::mask_key(rec)) {
            Some(m) => Ok(m.clone()),
            None => self.compute_mask(rec),
        }
    }

    pub fn resolve(&self, rec: &TripletRecord) -> Result<ResolvedTriplet> {
        let frames = self.frames(&rec.scene_id)?;
        let mask = self.mask(rec)?;
        let target = frames[rec.target_index].clone();
        let reference = frames[rec.reference_index].clone();
        let pos = apply_masked(&target, &rec.distortion_pos, &mask)?;
        let neg = apply_masked(&target, &rec.distortion_neg, &mask)?;
        Ok(ResolvedTriplet {
            target,
            reference,
            pos,
            neg,
            mask,
        })
    }
}

/// Loads every `*.png` in a directory, sorted by file name.
pub fn load_frames(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.par_iter().map(load_image).collect()
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Loads all scenes named in a manifest header; relative directories are
/// resolved against `base`.
pub fn load_scenes(header: &ManifestHeader, base: &Path) -> Result<Scenes> {
    header
        .scenes
        .iter()
        .map(|(id, dir)| {
            let p = Path::new(dir);
            let p = if p.is_relative() { base.join(p) } else { p.to_path_buf() };
            Ok((id.clone(), load_frames(&p)?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Full-reference scorers

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-region separable filter.
fn filter_valid(data: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0f64; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0f64; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

pub const SSIM_WINDOW: usize = 11;

/// Single-scale SSIM on luma (11×11 Gaussian window, σ = 1.5, unit range).
pub fn ssim(reference: &Image, test: &Image) -> Result<f64> {
    if !reference.same_shape(test) {
        return Err(Error::DimensionMismatch("ssim inputs differ in size".into()));
    }
    if reference.width().min(reference.height()) < SSIM_WINDOW {
        return Err(Error::TooSmall(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels"
        )));
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let (w, h) = (reference.width(), reference.height());
    let a: Vec<f64> = reference.luma().data.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = test.luma().data.iter().map(|&v| v as f64).collect();
    let k = gaussian_window(SSIM_WINDOW, 1.5);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let (mu_a, _, _) = filter_valid(&a, w, h, &k);
    let (mu_b, _, _) = filter_valid(&b, w, h, &k);
    let (e_aa, _, _) = filter_valid(&aa, w, h, &k);
    let (e_bb, _, _) = filter_valid(&bb, w, h, &k);
    let (e_ab, _, _) = filter_valid(&ab, w, h, &k);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

pub const GMSD_C: f64 = 0.0026;

fn prewitt_magnitude(p: &Plane) -> Vec<f64> {
    let (w, h) = (p.width, p.height);
    let mut out = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let g = |dx: isize, dy: isize| p.get((x as isize + dx) as usize, (y as isize + dy) as usize) as f64;
            let gx = (g(-1, -1) + g(-1, 0) + g(-1, 1) - g(1, -1) - g(1, 0) - g(1, 1)) / 3.0;
            let gy = (g(-1, -1) + g(0, -1) + g(1, -1) - g(-1, 1) - g(0, 1) - g(1, 1)) / 3.0;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Gradient magnitude similarity deviation (lower is better).
pub fn gmsd(reference: &Image, test: &Image) -> Result<f64> {
    if !reference.same_shape(test) {
        return Err(Error::DimensionMismatch("gmsd inputs differ in size".into()));
    }
    if reference.width().min(reference.height()) < 3 {
        return Err(Error::TooSmall("gmsd needs at least 3x3 pixels".into()));
    }
    let ga = prewitt_magnitude(&reference.luma());
    let gb = prewitt_magnitude(&test.luma());
    let map: Vec<f64> = ga
        .iter()
        .zip(&gb)
        .map(|(&a, &b)| (2.0 * a * b + GMSD_C) / (a * a + b * b + GMSD_C))
        .collect();
    let n = map.len() as f64;
    let mean = map.iter().sum::<f64>() / n;
    Ok((map.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

// ---------------------------------------------------------------------------
// Score tables and supervision

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Pos,
    Neg,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Pos => "pos",
            Role::Neg => "neg",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    LowerBetter,
    HigherBetter,
}

impl Orientation {
    /// Maps a raw score into lower-is-better units.
    pub fn normalize(self, score: f64) -> f64 {
        match self {
            Orientation::LowerBetter => score,
            Orientation::HigherBetter => -score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub triplet_id: String,
    pub role: Role,
    pub scorer: String,
    pub score: f64,
    pub orientation: Orientation,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn push(&mut self, triplet_id: &str, role: Role, scorer: &str, score: f64, o: Orientation) {
        self.rows.push(ScoreRow {
            triplet_id: triplet_id.to_string(),
            role,
            scorer: scorer.to_string(),
            score,
            orientation: o,
        });
    }

    fn index(&self) -> Result<HashMap<(&str, Role, &str), &ScoreRow>> {
        let mut idx = HashMap::with_capacity(self.rows.len());
        let mut orient: HashMap<&str, Orientation> = HashMap::new();
        for row in &self.rows {
            if let Some(prev) = orient.insert(&row.scorer, row.orientation) {
                if prev != row.orientation {
                    return Err(Error::InvalidArgument(format!(
                        "scorer {} declares two orientations",
                        row.scorer
                    )));
                }
            }
            if idx
                .insert((row.triplet_id.as_str(), row.role, row.scorer.as_str()), row)
                .is_some()
            {
                return Err(Error::InvalidArgument(format!(
                    "duplicate score row ({}, {}, {})",
                    row.triplet_id, row.role, row.scorer
                )));
            }
        }
        Ok(idx)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let rows = r
            .deserialize()
            .enumerate()
            .map(|(i, row)| {
                row.map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 2,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

pub const SSIM_SCORER: &str = "ssim";
pub const GMSD_SCORER: &str = "gmsd";

/// Scores both distorted images of every record against the aligned target
/// with the in-repo SSIM and GMSD scorers.
pub fn score_triplets(records: &[TripletRecord], resolver: &Resolver<'_>) -> Result<ScoreTable> {
    let per: Vec<[f64; 4]> = records
        .par_iter()
        .map(|rec| {
            let t = resolver.resolve(rec)?;
            Ok([
                ssim(&t.target, &t.pos)?,
                ssim(&t.target, &t.neg)?,
                gmsd(&t.target, &t.pos)?,
                gmsd(&t.target, &t.neg)?,
            ])
        })
        .collect::<Result<_>>()?;
    let mut table = ScoreTable::default();
    for (rec, s) in records.iter().zip(per) {
        let id = &rec.triplet_id;
        table.push(id, Role::Pos, SSIM_SCORER, s[0], Orientation::HigherBetter);
        table.push(id, Role::Neg, SSIM_SCORER, s[1], Orientation::HigherBetter);
        table.push(id, Role::Pos, GMSD_SCORER, s[2], Orientation::LowerBetter);
        table.push(id, Role::Neg, GMSD_SCORER, s[3], Orientation::LowerBetter);
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub kept: usize,
    pub dropped_ambiguous: usize,
    pub dropped_disagreement: usize,
}

/// Keeps triplets whose two scorers both separate pos from neg by at least
/// their `tau` and agree on the order; survivors are reordered so that pos
/// is the consensus better image.
pub fn supervision_filter(
    manifest: &Manifest,
    scores: &ScoreTable,
    scorers: (&str, &str),
    tau: (f64, f64),
) -> Result<(Manifest, FilterStats)> {
    let idx = scores.index()?;
    for s in [scorers.0, scorers.1] {
        if !scores.rows.iter().any(|r| r.scorer == s) {
            return Err(Error::UnknownScorer(s.to_string()));
        }
    }
    let gap = |rec: &TripletRecord, scorer: &str| -> Result<f64> {
        let get = |role: Role| {
            idx.get(&(rec.triplet_id.as_str(), role, scorer))
                .map(|r| r.orientation.normalize(r.score))
                .ok_or_else(|| Error::MissingScore {
                    triplet_id: rec.triplet_id.clone(),
                    role: role.to_string(),
                    scorer: scorer.to_string(),
                })
        };
        Ok(get(Role::Pos)? - get(Role::Neg)?)
    };
    let mut stats = FilterStats::default();
    let mut kept = Vec::new();
    for rec in &manifest.records {
        let ga = gap(rec, scorers.0)?;
        let gb = gap(rec, scorers.1)?;
        if ga.abs() < tau.0 || gb.abs() < tau.1 || ga == 0.0 || gb == 0.0 {
            stats.dropped_ambiguous += 1;
            continue;
        }
        if ga.signum() != gb.signum() {
            stats.dropped_disagreement += 1;
            continue;
        }
        let mut out = rec.clone();
        if ga > 0.0 {
            std::mem::swap(&mut out.distortion_pos, &mut out.distortion_neg);
        }
        out.order_source = OrderSource::Supervision;
        kept.push(out);
    }
    stats.kept = kept.len();
    Ok((manifest.with_records(kept), stats))
}

// ---------------------------------------------------------------------------
// Manifest I/O

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_manifest_to(manifest, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_manifest_to(manifest: &Manifest, w: &mut impl Write) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, &manifest.header)?;
    w.write_all(b"\n")?;
    for rec in &manifest.records {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest_from(BufReader::new(file), path)
}

pub fn read_manifest_from(r: impl BufRead, path: &Path) -> Result<Manifest> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = r.lines().enumerate();
    let header: ManifestHeader = match lines.next() {
        Some((_, l)) => {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| parse_err(1, e.to_string()))?
        }
        None => return Err(parse_err(1, "missing header".into())),
    };
    if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported manifest {} v{}", header.format, header.version),
        ));
    }
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, l) in lines {
        let l = l.map_err(|e| Error::io(path, e))?;
        if l.trim().is_empty() {
            continue;
        }
        let rec: TripletRecord =
            serde_json::from_str(&l).map_err(|e| parse_err(i + 1, e.to_string()))?;
        if !ids.insert(rec.triplet_id.clone()) {
            return Err(parse_err(i + 1, format!("duplicate triplet id {}", rec.triplet_id)));
        }
        records.push(rec);
    }
    Ok(Manifest { header, records })
}

/// Per-scene mixing key used by training for coin flips.
pub fn record_stream_key(rec: &TripletRecord) -> u64 {
    mix(&[rec.mask_seed, hash_str(&rec.triplet_id)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_scene, textured_image, SceneSpec};

    fn header() -> ManifestHeader {
        ManifestHeader::new(7, CorpusParams::default(), FlowParams::default(), TroiParams::default())
    }

    fn static_frames(n: usize) -> Vec<Image> {
        vec![textured_image(40, 40, 1); n]
    }

    #[test]
    fn guard_on_identical_frames() {
        let f = static_frames(5);
        assert!(!scene_change_guard(&f, 0, 4, 30.0 / 255.0).unwrap());
    }

    #[test]
    fn guard_detects_negative_frame() {
        let mut f = static_frames(5);
        let neg: Vec<f32> = f[2].float_data().iter().map(|v| 1.0 - v).collect();
        f[2] = Image::from_f32(40, 40, neg).unwrap().to_u8();
        // Direct oracle: mean |Δ| between frame 1 and its negative.
        let (a, b) = (f[1].luma(), f[2].luma());
        let d: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).sum::<f64>()
            / a.data.len() as f64;
        assert!(d > 30.0 / 255.0, "oracle {d}");
        assert!(scene_change_guard(&f, 0, 4, 30.0 / 255.0).unwrap());
        assert!(!scene_change_guard(&f, 3, 4, 30.0 / 255.0).unwrap());
        assert!(!scene_change_guard(&f, 0, 4, 1.0).unwrap());
        assert!(scene_change_guard(&f, 0, 5, 0.1).is_err());
    }

    #[test]
    fn build_is_deterministic_and_respects_laws() {
        let frames = static_frames(40);
        let p = CorpusParams::default();
        let (a, sa) = build_triplets("s", &frames, &p, 11).unwrap();
        let (b, _) = build_triplets("s", &frames, &p, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.emitted, 120);
        assert_eq!(sa.skipped, 0);
        for r in &a {
            let d = r.target_index.abs_diff(r.reference_index);
            assert_eq!(d, r.k);
            assert!((1..=15).contains(&r.k));
            assert!(r.distortion_pos.level < r.distortion_neg.level);
            assert_eq!(r.distortion_pos.type_id, r.distortion_neg.type_id);
            assert!((0.30..0.85).contains(&r.troi_coverage));
        }
        let (c, _) = build_triplets("s", &frames, &p, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn early_targets_look_forward() {
        let frames = static_frames(40);
        let (recs, _) = build_triplets("s", &frames, &CorpusParams::default(), 3).unwrap();
        for r in recs.iter().filter(|r| r.target_index == 3) {
            if r.k > 3 {
                assert_eq!(r.reference_index, 3 + r.k);
            }
        }
        for r in &recs {
            assert!(r.reference_index < 40);
        }
    }

    #[test]
    fn references_never_cross_a_cut() {
        let spec = SceneSpec {
            cut_at: Some(20),
            ..SceneSpec::toy(40, 40, 40)
        };
        let frames = render_scene(&spec, 5);
        let p = CorpusParams::default();
        let (recs, _) = build_triplets("cut", &frames, &p, 9).unwrap();
        // Guard oracle over all k for target 18.
        for k in 1..=15usize {
            if 18 + k < 40 {
                assert_eq!(
                    scene_change_guard(&frames, 18, 18 + k, p.scene_change_threshold).unwrap(),
                    18 + k >= 20
                );
            }
        }
        for r in recs.iter().filter(|r| r.target_index == 18) {
            assert!(r.reference_index < 20, "{r:?}");
        }
        for r in &recs {
            assert_eq!(r.target_index < 20, r.reference_index < 20);
        }
    }

    #[test]
    fn too_few_frames() {
        assert!(build_triplets("s", &static_frames(15), &CorpusParams::default(), 0).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = textured_image(32, 32, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = Image::filled(32, 32, [100, 100, 100]);
        let d = Image::filled(32, 32, [101, 101, 101]);
        let s = ssim(&c, &d).unwrap();
        // Zero variances: (2μ₁μ₂ + C1) / (μ₁² + μ₂² + C1).
        let (m1, m2) = (100.0 / 255.0, 101.0 / 255.0);
        let closed = (2.0 * m1 * m2 + 1e-4) / (m1 * m1 + m2 * m2 + 1e-4);
        assert!((s - closed).abs() < 1e-6);
        assert!((s - 1.0).abs() < 1e-3);
        assert!(ssim(&c, &Image::filled(10, 10, [0, 0, 0])).is_err());
        assert!(ssim(&Image::filled(10, 10, [0, 0, 0]), &Image::filled(10, 10, [0, 0, 0])).is_err());
    }

    #[test]
    fn ssim_of_negative_is_low() {
        let a = textured_image(48, 48, 4);
        let neg: Vec<f32> = a.float_data().iter().map(|v| 1.0 - v).collect();
        let n = Image::from_f32(48, 48, neg).unwrap();
        let s = ssim(&a, &n).unwrap();
        assert!(s < 0.5, "{s}");
        assert_eq!(s, ssim(&n, &a).unwrap());
    }

    #[test]
    fn gmsd_cases() {
        let a = textured_image(48, 48, 4);
        assert_eq!(gmsd(&a, &a).unwrap(), 0.0);
        let blur1 = crate::distort::apply_distortion(
            &a,
            &DistortionSpec::new("gaussian-blur", 1, 0).unwrap(),
        )
        .unwrap();
        let blur5 = crate::distort::apply_distortion(
            &a,
            &DistortionSpec::new("gaussian-blur", 5, 0).unwrap(),
        )
        .unwrap();
        let (g1, g5) = (gmsd(&a, &blur1).unwrap(), gmsd(&a, &blur5).unwrap());
        assert!(g1 > 0.0);
        assert!(g5 > g1, "{g1} {g5}");
    }

    fn record(id: &str) -> TripletRecord {
        TripletRecord {
            triplet_id: id.to_string(),
            scene_id: "s".into(),
            target_index: 5,
            reference_index: 7,
            k: 2,
            distortion_pos: DistortionSpec::new("impulse", 1, 1).unwrap(),
            distortion_neg: DistortionSpec::new("impulse", 4, 2).unwrap(),
            troi_coverage: 0.5,
            mask_seed: 3,
            order_source: OrderSource::Construction,
            label: None,
        }
    }

    fn table(entries: &[(&str, &str, f64, f64, Orientation)]) -> ScoreTable {
        let mut t = ScoreTable::default();
        for &(id, scorer, pos, neg, o) in entries {
            t.push(id, Role::Pos, scorer, pos, o);
            t.push(id, Role::Neg, scorer, neg, o);
        }
        t
    }

    #[test]
    fn filter_drops_ambiguous_and_disagreeing() {
        use Orientation::*;
        let m = Manifest {
            header: header(),
            records: vec![record("a"), record("b"), record("c"), record("d")],
        };
        let t = table(&[
            ("a", "x", 0.100, 0.101, LowerBetter),
            ("a", "y", 0.3, 0.1, HigherBetter),
            ("b", "x", 0.1, 0.2, LowerBetter),
            ("b", "y", 0.3, 0.1, HigherBetter),
            ("c", "x", 0.1, 0.2, LowerBetter),
            ("c", "y", 0.1, 0.3, HigherBetter),
            ("d", "x", 0.5, 0.2, LowerBetter),
            ("d", "y", 0.5, 0.9, HigherBetter),
        ]);
        let (out, stats) = supervision_filter(&m, &t, ("x", "y"), (0.005, 0.005)).unwrap();
        assert_eq!(stats.dropped_ambiguous, 1);
        assert_eq!(stats.dropped_disagreement, 1);
        assert_eq!(stats.kept, 2);
        assert_eq!(out.records[0].triplet_id, "b");
        assert_eq!(out.records[0].distortion_pos.level, 1);
        assert_eq!(out.records[0].order_source, OrderSource::Supervision);
        // "d": both scorers say neg is better, so the pair is swapped.
        assert_eq!(out.records[1].triplet_id, "d");
        assert_eq!(out.records[1].distortion_pos.level, 4);
    }

    #[test]
    fn filter_errors() {
        use Orientation::*;
        let m = Manifest {
            header: header(),
            records: vec![record("a")],
        };
        let t = table(&[("a", "x", 0.1, 0.2, LowerBetter)]);
        assert!(matches!(
            supervision_filter(&m, &t, ("x", "nope"), (0.0, 0.0)),
            Err(Error::UnknownScorer(_))
        ));
        let mut t2 = table(&[("a", "x", 0.1, 0.2, LowerBetter), ("b", "y", 0.1, 0.2, LowerBetter)]);
        assert!(matches!(
            supervision_filter(&m, &t2, ("x", "y"), (0.0, 0.0)),
            Err(Error::MissingScore { .. })
        ));
        t2.push("a", Role::Pos, "x", 0.3, LowerBetter);
        assert!(supervision_filter(&m, &t2, ("x", "y"), (0.0, 0.0)).is_err());
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let empty = Manifest::empty(header());
        write_manifest(&empty, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 1);
        assert_eq!(read_manifest(&p).unwrap(), empty);

        let mut m = Manifest {
            header: header(),
            records: vec![record("a"), record("b"), record("c")],
        };
        m.records[1].label = Some(1);
        m.records[2].troi_coverage = 0.1 + 0.2;
        write_manifest(&m, &p).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), m);

        let text = std::fs::read_to_string(&p).unwrap();
        let truncated = &text[..text.len() - 20];
        std::fs::write(&p, truncated).unwrap();
        match read_manifest(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn score_table_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let t = table(&[("a", "ssim", 0.93, 0.5 + 1e-13, Orientation::HigherBetter)]);
        t.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("triplet_id,role,scorer,score,orientation\n"));
        assert!(text.contains("a,pos,ssim,0.93,higher_better"));
        assert_eq!(ScoreTable::read_csv(&p).unwrap(), t);
    }
}
