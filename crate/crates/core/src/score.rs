//! Embedding-similarity scoring, 2AFC decisions and patch mismatch heatmaps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::embed::{normalize_or_e1, Embedding, PatchEmbeddings};
use crate::error::{Error, Result};
use crate::imagecore::encode_gray_png;

pub const UNIT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_BETA: f64 = 1.5;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Aligned,
    NonAligned,
}

impl std::fmt::Display for ReferenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReferenceKind::Aligned => "aligned",
            ReferenceKind::NonAligned => "non_aligned",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub value: f64,
    pub reference_kind: ReferenceKind,
}

fn unit_f64(e: &Embedding) -> Result<Vec<f64>> {
    let n = e.norm();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "embedding is not unit-normalized (norm {n})"
        )));
    }
    Ok(e.to_f64())
}

/// Cosine similarity of two unit embeddings; higher is better.
pub fn quality_score(reference: &Embedding, test: &Embedding, kind: ReferenceKind) -> Result<QualityScore> {
    if reference.dim() != test.dim() {
        return Err(Error::DimensionMismatch("embedding dimensions differ".into()));
    }
    let (a, b) = (unit_f64(reference)?, unit_f64(test)?);
    let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(p, q)| p * q).sum() };
    // Stored values are f32, so the norms are divided out again in f64.
    Ok(QualityScore {
        value: dot(&a, &b) / (dot(&a, &a).sqrt() * dot(&b, &b).sqrt()),
        reference_kind: kind,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub choice: u8,
    pub tie: bool,
    pub scores: [f64; 2],
}

/// Picks the candidate more similar to the reference; exact ties pick 0.
pub fn two_afc_decide(reference: &Embedding, d0: &Embedding, d1: &Embedding) -> Result<Decision> {
    let kind = ReferenceKind::Aligned;
    let s0 = quality_score(reference, d0, kind)?.value;
    let s1 = quality_score(reference, d1, kind)?.value;
    Ok(decide(s0, s1))
}

pub fn decide(s0: f64, s1: f64) -> Decision {
    Decision {
        choice: u8::from(s1 > s0),
        tie: s0 == s1,
        scores: [s0, s1],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchHeatmap {
    pub reference_grid: (usize, usize),
    pub processed_grid: (usize, usize),
    /// Final values for reference patches (reference → processed).
    pub reference: Vec<f64>,
    /// Final values for processed patches (processed → reference).
    pub processed: Vec<f64>,
    pub reference_match: Vec<usize>,
    pub processed_match: Vec<usize>,
    pub reference_reciprocal: Vec<bool>,
    pub processed_reciprocal: Vec<bool>,
    /// Per-direction mismatch after the penalty, before global normalization.
    pub reference_raw: Vec<f64>,
    pub processed_raw: Vec<f64>,
    pub beta: f64,
}

/// Row-wise best match: max value and lowest index attaining it.
fn best_matches(n_from: usize, n_to: usize, sim: impl Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<usize>) {
    (0..n_from)
        .map(|i| {
            let mut best = (f64::NEG_INFINITY, 0);
            for j in 0..n_to {
                let s = sim(i, j);
                if s > best.0 {
                    best = (s, j);
                }
            }
            best
        })
        .unzip()
}

/// 1 − min-max-normalized similarity; a degenerate range normalizes to 1.
fn direction_mismatch(best: &[f64], eps: f64) -> Vec<f64> {
    let lo = best.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = best.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    best.iter()
        .map(|&s| if range <= eps { 0.0 } else { 1.0 - (s - lo) / range })
        .collect()
}

pub fn patch_mismatch_heatmap(
    reference: &PatchEmbeddings,
    processed: &PatchEmbeddings,
    beta: f64,
    eps: f64,
) -> Result<MismatchHeatmap> {
    if reference.dim != processed.dim {
        return Err(Error::DimensionMismatch(format!(
            "patch dims {} vs {}",
            reference.dim, processed.dim
        )));
    }
    if reference.is_empty() || processed.is_empty() {
        return Err(Error::InvalidArgument("empty patch grid".into()));
    }
    if !(beta.is_finite() && beta >= 1.0) || !(eps >= 0.0) {
        return Err(Error::InvalidArgument("beta must be ≥ 1 and eps ≥ 0".into()));
    }
    let (na, nb) = (reference.len(), processed.len());
    // Rows are re-normalized in f64 so a patch matched with itself scores 1
    // up to f64 rounding rather than f32 rounding.
    let unit_rows = |pe: &PatchEmbeddings| -> Vec<Vec<f64>> {
        (0..pe.len())
            .map(|i| {
                let mut v: Vec<f64> = pe.row(i).iter().map(|&x| f64::from(x)).collect();
                normalize_or_e1(&mut v);
                v
            })
            .collect()
    };
    let (ua, ub) = (unit_rows(reference), unit_rows(processed));
    let mut s = vec![0f64; na * nb];
    for (i, a) in ua.iter().enumerate() {
        for (j, b) in ub.iter().enumerate() {
            s[i * nb + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
        }
    }
    let (best_a, match_a) = best_matches(na, nb, |i, j| s[i * nb + j]);
    let (best_b, match_b) = best_matches(nb, na, |j, i| s[i * nb + j]);
    let recip_a: Vec<bool> = (0..na).map(|i| match_b[match_a[i]] == i).collect();
    let recip_b: Vec<bool> = (0..nb).map(|j| match_a[match_b[j]] == j).collect();
    let penalize = |m: Vec<f64>, recip: &[bool]| -> Vec<f64> {
        m.into_iter()
            .zip(recip)
            .map(|(v, &r)| if r { v } else { v * beta })
            .collect()
    };
    let raw_a = penalize(direction_mismatch(&best_a, eps), &recip_a);
    let raw_b = penalize(direction_mismatch(&best_b, eps), &recip_b);
    let all = raw_a.iter().chain(&raw_b);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let norm = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&x| if range <= eps { 0.0 } else { (x - lo) / range.max(eps) })
            .collect()
    };
    Ok(MismatchHeatmap {
        reference_grid: (reference.grid_h, reference.grid_w),
        processed_grid: (processed.grid_h, processed.grid_w),
        reference: norm(&raw_a),
        processed: norm(&raw_b),
        reference_match: match_a,
        processed_match: match_b,
        reference_reciprocal: recip_a,
        processed_reciprocal: recip_b,
        reference_raw: raw_a,
        processed_raw: raw_b,
        beta,
    })
}

impl MismatchHeatmap {
    /// Grayscale PNG of the processed-side map, one pixel per patch scaled
    /// up by `scale` with nearest-neighbor replication.
    pub fn processed_png(&self, scale: usize) -> Result<Vec<u8>> {
        let (gh, gw) = self.processed_grid;
        let scale = scale.max(1);
        let (w, h) = (gw * scale, gh * scale);
        let data: Vec<u8> = (0..w * h)
            .map(|i| {
                let (x, y) = (i % w / scale, i / w / scale);
                (self.processed[y * gw + x] * 255.0).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        encode_gray_png(&data, w, h)
    }

    /// CSV with one row per patch and direction.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("direction,row,col,value,reciprocal,match\n");
        let sides = [
            ("reference", self.reference_grid, &self.reference, &self.reference_reciprocal, &self.reference_match),
            ("processed", self.processed_grid, &self.processed, &self.processed_reciprocal, &self.processed_match),
        ];
        for (name, (_, gw), vals, recip, matches) in sides {
            for (i, v) in vals.iter().enumerate() {
                let _ = writeln!(out, "{name},{},{},{v},{},{}", i / gw, i % gw, recip[i], matches[i]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, rows: &[Vec<f64>]) -> PatchEmbeddings {
        let dim = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| Embedding::unit(r).values)
            .collect();
        PatchEmbeddings { grid_h: h, grid_w: w, dim, data }
    }

    #[test]
    fn score_cases() {
        let a = Embedding::unit(&[1.0, 0.0]);
        let b = Embedding::unit(&[0.0, 1.0]);
        let k = ReferenceKind::NonAligned;
        assert_eq!(quality_score(&a, &a, k).unwrap().value, 1.0);
        assert_eq!(quality_score(&a, &b, k).unwrap().value, 0.0);
        assert!(quality_score(&a, &Embedding::raw(vec![2.0, 0.0]), k).is_err());
    }

    #[test]
    fn decision_rules() {
        let r = Embedding::unit(&[1.0, 0.0]);
        let o = Embedding::unit(&[0.0, 1.0]);
        assert_eq!(two_afc_decide(&r, &r, &o).unwrap().choice, 0);
        let d = decide(0.30, 0.31);
        assert_eq!((d.choice, d.tie), (1, false));
        let t = two_afc_decide(&r, &o, &o).unwrap();
        assert_eq!((t.choice, t.tie), (0, true));
    }

    #[test]
    fn identical_grids_give_zero_map() {
        let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|k| if k == i { 1.0 } else { 0.1 }).collect()).collect();
        let a = grid(2, 2, &rows);
        let h = patch_mismatch_heatmap(&a, &a, 1.5, 1e-8).unwrap();
        assert!(h.reference.iter().chain(&h.processed).all(|&v| v == 0.0));
        assert!(h.reference_reciprocal.iter().all(|&r| r));
        assert_eq!(h.processed_match, vec![0, 1, 2, 3]);
    }

    #[test]
    fn two_patch_penalty() {
        // a0 matches b0 best and b1 too; b1's best is a0, a1's best is b1.
        let a = grid(1, 2, &[vec![1.0, 0.0], vec![0.6, 0.8]]);
        let b = grid(1, 2, &[vec![1.0, 0.0], vec![0.8, 0.6]]);
        let h = patch_mismatch_heatmap(&a, &b, 1.5, 1e-8).unwrap();
        // S = [[1, .8], [.6, .96]]: a→b matches (0, 1); b→a matches (0, 1).
        assert_eq!(h.reference_match, vec![0, 1]);
        assert_eq!(h.processed_match, vec![0, 1]);
        let b2 = grid(1, 2, &[vec![1.0, 0.0], vec![0.96, 0.28]]);
        let h = patch_mismatch_heatmap(&a, &b2, 1.5, 1e-8).unwrap();
        // S = [[1, .96], [.6, .8]]: b1 → a0 (0.96 > 0.8), a0 → b0, so b1 is non-reciprocal.
        assert_eq!(h.processed_match, vec![0, 0]);
        assert!(!h.processed_reciprocal[1]);
        let plain = patch_mismatch_heatmap(&a, &b2, 1.0, 1e-8).unwrap();
        assert!((h.processed_raw[1] - 1.5 * plain.processed_raw[1]).abs() < 1e-15);
    }

    #[test]
    fn csv_and_png_export() {
        let a = grid(1, 2, &[vec![1.0, 0.0], vec![0.6, 0.8]]);
        let b = grid(1, 2, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let h = patch_mismatch_heatmap(&a, &b, 1.5, 1e-8).unwrap();
        let csv = h.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("direction,row,col,value,reciprocal,match\n"));
        assert!(!h.processed_png(4).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = grid(1, 1, &[vec![1.0, 0.0]]);
        let b = grid(1, 1, &[vec![1.0, 0.0, 0.0]]);
        assert!(patch_mismatch_heatmap(&a, &b, 1.5, 1e-8).is_err());
        let e = PatchEmbeddings { grid_h: 0, grid_w: 0, dim: 2, data: vec![] };
        assert!(patch_mismatch_heatmap(&a, &e, 1.5, 1e-8).is_err());
    }
}
