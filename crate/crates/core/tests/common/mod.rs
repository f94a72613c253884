//! Reference implementations used as test oracles. They are written for
//! clarity over speed and share no code with the library.

#![allow(dead_code)]

use std::collections::BTreeMap;

use nariqa_core::embed::PatchEmbeddings;

/// Pearson correlation from raw sums.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Ranks by counting: values below plus the midpoint of the tied block.
pub fn count_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let below = v.iter().filter(|&&b| b < a).count() as f64;
            let tied = v.iter().filter(|&&b| b == a).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&count_ranks(x), &count_ranks(y))
}

/// Per-triplet lower-is-better scores for two scorers.
#[derive(Debug, Clone, Copy)]
pub struct OracleScores {
    pub a_pos: f64,
    pub a_neg: f64,
    pub b_pos: f64,
    pub b_neg: f64,
}

/// Outcome of the two filter rules for one triplet: `None` when dropped,
/// `Some(swapped)` when kept.
pub fn oracle_filter(s: &OracleScores, tau_a: f64, tau_b: f64) -> Option<bool> {
    let da = s.a_neg - s.a_pos;
    let db = s.b_neg - s.b_pos;
    // Rule 1: both scorers must separate the pair clearly.
    if da.abs() < tau_a || db.abs() < tau_b || da == 0.0 || db == 0.0 {
        return None;
    }
    // Rule 2: they must agree on which image is better.
    let a_prefers_pos = da > 0.0;
    let b_prefers_pos = db > 0.0;
    if a_prefers_pos != b_prefers_pos {
        return None;
    }
    Some(!a_prefers_pos)
}

/// Exhaustive heatmap reference. Returns (reference side, processed side,
/// reference matches, processed matches).
pub struct OracleHeatmap {
    pub reference: Vec<f64>,
    pub processed: Vec<f64>,
    pub reference_match: Vec<usize>,
    pub processed_match: Vec<usize>,
    pub reference_raw: Vec<f64>,
    pub processed_raw: Vec<f64>,
}

fn unit_f64(r: &[f32]) -> Vec<f64> {
    let n = r.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    r.iter().map(|&x| f64::from(x) / n).collect()
}

pub fn oracle_heatmap(a: &PatchEmbeddings, b: &PatchEmbeddings, beta: f64, eps: f64) -> OracleHeatmap {
    let ua: Vec<Vec<f64>> = (0..a.len()).map(|i| unit_f64(a.row(i))).collect();
    let ub: Vec<Vec<f64>> = (0..b.len()).map(|j| unit_f64(b.row(j))).collect();
    // Every pair, keyed by (i, j).
    let mut sims = BTreeMap::new();
    for (i, x) in ua.iter().enumerate() {
        for (j, y) in ub.iter().enumerate() {
            sims.insert((i, j), x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>());
        }
    }
    let argmax = |cands: Vec<(usize, f64)>| -> (usize, f64) {
        let mut best = cands[0];
        for c in cands {
            if c.1 > best.1 {
                best = c;
            }
        }
        best
    };
    let a_best: Vec<(usize, f64)> = (0..ua.len())
        .map(|i| argmax((0..ub.len()).map(|j| (j, sims[&(i, j)])).collect()))
        .collect();
    let b_best: Vec<(usize, f64)> = (0..ub.len())
        .map(|j| argmax((0..ua.len()).map(|i| (i, sims[&(i, j)])).collect()))
        .collect();
    let side = |best: &[(usize, f64)], other: &[(usize, f64)]| -> Vec<f64> {
        let lo = best.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = best.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        best.iter()
            .enumerate()
            .map(|(k, &(m, s))| {
                let mis = if hi - lo <= eps { 0.0 } else { 1.0 - (s - lo) / (hi - lo) };
                if other[m].0 == k {
                    mis
                } else {
                    mis * beta
                }
            })
            .collect()
    };
    let ra = side(&a_best, &b_best);
    let rb = side(&b_best, &a_best);
    let lo = ra.iter().chain(&rb).copied().fold(f64::INFINITY, f64::min);
    let hi = ra.iter().chain(&rb).copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&x| if hi - lo <= eps { 0.0 } else { (x - lo) / (hi - lo).max(eps) })
            .collect()
    };
    OracleHeatmap {
        reference: norm(&ra),
        processed: norm(&rb),
        reference_match: a_best.iter().map(|p| p.0).collect(),
        processed_match: b_best.iter().map(|p| p.0).collect(),
        reference_raw: ra,
        processed_raw: rb,
    }
}

/// A grid of unit vectors drawn from a small lattice so that ties and
/// non-reciprocal matches are common.
pub fn lattice_grid(codes: &[i8], gh: usize, gw: usize, dim: usize) -> PatchEmbeddings {
    let mut data = Vec::with_capacity(gh * gw * dim);
    for p in 0..gh * gw {
        let mut v: Vec<f64> = (0..dim).map(|c| f64::from(codes[(p * dim + c) % codes.len()])).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= n);
        }
        data.extend(v.iter().map(|&x| x as f32));
    }
    PatchEmbeddings {
        grid_h: gh,
        grid_w: gw,
        dim,
        data,
    }
}
