//! Built-in oracle suites run by `nariqa selftest`.
//!
//! Every check compares the library against a small, separately written
//! reference computation or a closed-form value.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::corpus::{
    supervision_filter, CorpusParams, Manifest, ManifestHeader, OrderSource, Orientation, Role, ScoreTable,
    TripletRecord,
};
use crate::distort::{apply_masked, catalog_list, DistortionSpec};
use crate::embed::{Embedding, PatchEmbeddings};
use crate::error::Result;
use crate::evalkit::{plcc, srcc};
use crate::flowtroi::{estimate_flow, feather_mask, flow_magnitude, troi_from_flow, FlowParams, TroiMask, TroiParams};
use crate::imagecore::{mse, Plane};
use crate::rng::stream;
use crate::score::patch_mismatch_heatmap;
use crate::synth::{textured_image, Texture};
use crate::train::{check_gradients, kl_regularizer, total_loss, triplet_margin_loss, RecordEmbeddings, TrainerConfig};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 8] = [
    ("loss-analytics", loss_analytics),
    ("gradient-fidelity", gradient_fidelity),
    ("flow-troi", flow_troi),
    ("distortion-locality", distortion_locality),
    ("filter-oracle", filter_oracle),
    ("correlation-oracle", correlation_oracle),
    ("heatmap-oracle", heatmap_oracle),
    ("determinism", determinism),
];

/// Runs every suite; errors are reported as failed checks.
pub fn run_all() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let start = Instant::now();
            let (passed, detail) = match check() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn loss_analytics() -> Result<(bool, String)> {
    let a = Embedding::unit(&[1.0, 0.0]);
    let b = Embedding::unit(&[0.0, 1.0]);
    let same = triplet_margin_loss(&a, &a, &a, 0.3)?;
    let sep = triplet_margin_loss(&a, &a, &b, 0.1)?;
    let kl_shift = kl_regularizer(&Embedding::raw(vec![0.2, -0.4]), &Embedding::raw(vec![1.2, 0.6]), 1.0)?;
    let kl = kl_regularizer(&Embedding::raw(vec![1.0, 0.0]), &Embedding::raw(vec![0.0, 1.0]), 1.0)?;
    let v = vec![0.6, 0.8];
    let w = vec![0.8, -0.6];
    let rec = RecordEmbeddings {
        id: "r".into(),
        key: 3,
        target: v.clone(),
        reference: w.clone(),
        pos: v.clone(),
        neg: w,
        frozen_target: vec![0.0, 1.0],
    };
    let cfg = TrainerConfig::default();
    let l = total_loss(&[rec], &cfg, 0)?;
    let recomposed = cfg.lambda1 * l.triplet1 + cfg.lambda2 * l.triplet2 + cfg.lambda_kl * l.kl;
    let ok = (same - 0.3).abs() < 1e-15
        && sep == 0.0
        && kl_shift.abs() < 1e-12
        && (kl - 0.46212).abs() < 1e-4
        && (l.total - recomposed).abs() <= 1e-12;
    Ok((ok, format!("m={same:.3} sep={sep} kl={kl:.5}")))
}

fn gradient_fidelity() -> Result<(bool, String)> {
    let cfg = TrainerConfig::default();
    let good = check_gradients(&cfg, 7, false)?;
    let bad = check_gradients(&cfg, 7, true)?;
    let ok = good.compared >= 200 && good.batches >= 10 && good.max_rel_error <= 1e-4 && bad.max_rel_error > 1e-3;
    Ok((
        ok,
        format!(
            "max_rel={:.2e} over {} params, mutated={:.2e}",
            good.max_rel_error, good.compared, bad.max_rel_error
        ),
    ))
}

fn flow_troi() -> Result<(bool, String)> {
    let tex = Texture::new(21);
    let prev = tex.render(96, 96, 0, 0);
    let zero = estimate_flow(&prev, &prev)?;
    let zero_ok = zero.u.iter().chain(&zero.v).all(|&x| x == 0);
    let (dx, dy) = (3, -2);
    let curr = tex.render(96, 96, -dx, -dy);
    let f = estimate_flow(&prev, &curr)?;
    let r = FlowParams::default().max_radius().max(8) as usize;
    let (mut hit, mut total) = (0usize, 0usize);
    for y in r..96 - r {
        for x in r..96 - r {
            total += 1;
            hit += usize::from(f.u[y * 96 + x] == dx as i32 && f.v[y * 96 + x] == dy as i32);
        }
    }
    let recovered = hit as f64 / total as f64;

    // Radial magnitude map on a 128×128 frame.
    let (w, h) = (128usize, 128usize);
    let mag = Plane::new(
        w,
        h,
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f32 - 50.0, (i / w) as f32 - 70.0);
                (x * x + y * y).sqrt()
            })
            .collect(),
    );
    let mut worst: f64 = 0.0;
    let mut counts_ok = true;
    for c in [0.30, 0.50, 0.85] {
        let m = troi_from_flow(&mag, c, &TroiParams::default())?;
        counts_ok &= m.selected == (c * (w * h) as f64 - 1e-9).ceil() as usize;
        worst = worst.max((m.coverage - c).abs());
    }
    let mag_ok = flow_magnitude(&zero).data.iter().all(|&v| v == 0.0);
    let ok = zero_ok && mag_ok && recovered >= 0.95 && counts_ok && worst <= 0.02;
    Ok((ok, format!("recovered={recovered:.3} coverage_err={worst:.4}")))
}

fn distortion_locality() -> Result<(bool, String)> {
    let (w, h) = (64usize, 64usize);
    let img = textured_image(w, h, 12);
    let sigma = TroiParams::default().feather_sigma;
    let bits: Vec<bool> = (0..w * h).map(|i| (i % w) < w / 2).collect();
    let mask = feather_mask(&TroiMask::from_bits(w, h, bits), sigma);
    let reach = (3.0 * sigma).floor() as usize;
    let (mut leaks, mut nonmono, mut strict) = (0usize, 0usize, 0usize);
    for e in &catalog_list().entries {
        let mut errs = Vec::new();
        for level in 1..=5u8 {
            let out = apply_masked(&img, &DistortionSpec::new(&e.type_id, level, 77)?, &mask)?;
            for y in 0..h {
                for x in w / 2 + reach + 1..w {
                    for c in 0..3 {
                        leaks += usize::from(out.sample(x, y, c).to_bits() != img.sample(x, y, c).to_bits());
                    }
                }
            }
            errs.push(mse(&img, &out)?);
        }
        nonmono += usize::from(errs.windows(2).any(|p| p[1] < p[0]));
        strict += usize::from(errs.windows(2).all(|p| p[1] > p[0]));
    }
    let n = catalog_list().len();
    Ok((
        leaks == 0 && nonmono == 0 && strict >= 30,
        format!("{n} types: leaks={leaks} nonmonotone={nonmono} strict={strict}"),
    ))
}

fn filter_oracle() -> Result<(bool, String)> {
    let mut rng = stream(&[0x66_696c]);
    let header = ManifestHeader::new(1, CorpusParams::default(), FlowParams::default(), TroiParams::default());
    let mut records = Vec::new();
    let mut table = ScoreTable::default();
    let mut expected = Vec::new();
    for i in 0..100 {
        let id = format!("s-t{i:05}-0");
        records.push(TripletRecord {
            triplet_id: id.clone(),
            scene_id: "s".into(),
            target_index: i,
            reference_index: i + 1,
            k: 1,
            distortion_pos: DistortionSpec::new("brighten", 1, 1)?,
            distortion_neg: DistortionSpec::new("brighten", 3, 2)?,
            troi_coverage: 0.5,
            mask_seed: i as u64,
            order_source: OrderSource::Construction,
            label: None,
        });
        // Lower-is-better a, higher-is-better b.
        let (a_pos, a_neg): (f64, f64) = (rng.random_range(0.0..0.05), rng.random_range(0.0..0.05));
        let (b_pos, b_neg): (f64, f64) = (rng.random_range(0.9..1.0), rng.random_range(0.9..1.0));
        table.push(&id, Role::Pos, "a", a_pos, Orientation::LowerBetter);
        table.push(&id, Role::Neg, "a", a_neg, Orientation::LowerBetter);
        table.push(&id, Role::Pos, "b", b_pos, Orientation::HigherBetter);
        table.push(&id, Role::Neg, "b", b_neg, Orientation::HigherBetter);
        let ga = a_pos - a_neg;
        let gb = b_neg - b_pos;
        let clear = ga.abs() >= 0.01 && gb.abs() >= 0.01 && ga != 0.0 && gb != 0.0;
        let agree = (ga < 0.0) == (gb < 0.0);
        if clear && agree {
            expected.push((id, ga > 0.0));
        }
    }
    let manifest = Manifest { header, records };
    let (out, _) = supervision_filter(&manifest, &table, ("a", "b"), (0.01, 0.01))?;
    let got: Vec<(String, bool)> = out
        .records
        .iter()
        .map(|r| (r.triplet_id.clone(), r.distortion_pos.level == 3))
        .collect();
    Ok((got == expected, format!("kept {} of 100", got.len())))
}

fn textbook_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn quadratic_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let below = v.iter().filter(|&&b| b < a).count() as f64;
            let equal = v.iter().filter(|&&b| b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn correlation_oracle() -> Result<(bool, String)> {
    let mut rng = stream(&[0x636f_7272]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(3..40);
        // Coarse values so that ties occur.
        let x: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..12u8))).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        if x.iter().all(|&v| v == x[0]) {
            continue;
        }
        worst = worst.max((plcc(&x, &y)? - textbook_pearson(&x, &y)).abs());
        let rs = textbook_pearson(&quadratic_ranks(&x), &quadratic_ranks(&y));
        worst = worst.max((srcc(&x, &y)? - rs).abs());
    }
    let x = [1.0, 2.0, 3.0, 4.0];
    let y = [1.0, 3.0, 2.0, 4.0];
    let case = (plcc(&x, &y)? - 0.8).abs() < 1e-12 && (srcc(&x, &y)? - 0.8).abs() < 1e-12;
    Ok((case && worst <= 1e-12, format!("max_err={worst:.2e}")))
}

fn random_grid(rng: &mut impl Rng, gh: usize, gw: usize, dim: usize) -> PatchEmbeddings {
    let mut data = Vec::with_capacity(gh * gw * dim);
    for _ in 0..gh * gw {
        // Few distinct directions so ties and non-reciprocal matches occur.
        let v: Vec<f64> = (0..dim).map(|_| f64::from(rng.random_range(-2..=2i8))).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        data.extend(v.iter().map(|a| if n == 0.0 { 0.0 } else { (a / n) as f32 }));
        if n == 0.0 {
            let len = data.len();
            data[len - dim] = 1.0;
        }
    }
    PatchEmbeddings {
        grid_h: gh,
        grid_w: gw,
        dim,
        data,
    }
}

/// Reference heatmap: (reference side, processed side).
fn enumerate_heatmap(a: &PatchEmbeddings, b: &PatchEmbeddings, beta: f64, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let unit = |r: &[f32]| -> Vec<f64> {
        let n = r.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        r.iter().map(|&x| f64::from(x) / n).collect()
    };
    let sim = |i: usize, j: usize| -> f64 {
        unit(a.row(i)).iter().zip(unit(b.row(j))).map(|(x, y)| x * y).sum()
    };
    let first_argmax = |vals: Vec<f64>| -> (f64, usize) {
        let best = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (best, vals.iter().position(|&v| v == best).unwrap_or(0))
    };
    let ab: Vec<(f64, usize)> = (0..a.len()).map(|i| first_argmax((0..b.len()).map(|j| sim(i, j)).collect())).collect();
    let ba: Vec<(f64, usize)> = (0..b.len()).map(|j| first_argmax((0..a.len()).map(|i| sim(i, j)).collect())).collect();
    let side = |best: &[(f64, usize)], back: &[(f64, usize)]| -> Vec<f64> {
        let vals: Vec<f64> = best.iter().map(|p| p.0).collect();
        let (lo, hi) = (
            vals.iter().copied().fold(f64::INFINITY, f64::min),
            vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        );
        best.iter()
            .enumerate()
            .map(|(i, &(s, j))| {
                let m = if hi - lo <= eps { 0.0 } else { 1.0 - (s - lo) / (hi - lo) };
                if back[j].1 == i {
                    m
                } else {
                    beta * m
                }
            })
            .collect()
    };
    let ra = side(&ab, &ba);
    let rb = side(&ba, &ab);
    let all: Vec<f64> = ra.iter().chain(&rb).copied().collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = |v: Vec<f64>| -> Vec<f64> {
        v.into_iter()
            .map(|x| if hi - lo <= eps { 0.0 } else { (x - lo) / (hi - lo).max(eps) })
            .collect()
    };
    (scale(ra), scale(rb))
}

fn heatmap_oracle() -> Result<(bool, String)> {
    let mut rng = stream(&[0x6865_6174]);
    let mut cases = 0usize;
    let mut mismatches = 0usize;
    for gh in 1..=4 {
        for gw in 1..=4 {
            for _ in 0..8 {
                let a = random_grid(&mut rng, gh, gw, 3);
                let (bh, bw) = (rng.random_range(1..=4), rng.random_range(1..=4));
                let b = random_grid(&mut rng, bh, bw, 3);
                let hm = patch_mismatch_heatmap(&a, &b, 1.5, 1e-8)?;
                let (ra, rb) = enumerate_heatmap(&a, &b, 1.5, 1e-8);
                cases += 1;
                mismatches += usize::from(hm.reference != ra || hm.processed != rb);
            }
        }
    }
    let same = random_grid(&mut rng, 3, 3, 4);
    let zero = patch_mismatch_heatmap(&same, &same, 1.5, 1e-8)?;
    let zero_ok = zero.reference.iter().chain(&zero.processed).all(|&v| v == 0.0);
    // Four identical patches except one orthogonal one.
    let base = PatchEmbeddings {
        grid_h: 2,
        grid_w: 2,
        dim: 2,
        data: vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
    };
    let mut odd = base.clone();
    odd.data[6..8].copy_from_slice(&[0.0, 1.0]);
    let one = patch_mismatch_heatmap(&base, &odd, 1.5, 1e-8)?;
    let peak = one.processed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ok = mismatches == 0 && zero_ok && peak == 1.0 && one.processed[3] == 1.0;
    Ok((ok, format!("{cases} grids, {mismatches} mismatches, peak={peak}")))
}

fn determinism() -> Result<(bool, String)> {
    use crate::config::RunConfig;
    use crate::pipeline::{build_corpus, synth_scenes, with_jobs};
    let mut cfg = RunConfig::toy();
    cfg.synth.frames = 20;
    cfg.synth.width = 64;
    cfg.synth.height = 64;
    let run = |jobs: usize| -> Result<Manifest> {
        with_jobs(jobs, || build_corpus(&cfg, &synth_scenes(&cfg)).map(|m| m.0))?
    };
    let one = run(1)?;
    let many = run(4)?;
    Ok((one == many, format!("{} records", one.records.len())))
}
