mod common;

use common::{lattice_grid, oracle_heatmap};
use nariqa_core::embed::{Embedding, PatchEmbeddings};
use nariqa_core::score::{patch_mismatch_heatmap, quality_score, ReferenceKind};
use nariqa_core::train::cosine_distance;
use proptest::prelude::*;

fn generic_grid(vals: &[f32], gh: usize, gw: usize, dim: usize) -> PatchEmbeddings {
    let mut data = Vec::with_capacity(gh * gw * dim);
    for p in 0..gh * gw {
        let v: Vec<f64> = (0..dim).map(|c| f64::from(vals[(p * dim + c) % vals.len()]) + 0.01 * (p + c) as f64).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| (x / n) as f32));
    }
    PatchEmbeddings {
        grid_h: gh,
        grid_w: gw,
        dim,
        data,
    }
}

fn unit(v: &[f64]) -> Option<Embedding> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-3).then(|| Embedding::unit(v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn heatmap_equals_exhaustive_oracle(
        ah in 1usize..=4, aw in 1usize..=4, bh in 1usize..=4, bw in 1usize..=4,
        ca in proptest::collection::vec(-1i8..=1, 48),
        cb in proptest::collection::vec(-1i8..=1, 48),
        beta in 1.0f64..3.0,
    ) {
        let a = lattice_grid(&ca, ah, aw, 3);
        let b = lattice_grid(&cb, bh, bw, 3);
        let hm = patch_mismatch_heatmap(&a, &b, beta, 1e-8).unwrap();
        let o = oracle_heatmap(&a, &b, beta, 1e-8);
        prop_assert_eq!(&hm.reference_match, &o.reference_match);
        prop_assert_eq!(&hm.processed_match, &o.processed_match);
        prop_assert_eq!(&hm.reference_raw, &o.reference_raw);
        prop_assert_eq!(&hm.processed_raw, &o.processed_raw);
        prop_assert_eq!(&hm.reference, &o.reference);
        prop_assert_eq!(&hm.processed, &o.processed);
        for &v in hm.reference.iter().chain(&hm.processed) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn permuting_processed_patches_permutes_its_map(
        vals in proptest::collection::vec(-1.0f32..1.0, 64),
        vb in proptest::collection::vec(-1.0f32..1.0, 64),
        perm_seed in any::<u64>(),
    ) {
        let a = generic_grid(&vals, 3, 3, 4);
        let b = generic_grid(&vb, 2, 4, 4);
        let n = b.len();
        // Fisher-Yates driven by the seed.
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let mut pb = b.clone();
        for (new, &old) in perm.iter().enumerate() {
            pb.data[new * 4..new * 4 + 4].copy_from_slice(b.row(old));
        }
        let h1 = patch_mismatch_heatmap(&a, &b, 1.5, 1e-8).unwrap();
        let h2 = patch_mismatch_heatmap(&a, &pb, 1.5, 1e-8).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            prop_assert_eq!(h2.processed[new], h1.processed[old]);
        }
        let mut r1 = h1.reference.clone();
        let mut r2 = h2.reference.clone();
        r1.sort_by(f64::total_cmp);
        r2.sort_by(f64::total_cmp);
        prop_assert_eq!(r1, r2);
    }

    #[test]
    fn raising_beta_never_lowers_penalized_entries(
        ca in proptest::collection::vec(-1i8..=1, 48),
        cb in proptest::collection::vec(-1i8..=1, 48),
        b1 in 1.0f64..2.0,
        extra in 0.0f64..2.0,
    ) {
        let a = lattice_grid(&ca, 3, 3, 3);
        let b = lattice_grid(&cb, 3, 2, 3);
        let lo = patch_mismatch_heatmap(&a, &b, b1, 1e-8).unwrap();
        let hi = patch_mismatch_heatmap(&a, &b, b1 + extra, 1e-8).unwrap();
        for i in 0..a.len() {
            if !lo.reference_reciprocal[i] {
                prop_assert!(hi.reference_raw[i] >= lo.reference_raw[i]);
            }
        }
        for j in 0..b.len() {
            if !lo.processed_reciprocal[j] {
                prop_assert!(hi.processed_raw[j] >= lo.processed_raw[j]);
            }
        }
    }

    #[test]
    fn quality_score_is_one_minus_cosine_distance(
        a in proptest::collection::vec(-1.0f64..1.0, 8),
        b in proptest::collection::vec(-1.0f64..1.0, 8),
    ) {
        if let (Some(ea), Some(eb)) = (unit(&a), unit(&b)) {
            let q = quality_score(&ea, &eb, ReferenceKind::NonAligned).unwrap().value;
            let d = cosine_distance(&ea, &eb).unwrap();
            prop_assert!((q - (1.0 - d)).abs() <= 1e-12);
            prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&q));
        }
    }
}
