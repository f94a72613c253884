use nariqa_core::distort::{apply_distortion, apply_masked, catalog_list, DistortionSpec};
use nariqa_core::flowtroi::{
    estimate_flow, feather_mask, flow_magnitude, troi_from_flow, FlowParams, TroiMask, TroiParams,
};
use nariqa_core::synth::{render_scene, textured_image, SceneSpec, Texture};
use proptest::prelude::*;

fn blob_mask(w: usize, h: usize, cx: usize, cy: usize, r: usize) -> TroiMask {
    let bits = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as i64 - cx as i64, (i / w) as i64 - cy as i64);
            x * x + y * y <= (r * r) as i64
        })
        .collect();
    TroiMask::from_bits(w, h, bits)
}

fn near_mask(m: &TroiMask, x: usize, y: usize, reach: f64) -> bool {
    let r = reach.floor() as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx * dx + dy * dy) as f64 > reach * reach {
                continue;
            }
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < m.width && (ny as usize) < m.height && m.bits[ny as usize * m.width + nx as usize] {
                return true;
            }
        }
    }
    false
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn identical_frames_have_zero_flow(seed in any::<u64>()) {
        let img = textured_image(64, 48, seed);
        let f = estimate_flow(&img, &img).unwrap();
        prop_assert!(f.u.iter().chain(&f.v).all(|&x| x == 0));
    }

    #[test]
    fn integer_translations_are_recovered(seed in 0u64..1000, dx in -12i64..=12, dy in -12i64..=12) {
        let r = FlowParams::default().max_radius() as i64;
        prop_assume!(dx.abs() <= r && dy.abs() <= r);
        let tex = Texture::new(seed);
        let (w, h) = (112usize, 112usize);
        let a = tex.render(w, h, 0, 0);
        let b = tex.render(w, h, -dx, -dy);
        let f = estimate_flow(&a, &b).unwrap();
        let m = 16usize;
        let (mut hit, mut n) = (0usize, 0usize);
        for y in m..h - m {
            for x in m..w - m {
                n += 1;
                hit += usize::from(i64::from(f.u[y * w + x]) == dx && i64::from(f.v[y * w + x]) == dy);
            }
        }
        prop_assert!(hit as f64 / n as f64 >= 0.95, "{}/{}", hit, n);
    }

    #[test]
    fn troi_counts_and_coverage(seed in 0u64..1000, permille in 300usize..=850) {
        let frames = render_scene(&SceneSpec::toy(112, 112, 2), seed);
        let mag = flow_magnitude(&estimate_flow(&frames[0], &frames[1]).unwrap());
        let n = 112 * 112;
        let c = permille as f64 / 1000.0;
        let m = troi_from_flow(&mag, c, &TroiParams::default()).unwrap();
        prop_assert_eq!(m.selected, (permille * n).div_ceil(1000));
        prop_assert!((m.coverage - c).abs() <= 0.02, "coverage {} for {}", m.coverage, c);
    }

    #[test]
    fn soft_mask_vanishes_beyond_three_sigma(
        cx in 0usize..60, cy in 0usize..50, r in 0usize..12, sigma in 0.5f64..4.0,
    ) {
        let m = blob_mask(60, 50, cx, cy, r);
        let soft = feather_mask(&m, sigma).soft.unwrap();
        for y in 0..50 {
            for x in 0..60 {
                let w = soft[y * 60 + x];
                prop_assert!((0.0..=1.0).contains(&w));
                if !near_mask(&m, x, y, 3.0 * sigma) {
                    prop_assert_eq!(w, 0.0);
                }
            }
        }
    }

    #[test]
    fn distortions_stay_local_and_in_range(
        type_idx in 0usize..34, level in 1u8..=5, seed in any::<u64>(),
        cx in 0usize..64, cy in 0usize..64, r in 4usize..20,
    ) {
        let img = textured_image(64, 64, seed % 97);
        let spec = DistortionSpec::new(&catalog_list().entries[type_idx].type_id, level, seed).unwrap();
        let hard = blob_mask(64, 64, cx, cy, r);
        let sigma = TroiParams::default().feather_sigma;
        let out = apply_masked(&img, &spec, &feather_mask(&hard, sigma)).unwrap();
        prop_assert_eq!(out.clone(), apply_masked(&img, &spec, &feather_mask(&hard, sigma)).unwrap());
        for y in 0..64 {
            for x in 0..64 {
                let far = !near_mask(&hard, x, y, 3.0 * sigma);
                for c in 0..3 {
                    let v = out.sample(x, y, c);
                    prop_assert!((0.0..=1.0).contains(&v));
                    if far {
                        prop_assert_eq!(v.to_bits(), img.sample(x, y, c).to_bits());
                    }
                }
            }
        }
        let full = apply_distortion(&img.to_f32(), &spec).unwrap();
        prop_assert!(full.float_data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn severity_is_monotone_on_a_256_frame() {
    let img = textured_image(256, 256, 1);
    let mut strict = 0;
    for e in &catalog_list().entries {
        let errs: Vec<f64> = (1..=5u8)
            .map(|l| {
                let spec = DistortionSpec::new(&e.type_id, l, 42).unwrap();
                nariqa_core::imagecore::mse(&img, &apply_distortion(&img, &spec).unwrap()).unwrap()
            })
            .collect();
        assert!(errs.windows(2).all(|p| p[1] >= p[0]), "{}: {errs:?}", e.type_id);
        strict += usize::from(errs.windows(2).all(|p| p[1] > p[0]));
    }
    assert!(strict >= 30, "{strict}");
}
