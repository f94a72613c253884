//! Procedural textured frames and short camera-pan scenes for tests, the
//! self-test and the toy training pipeline.

use serde::{Deserialize, Serialize};

use crate::imagecore::Image;
use crate::rng::{mix, CounterRng};

/// A colorful, band-limited texture defined on the whole integer plane.
#[derive(Debug, Clone)]
pub struct Texture {
    waves: Vec<[f64; 5]>, // fx, fy, phase, amplitude, channel weight spread
    lattice: CounterRng,
    cell: f64,
    tint: [f64; 3],
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        let r = CounterRng::new(mix(&[seed, 0x7e47]));
        let waves = (0..6)
            .map(|i| {
                let i = i as u64;
                let angle = r.uniform(i, 0) * std::f64::consts::TAU;
                let freq = 0.03 + 0.12 * r.uniform(i, 1);
                [
                    freq * angle.cos(),
                    freq * angle.sin(),
                    r.uniform(i, 2) * std::f64::consts::TAU,
                    0.05 + 0.07 * r.uniform(i, 3),
                    r.uniform(i, 4),
                ]
            })
            .collect();
        let tint = [
            0.35 + 0.3 * r.uniform(100, 0),
            0.35 + 0.3 * r.uniform(100, 1),
            0.35 + 0.3 * r.uniform(100, 2),
        ];
        Self {
            waves,
            lattice: CounterRng::new(mix(&[seed, 0x1a77])),
            cell: 4.0 + 4.0 * r.uniform(101, 0),
            tint,
        }
    }

    fn lattice_value(&self, ix: i64, iy: i64, c: usize) -> f64 {
        let key = mix(&[ix as u64, iy as u64]);
        self.lattice.uniform(key, c as u64) - 0.5
    }

    fn value_noise(&self, x: f64, y: f64, c: usize) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (x0, y0) = (gx.floor(), gy.floor());
        let (tx, ty) = (gx - x0, gy - y0);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (sx, sy) = (s(tx), s(ty));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let a = self.lattice_value(ix, iy, c);
        let b = self.lattice_value(ix + 1, iy, c);
        let cc = self.lattice_value(ix, iy + 1, c);
        let d = self.lattice_value(ix + 1, iy + 1, c);
        let top = a + (b - a) * sx;
        let bot = cc + (d - cc) * sx;
        top + (bot - top) * sy
    }

    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut out = self.tint;
        for (k, w) in self.waves.iter().enumerate() {
            let s = (w[0] * x + w[1] * y + w[2]).sin() * w[3];
            for (c, o) in out.iter_mut().enumerate() {
                let weight = 1.0 - 0.6 * ((w[4] + c as f64 / 3.0 + k as f64 * 0.17).fract());
                *o += s * weight;
            }
        }
        for (c, o) in out.iter_mut().enumerate() {
            *o += 0.35 * self.value_noise(x, y, c);
        }
        out.map(|v| v.clamp(0.02, 0.98))
    }

    /// An 8-bit render of the window with top-left corner at `(ox, oy)`.
    pub fn render(&self, width: usize, height: usize, ox: i64, oy: i64) -> Image {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let p = self.sample((x as i64 + ox) as f64, (y as i64 + oy) as f64);
                data.extend(p.map(|v| (v * 255.0).round() as u8));
            }
        }
        Image::from_u8(width, height, data).expect("consistent dimensions")
    }
}

/// A textured test image.
pub fn textured_image(width: usize, height: usize, seed: u64) -> Image {
    Texture::new(seed).render(width, height, 0, 0)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Background pan per frame in pixels.
    pub pan: (i64, i64),
    /// Foreground square side; 0 disables it.
    pub object_size: usize,
    /// Foreground motion per frame in pixels.
    pub object_velocity: (i64, i64),
    /// Frame index at which the content switches to a different texture.
    pub cut_at: Option<usize>,
}

impl SceneSpec {
    pub fn toy(width: usize, height: usize, frames: usize) -> Self {
        Self {
            width,
            height,
            frames,
            pan: (1, 0),
            object_size: width / 3,
            object_velocity: (2, 1),
            cut_at: None,
        }
    }
}

/// Renders a panning scene with a moving foreground square.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Vec<Image> {
    let bg = Texture::new(mix(&[seed, 1]));
    let fg = Texture::new(mix(&[seed, 2]));
    let alt = Texture::new(mix(&[seed, 3]));
    (0..spec.frames)
        .map(|t| {
            let after_cut = spec.cut_at.is_some_and(|c| t >= c);
            let tex = if after_cut { &alt } else { &bg };
            let (ox, oy) = (spec.pan.0 * t as i64, spec.pan.1 * t as i64);
            let mut img = tex.render(spec.width, spec.height, ox, oy).float_data();
            if spec.object_size > 0 && !after_cut {
                let s = spec.object_size as i64;
                let span_x = (spec.width as i64 - s).max(1);
                let span_y = (spec.height as i64 - s).max(1);
                let px = bounce(spec.width as i64 / 4 + spec.object_velocity.0 * t as i64, span_x);
                let py = bounce(spec.height as i64 / 4 + spec.object_velocity.1 * t as i64, span_y);
                for y in 0..s {
                    for x in 0..s {
                        let (ix, iy) = ((px + x) as usize, (py + y) as usize);
                        if ix >= spec.width || iy >= spec.height {
                            continue;
                        }
                        let p = fg.sample(x as f64, y as f64);
                        let i = (iy * spec.width + ix) * 3;
                        for c in 0..3 {
                            img[i + c] = p[c] as f32;
                        }
                    }
                }
            }
            Image::from_f32_clamped(spec.width, spec.height, img)
                .expect("consistent dimensions")
                .to_u8()
        })
        .collect()
}

fn bounce(pos: i64, span: i64) -> i64 {
    let period = 2 * span;
    let p = pos.rem_euclid(period);
    if p <= span {
        p
    } else {
        period - p
    }
}
