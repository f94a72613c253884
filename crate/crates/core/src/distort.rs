//! Catalog of localized synthetic distortions.
//!
//! Every generator is a pure function of `(image, spec)`; stochastic ones
//! draw from a counter-based stream keyed by `(seed, type_id, level, pixel)`.
//! [`apply_masked`] blends the full-frame result through a feathered mask.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowtroi::TroiMask;
use crate::imagecore::{resize_bilinear, rgb_to_ycbcr, ycbcr_to_rgb, ColorSpace, Image, CHANNELS};
use crate::rng::{hash_str, mix, CounterRng};

pub const LEVELS: usize = 5;
pub const MIN_DISTORT_DIM: usize = 32;
const CATALOG_CSV: &str = include_str!("../data/distortion_catalog_v1.csv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub type_id: String,
    pub category: String,
    pub stochastic: bool,
    /// Parameter vector for levels 1..=5.
    pub levels: Vec<Vec<f64>>,
}

impl CatalogEntry {
    pub fn arity(&self) -> usize {
        self.levels[0].len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionCatalog {
    pub version: u32,
    pub entries: Vec<CatalogEntry>,
}

impl DistortionCatalog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, type_id: &str) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| e.type_id == type_id)
    }

    pub fn position(&self, type_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.type_id == type_id)
    }

    /// Parses the catalog CSV: a `# ... vN` version line, comment lines and
    /// rows `type_id,category,stochastic,level,p1[,p2,...]`.
    pub fn from_csv(text: &str) -> Result<Self> {
        let version = text
            .lines()
            .next()
            .and_then(|l| l.trim().rsplit_once(" v"))
            .and_then(|(_, v)| v.parse::<u32>().ok())
            .ok_or_else(|| Error::Catalog("missing version line".into()))?;
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut entries: Vec<CatalogEntry> = Vec::new();
        for (row_no, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Catalog(e.to_string()))?;
            let ctx = |m: &str| Error::Catalog(format!("row {}: {m}", row_no + 1));
            if rec.len() < 5 {
                return Err(ctx("expected at least one parameter"));
            }
            let type_id = rec[0].trim().to_string();
            let category = rec[1].trim().to_string();
            let stochastic = rec[2]
                .trim()
                .parse::<bool>()
                .map_err(|_| ctx("bad stochastic flag"))?;
            let level: usize = rec[3].trim().parse().map_err(|_| ctx("bad level"))?;
            let params = rec
                .iter()
                .skip(4)
                .filter(|f| !f.trim().is_empty())
                .map(|f| f.trim().parse::<f64>().map_err(|_| ctx("bad parameter")))
                .collect::<Result<Vec<_>>>()?;
            match entries.last_mut() {
                Some(e) if e.type_id == type_id => {
                    if level != e.levels.len() + 1 || e.category != category {
                        return Err(ctx("levels must be listed 1..5 in order"));
                    }
                    if params.len() != e.arity() {
                        return Err(ctx("parameter arity differs between levels"));
                    }
                    e.levels.push(params);
                }
                _ => {
                    if level != 1 {
                        return Err(ctx("first level of a type must be 1"));
                    }
                    if entries.iter().any(|e| e.type_id == type_id) {
                        return Err(ctx("duplicate type_id"));
                    }
                    entries.push(CatalogEntry {
                        type_id,
                        category,
                        stochastic,
                        levels: vec![params],
                    });
                }
            }
        }
        if let Some(e) = entries.iter().find(|e| e.levels.len() != LEVELS) {
            return Err(Error::Catalog(format!(
                "{} has {} levels, expected {LEVELS}",
                e.type_id,
                e.levels.len()
            )));
        }
        if let Some(e) = entries.iter().find(|e| Kind::from_id(&e.type_id).is_none()) {
            return Err(Error::UnknownDistortion(e.type_id.clone()));
        }
        Ok(Self { version, entries })
    }
}

/// The compiled-in catalog.
pub fn catalog_list() -> &'static DistortionCatalog {
    static CATALOG: OnceLock<DistortionCatalog> = OnceLock::new();
    CATALOG.get_or_init(|| DistortionCatalog::from_csv(CATALOG_CSV).expect("built-in catalog parses"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub type_id: String,
    pub level: u8,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl DistortionSpec {
    /// Resolves the catalog parameters for `(type_id, level)`.
    pub fn new(type_id: &str, level: u8, seed: u64) -> Result<Self> {
        let entry = catalog_list()
            .get(type_id)
            .ok_or_else(|| Error::UnknownDistortion(type_id.to_string()))?;
        if !(1..=LEVELS as u8).contains(&level) {
            return Err(Error::InvalidLevel(level));
        }
        Ok(Self {
            type_id: type_id.to_string(),
            level,
            seed,
            params: entry.levels[level as usize - 1].clone(),
        })
    }

    pub fn with_params(mut self, params: Vec<f64>) -> Self {
        self.params = params;
        self
    }

    fn validate(&self) -> Result<Kind> {
        let entry = catalog_list()
            .get(&self.type_id)
            .ok_or_else(|| Error::UnknownDistortion(self.type_id.clone()))?;
        if !(1..=LEVELS as u8).contains(&self.level) {
            return Err(Error::InvalidLevel(self.level));
        }
        if self.params.len() != entry.arity() {
            return Err(Error::InvalidArgument(format!(
                "{} takes {} parameters, got {}",
                self.type_id,
                entry.arity(),
                self.params.len()
            )));
        }
        if let Some(p) = self.params.iter().find(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite parameter {p}")));
        }
        Ok(Kind::from_id(&self.type_id).expect("catalog ids are known kinds"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    GaussianBlur,
    LensBlur,
    MotionBlur,
    HueRotate,
    SaturateUp,
    SaturateDown,
    ColorQuantize,
    ChromaticAberration,
    BlockDctQuantize,
    BlockAverage,
    BitDepthBanding,
    GaussianLuma,
    GaussianColor,
    Impulse,
    Speckle,
    PoissonLike,
    OverBoxSmooth,
    OverMedianSmooth,
    Brighten,
    Darken,
    Vignette,
    IlluminationGradient,
    NearestDownUp,
    BilinearDownUp,
    UnsharpOvershoot,
    HighpassBoost,
    ContrastUp,
    ContrastDown,
    GammaUp,
    GammaDown,
    MicroTranslation,
    SinusoidalWarp,
    PatchJitter,
    GhostingOverlay,
}

impl Kind {
    fn from_id(id: &str) -> Option<Self> {
        use Kind::*;
        Some(match id {
            "gaussian-blur" => GaussianBlur,
            "lens-blur" => LensBlur,
            "motion-blur" => MotionBlur,
            "hue-rotate" => HueRotate,
            "saturate-up" => SaturateUp,
            "saturate-down" => SaturateDown,
            "color-quantize" => ColorQuantize,
            "chromatic-aberration" => ChromaticAberration,
            "block-dct-quantize" => BlockDctQuantize,
            "block-average" => BlockAverage,
            "bit-depth-banding" => BitDepthBanding,
            "gaussian-luma" => GaussianLuma,
            "gaussian-color" => GaussianColor,
            "impulse" => Impulse,
            "speckle" => Speckle,
            "poisson-like" => PoissonLike,
            "over-box-smooth" => OverBoxSmooth,
            "over-median-smooth" => OverMedianSmooth,
            "brighten" => Brighten,
            "darken" => Darken,
            "vignette" => Vignette,
            "illumination-gradient" => IlluminationGradient,
            "nearest-down-up" => NearestDownUp,
            "bilinear-down-up" => BilinearDownUp,
            "unsharp-overshoot" => UnsharpOvershoot,
            "highpass-boost" => HighpassBoost,
            "contrast-up" => ContrastUp,
            "contrast-down" => ContrastDown,
            "gamma-up" => GammaUp,
            "gamma-down" => GammaDown,
            "micro-translation" => MicroTranslation,
            "sinusoidal-warp" => SinusoidalWarp,
            "patch-jitter" => PatchJitter,
            "ghosting-overlay" => GhostingOverlay,
            _ => return None,
        })
    }
}

/// Float RGB working buffer.
#[derive(Clone)]
struct Rgb {
    w: usize,
    h: usize,
    d: Vec<f32>,
}

impl Rgb {
    #[inline]
    fn at(&self, x: isize, y: isize, c: usize) -> f32 {
        let xc = x.clamp(0, self.w as isize - 1) as usize;
        let yc = y.clamp(0, self.h as isize - 1) as usize;
        self.d[(yc * self.w + xc) * CHANNELS + c]
    }

    fn map_pixels(&self, f: impl Fn(usize, usize, [f64; 3]) -> [f64; 3]) -> Rgb {
        let mut d = self.d.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                let i = (y * self.w + x) * CHANNELS;
                let p = [d[i] as f64, d[i + 1] as f64, d[i + 2] as f64];
                let q = f(x, y, p);
                for c in 0..3 {
                    d[i + c] = q[c] as f32;
                }
            }
        }
        Rgb { d, ..*self }
    }

    /// Resamples with integer offsets (edge replicated): out(x, y) = in(src(x, y)).
    fn remap(&self, src: impl Fn(usize, usize, usize) -> (isize, isize)) -> Rgb {
        let mut d = vec![0f32; self.d.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    let (sx, sy) = src(x, y, c);
                    d[(y * self.w + x) * CHANNELS + c] = self.at(sx, sy, c);
                }
            }
        }
        Rgb { d, ..*self }
    }

    fn bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (tx, ty) = (x - x0, y - y0);
        let (ix, iy) = (x0 as isize, y0 as isize);
        let a = self.at(ix, iy, c) as f64;
        let b = self.at(ix + 1, iy, c) as f64;
        let cc = self.at(ix, iy + 1, c) as f64;
        let d = self.at(ix + 1, iy + 1, c) as f64;
        let top = a + (b - a) * tx;
        let bot = cc + (d - cc) * tx;
        top + (bot - top) * ty
    }

    /// Separable convolution with a symmetric kernel (edge replicated).
    fn separable(&self, kernel: &[f64]) -> Rgb {
        let r = (kernel.len() / 2) as isize;
        let mut tmp = vec![0f32; self.d.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    let mut acc = 0f64;
                    for (k, &wt) in kernel.iter().enumerate() {
                        acc += wt * self.at(x as isize + k as isize - r, y as isize, c) as f64;
                    }
                    tmp[(y * self.w + x) * CHANNELS + c] = acc as f32;
                }
            }
        }
        let horiz = Rgb { d: tmp, ..*self };
        let mut out = vec![0f32; self.d.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    let mut acc = 0f64;
                    for (k, &wt) in kernel.iter().enumerate() {
                        acc += wt * horiz.at(x as isize, y as isize + k as isize - r, c) as f64;
                    }
                    out[(y * self.w + x) * CHANNELS + c] = acc as f32;
                }
            }
        }
        Rgb { d: out, ..*self }
    }

    /// General 2-D convolution with explicit taps.
    fn convolve(&self, taps: &[(isize, isize, f64)]) -> Rgb {
        let mut d = vec![0f32; self.d.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    let acc: f64 = taps
                        .iter()
                        .map(|&(dx, dy, wt)| wt * self.at(x as isize + dx, y as isize + dy, c) as f64)
                        .sum();
                    d[(y * self.w + x) * CHANNELS + c] = acc as f32;
                }
            }
        }
        Rgb { d, ..*self }
    }

    fn gaussian(&self, sigma: f64) -> Rgb {
        if sigma <= 0.0 {
            return self.clone();
        }
        let r = (3.0 * sigma).ceil() as isize;
        let mut k: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        self.separable(&k)
    }

    fn box_blur(&self, radius: usize) -> Rgb {
        let n = 2 * radius + 1;
        self.separable(&vec![1.0 / n as f64; n])
    }

    fn median(&self, radius: usize) -> Rgb {
        let r = radius as isize;
        let mut win = Vec::with_capacity((2 * radius + 1).pow(2));
        let mut d = vec![0f32; self.d.len()];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                for c in 0..3 {
                    win.clear();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            win.push(self.at(x + dx, y + dy, c));
                        }
                    }
                    let mid = win.len() / 2;
                    let (_, m, _) = win.select_nth_unstable_by(mid, f32::total_cmp);
                    d[(y as usize * self.w + x as usize) * CHANNELS + c] = *m;
                }
            }
        }
        Rgb { d, ..*self }
    }

    fn ycc_map(&self, f: impl Fn(usize, usize, [f64; 3]) -> [f64; 3]) -> Rgb {
        self.map_pixels(|x, y, p| {
            let ycc = rgb_to_ycbcr(p[0], p[1], p[2]);
            let q = f(x, y, ycc);
            ycbcr_to_rgb(q[0], q[1], q[2])
        })
    }
}

const JPEG_LUMA: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16.,
    24., 40., 57., 69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109.,
    103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120.,
    101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

const JPEG_CHROMA: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., 18., 21., 26., 66., 99., 99., 99., 99., 24., 26., 56.,
    99., 99., 99., 99., 99., 47., 66., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99.,
];

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0f64; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    b
}

/// 8×8 block DCT quantization in YCbCr, without entropy coding.
fn block_dct_quantize(img: &Rgb, scale: f64) -> Rgb {
    let basis = dct_basis();
    let (w, h) = (img.w, img.h);
    let mut ycc: Vec<[f64; 3]> = img
        .d
        .chunks_exact(3)
        .map(|p| rgb_to_ycbcr(p[0] as f64, p[1] as f64, p[2] as f64))
        .collect();
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for c in 0..3 {
                let table = if c == 0 { &JPEG_LUMA } else { &JPEG_CHROMA };
                let mut block = [[0f64; 8]; 8];
                for (j, row) in block.iter_mut().enumerate() {
                    for (i, v) in row.iter_mut().enumerate() {
                        let (x, y) = ((bx + i).min(w - 1), (by + j).min(h - 1));
                        *v = ycc[y * w + x][c] * 255.0 - 128.0;
                    }
                }
                let mut coef = [[0f64; 8]; 8];
                for (v, crow) in coef.iter_mut().enumerate() {
                    for (u, cv) in crow.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (j, brow) in block.iter().enumerate() {
                            for (i, bv) in brow.iter().enumerate() {
                                acc += basis[v][j] * basis[u][i] * bv;
                            }
                        }
                        let q = (table[v * 8 + u] * scale).round().max(1.0);
                        *cv = (acc / q).round() * q;
                    }
                }
                for j in 0..8 {
                    for i in 0..8 {
                        let (x, y) = (bx + i, by + j);
                        if x >= w || y >= h {
                            continue;
                        }
                        let mut acc = 0.0;
                        for (v, crow) in coef.iter().enumerate() {
                            for (u, cv) in crow.iter().enumerate() {
                                acc += basis[v][j] * basis[u][i] * cv;
                            }
                        }
                        ycc[y * w + x][c] = (acc + 128.0) / 255.0;
                    }
                }
            }
        }
    }
    let d = ycc
        .iter()
        .flat_map(|p| ycbcr_to_rgb(p[0], p[1], p[2]).map(|v| v as f32))
        .collect();
    Rgb { d, w, h }
}

fn noise_stream(spec: &DistortionSpec) -> CounterRng {
    CounterRng::new(mix(&[spec.seed, hash_str(&spec.type_id), u64::from(spec.level)]))
}

fn render(kind: Kind, img: &Rgb, spec: &DistortionSpec) -> Result<Rgb> {
    use Kind::*;
    let p = &spec.params;
    let (w, h) = (img.w, img.h);
    let px = |i: usize| p[i].round() as isize;
    let rng = noise_stream(spec);
    Ok(match kind {
        GaussianBlur => img.gaussian(p[0]),
        LensBlur => {
            let r = p[0];
            let ri = r.ceil() as isize;
            let mut taps = Vec::new();
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if ((dx * dx + dy * dy) as f64) <= r * r + 1e-9 {
                        taps.push((dx, dy, 1.0));
                    }
                }
            }
            let n = taps.len() as f64;
            taps.iter_mut().for_each(|t| t.2 /= n);
            img.convolve(&taps)
        }
        MotionBlur => {
            let len = p[0].round().max(1.0) as isize;
            let theta = p[1].to_radians();
            let half = (len - 1) as f64 / 2.0;
            let mut taps: Vec<(isize, isize, f64)> = (0..len)
                .map(|t| {
                    let s = t as f64 - half;
                    ((s * theta.cos()).round() as isize, (s * theta.sin()).round() as isize, 1.0)
                })
                .collect();
            let n = taps.len() as f64;
            taps.iter_mut().for_each(|t| t.2 /= n);
            img.convolve(&taps)
        }
        HueRotate => {
            let (s, c) = p[0].to_radians().sin_cos();
            img.ycc_map(|_, _, [y, cb, cr]| {
                let (a, b) = (cb - 0.5, cr - 0.5);
                [y, 0.5 + a * c - b * s, 0.5 + a * s + b * c]
            })
        }
        SaturateUp | SaturateDown => {
            let g = p[0];
            img.ycc_map(|_, _, [y, cb, cr]| [y, 0.5 + (cb - 0.5) * g, 0.5 + (cr - 0.5) * g])
        }
        ColorQuantize => {
            let l = p[0].max(2.0) - 1.0;
            img.map_pixels(|_, _, q| q.map(|v| (v * l).round() / l))
        }
        ChromaticAberration => {
            let s = px(0);
            img.remap(|x, y, c| match c {
                0 => (x as isize - s, y as isize),
                2 => (x as isize + s, y as isize),
                _ => (x as isize, y as isize),
            })
        }
        BlockDctQuantize => block_dct_quantize(img, p[0]),
        BlockAverage => {
            let b = p[0].round().max(1.0) as usize;
            let mut out = img.clone();
            for by in (0..h).step_by(b) {
                for bx in (0..w).step_by(b) {
                    let (x1, y1) = ((bx + b).min(w), (by + b).min(h));
                    let n = ((x1 - bx) * (y1 - by)) as f64;
                    for c in 0..3 {
                        let mut s = 0f64;
                        for y in by..y1 {
                            for x in bx..x1 {
                                s += img.d[(y * w + x) * CHANNELS + c] as f64;
                            }
                        }
                        let m = (s / n) as f32;
                        for y in by..y1 {
                            for x in bx..x1 {
                                out.d[(y * w + x) * CHANNELS + c] = m;
                            }
                        }
                    }
                }
            }
            out
        }
        BitDepthBanding => {
            let l = (2f64.powf(p[0].round()) - 1.0).max(1.0);
            img.ycc_map(|_, _, [y, cb, cr]| [(y * l).round() / l, cb, cr])
        }
        GaussianLuma => {
            let s = p[0];
            img.map_pixels(|x, y, q| {
                let n = s * rng.normal((y * w + x) as u64, 0);
                q.map(|v| v + n)
            })
        }
        GaussianColor => {
            let s = p[0];
            img.map_pixels(|x, y, q| {
                let i = (y * w + x) as u64;
                [
                    q[0] + s * rng.normal(i, 0),
                    q[1] + s * rng.normal(i, 1),
                    q[2] + s * rng.normal(i, 2),
                ]
            })
        }
        Impulse => {
            let prob = p[0];
            img.map_pixels(|x, y, q| {
                let i = (y * w + x) as u64;
                if rng.uniform(i, 0) < prob {
                    let v = if rng.uniform(i, 1) < 0.5 { 0.0 } else { 1.0 };
                    [v; 3]
                } else {
                    q
                }
            })
        }
        Speckle => {
            let s = p[0];
            img.map_pixels(|x, y, q| {
                let i = (y * w + x) as u64;
                [
                    q[0] * (1.0 + s * rng.normal(i, 0)),
                    q[1] * (1.0 + s * rng.normal(i, 1)),
                    q[2] * (1.0 + s * rng.normal(i, 2)),
                ]
            })
        }
        PoissonLike => {
            let photons = p[0].max(1e-6);
            img.map_pixels(|x, y, q| {
                let i = (y * w + x) as u64;
                let mut o = q;
                for (c, v) in o.iter_mut().enumerate() {
                    *v += (v.max(0.0) / photons).sqrt() * rng.normal(i, c as u64);
                }
                o
            })
        }
        OverBoxSmooth => img.box_blur(px(0).max(0) as usize),
        OverMedianSmooth => img.median(px(0).max(0) as usize),
        Brighten => img.map_pixels(|_, _, q| q.map(|v| v + p[0])),
        Darken => img.map_pixels(|_, _, q| q.map(|v| v - p[0])),
        Vignette => {
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            let norm = cx * cx + cy * cy;
            img.map_pixels(|x, y, q| {
                let r2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / norm;
                q.map(|v| v * (1.0 - p[0] * r2))
            })
        }
        IlluminationGradient => img.map_pixels(|x, _, q| {
            let t = 2.0 * x as f64 / (w as f64 - 1.0) - 1.0;
            q.map(|v| v * (1.0 + p[0] * t))
        }),
        NearestDownUp => {
            let f = px(0).max(1) as usize;
            img.remap(|x, y, _| {
                let sx = ((x / f) * f + f / 2).min(w - 1);
                let sy = ((y / f) * f + f / 2).min(h - 1);
                (sx as isize, sy as isize)
            })
        }
        BilinearDownUp => {
            let f = p[0].max(1.0);
            let small_w = ((w as f64 / f).round() as usize).max(1);
            let small_h = ((h as f64 / f).round() as usize).max(1);
            let as_image = Image::from_f32_clamped(w, h, img.d.clone())?;
            let down = resize_bilinear(&as_image, small_w, small_h)?;
            let up = resize_bilinear(&down, w, h)?;
            Rgb { d: up.float_data(), w, h }
        }
        UnsharpOvershoot => {
            let blurred = img.gaussian(p[1]);
            let a = p[0] as f32;
            let d = img.d.iter().zip(&blurred.d).map(|(&v, &b)| v + a * (v - b)).collect();
            Rgb { d, w, h }
        }
        HighpassBoost => {
            let local = img.box_blur(1);
            let a = p[0] as f32;
            let d = img.d.iter().zip(&local.d).map(|(&v, &b)| v + a * (v - b)).collect();
            Rgb { d, w, h }
        }
        ContrastUp | ContrastDown => img.map_pixels(|_, _, q| q.map(|v| 0.5 + p[0] * (v - 0.5))),
        GammaUp | GammaDown => img.map_pixels(|_, _, q| q.map(|v| v.max(0.0).powf(p[0]))),
        MicroTranslation => {
            let (dx, dy) = (px(0), px(1));
            img.remap(|x, y, _| (x as isize - dx, y as isize - dy))
        }
        SinusoidalWarp => {
            let (a, period) = (p[0], p[1].max(1.0));
            let k = std::f64::consts::TAU / period;
            let mut d = vec![0f32; img.d.len()];
            for y in 0..h {
                for x in 0..w {
                    let sx = x as f64 + a * (k * y as f64).sin();
                    let sy = y as f64 + a * (k * x as f64).sin();
                    for c in 0..3 {
                        d[(y * w + x) * CHANNELS + c] = img.bilinear(sx, sy, c) as f32;
                    }
                }
            }
            Rgb { d, w, h }
        }
        PatchJitter => {
            let m = p[0].round().max(0.0) as i64;
            let b = p[1].round().max(1.0) as usize;
            let bw = w.div_ceil(b);
            let span = (2 * m + 1) as f64;
            let offset = |blk: u64, lane: u64| -> isize {
                ((rng.uniform(blk, lane) * span).floor() as i64 - m) as isize
            };
            img.remap(|x, y, _| {
                let blk = ((y / b) * bw + x / b) as u64;
                (x as isize + offset(blk, 0), y as isize + offset(blk, 1))
            })
        }
        GhostingOverlay => {
            let alpha = p[0] as f32;
            let (dx, dy) = (px(1), px(2));
            let shifted = img.remap(|x, y, _| (x as isize - dx, y as isize - dy));
            let d = img
                .d
                .iter()
                .zip(&shifted.d)
                .map(|(&v, &s)| (1.0 - alpha) * v + alpha * s)
                .collect();
            Rgb { d, w, h }
        }
    })
}

fn check_input(img: &Image) -> Result<()> {
    if img.color_space() != ColorSpace::Srgb {
        return Err(Error::InvalidArgument("distortions expect sRGB input".into()));
    }
    if img.width().min(img.height()) < MIN_DISTORT_DIM {
        return Err(Error::TooSmall(format!(
            "distortions need at least {MIN_DISTORT_DIM}x{MIN_DISTORT_DIM} pixels"
        )));
    }
    Ok(())
}

fn distorted_floats(img: &Image, spec: &DistortionSpec) -> Result<Vec<f32>> {
    let kind = spec.validate()?;
    check_input(img)?;
    let src = Rgb {
        w: img.width(),
        h: img.height(),
        d: img.float_data(),
    };
    let mut out = render(kind, &src, spec)?.d;
    for v in &mut out {
        *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    }
    Ok(out)
}

/// Full-frame distortion; the output has the sample kind of the input.
pub fn apply_distortion(img: &Image, spec: &DistortionSpec) -> Result<Image> {
    let out = distorted_floats(img, spec)?;
    Ok(img.like(img.width(), img.height(), out))
}

/// Blends the full-frame distortion through the mask's soft weights (hard
/// bits when the mask is not feathered). Pixels with zero weight are copied
/// from the input unchanged.
pub fn apply_masked(img: &Image, spec: &DistortionSpec, mask: &TroiMask) -> Result<Image> {
    if mask.width != img.width() || mask.height != img.height() {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs image {}x{}",
            mask.width,
            mask.height,
            img.width(),
            img.height()
        )));
    }
    let weights = mask.weights();
    if weights.iter().all(|&s| s == 0.0) {
        spec.validate()?;
        check_input(img)?;
        return Ok(img.clone());
    }
    let distorted = distorted_floats(img, spec)?;
    let orig = img.float_data();
    let mut blended = orig.clone();
    for (px, &s) in weights.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        for c in 0..CHANNELS {
            let i = px * CHANNELS + c;
            blended[i] = s * distorted[i] + (1.0 - s) * orig[i];
        }
    }
    // Zero-weight samples carry the original values; the 8-bit round trip
    // v / 255 * 255 rounds back to v exactly, so they stay bit-exact.
    Ok(img.like(img.width(), img.height(), blended))
}
