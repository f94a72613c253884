//! Handcrafted patch features, a linear projection head and the NVEB
//! embedding interchange format.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imagecore::{extract_patches, rgb_to_ycbcr, ColorSpace, Image, PatchGrid};
use crate::rng::stream;

pub const FEATURE_DIM: usize = 26;
pub const DEFAULT_EMBED_DIM: usize = 64;
pub const DCT_COEFFS: usize = 16;
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Per-channel standardization `(x - mean) / scale`, fitted once on
/// synthetic textures and fixed so train and test share scaling.
const FEATURE_MEAN: [f64; FEATURE_DIM] = [
    0.474, 0.0598, 0.517, 0.498, 0.00186, 0.00195, 0.240, 0.248, 0.250, 0.223, 6.63, 0.353, 0.390,
    0.153, 0.171, 0.145, 0.0816, 0.110, 0.115, 0.0845, 0.0475, 0.0642, 0.0855, 0.0613, 0.0450,
    0.0281,
];
const FEATURE_SCALE: [f64; FEATURE_DIM] = [
    0.137, 0.0273, 0.0674, 0.0734, 0.00857, 0.00877, 0.111, 0.121, 0.111, 0.106, 1.92, 0.261, 0.298,
    0.129, 0.133, 0.125, 0.0799, 0.101, 0.105, 0.0802, 0.0503, 0.0678, 0.0844, 0.0653, 0.0473,
    0.0343,
];

/// Standardized features, one row of `FEATURE_DIM` values per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Vec<f64>,
}

impl PatchFeatures {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn dct_basis(n: usize) -> Vec<f64> {
    let mut c = vec![0f64; n * n];
    for k in 0..n {
        let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for x in 0..n {
            c[k * n + x] =
                a * (std::f64::consts::PI * (2 * x + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    c
}

/// (row, col) frequency pairs in JPEG zigzag order.
pub fn zigzag(count: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(count);
    let mut s = 0;
    while out.len() < count {
        let diag: Vec<(usize, usize)> = (0..=s).map(|i| (i, s - i)).collect();
        if s % 2 == 0 {
            out.extend(diag.into_iter().rev());
        } else {
            out.extend(diag);
        }
        s += 1;
    }
    out.truncate(count);
    out
}

/// Unstandardized features of one square patch given as Y, Cb, Cr planes.
pub fn raw_patch_features(y: &[f64], cb: &[f64], cr: &[f64], size: usize) -> [f64; FEATURE_DIM] {
    let n = (size * size) as f64;
    let mut f = [0f64; FEATURE_DIM];
    let mean = y.iter().sum::<f64>() / n;
    f[0] = mean;
    f[1] = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    f[2] = cb.iter().sum::<f64>() / n;
    f[3] = cr.iter().sum::<f64>() / n;

    let mut eh = 0.0;
    let mut ev = 0.0;
    for r in 0..size {
        for c in 0..size - 1 {
            eh += (y[r * size + c + 1] - y[r * size + c]).powi(2);
        }
    }
    for r in 0..size - 1 {
        for c in 0..size {
            ev += (y[(r + 1) * size + c] - y[r * size + c]).powi(2);
        }
    }
    let pairs = (size * (size - 1)) as f64;
    f[4] = eh / pairs;
    f[5] = ev / pairs;

    // Orientation histogram over forward-difference gradients, as fractions
    // of all gradient samples; flat samples fall in no bin.
    let samples = ((size - 1) * (size - 1)) as f64;
    for r in 0..size - 1 {
        for c in 0..size - 1 {
            let gx = y[r * size + c + 1] - y[r * size + c];
            let gy = y[(r + 1) * size + c] - y[r * size + c];
            if gx * gx + gy * gy <= 1e-12 {
                continue;
            }
            let mut a = gy.atan2(gx);
            if a < 0.0 {
                a += std::f64::consts::PI;
            }
            let bin = ((a / std::f64::consts::FRAC_PI_4) as usize).min(3);
            f[6 + bin] += 1.0 / samples;
        }
    }

    let owned;
    let basis: &[f64] = if size == PatchGrid::DEFAULT_PATCH {
        default_dct_basis()
    } else {
        owned = dct_basis(size);
        &owned
    };
    for (k, (u, v)) in zigzag(DCT_COEFFS).into_iter().enumerate() {
        let mut s = 0.0;
        for r in 0..size {
            let mut row = 0.0;
            for c in 0..size {
                row += basis[v * size + c] * y[r * size + c];
            }
            s += basis[u * size + r] * row;
        }
        f[10 + k] = s.abs();
    }
    f
}

pub fn standardize(raw: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
    let mut out = [0f64; FEATURE_DIM];
    for i in 0..FEATURE_DIM {
        out[i] = (raw[i] - FEATURE_MEAN[i]) / FEATURE_SCALE[i];
    }
    out
}

fn ycc_planes(img: &Image) -> [Vec<f64>; 3] {
    let f = img.float_data();
    let n = img.pixel_count();
    let mut planes = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for p in f.chunks_exact(3) {
        let ycc = match img.color_space() {
            ColorSpace::LumaChroma => [p[0] as f64, p[1] as f64, p[2] as f64],
            ColorSpace::Srgb => rgb_to_ycbcr(p[0] as f64, p[1] as f64, p[2] as f64),
        };
        for c in 0..3 {
            planes[c].push(ycc[c]);
        }
    }
    planes
}

pub fn raw_features(img: &Image, grid: &PatchGrid) -> Result<Vec<[f64; FEATURE_DIM]>> {
    let views = extract_patches(img, grid)?;
    if grid.patch_size < 2 {
        return Err(Error::InvalidArgument("patch size must be at least 2".into()));
    }
    let planes = ycc_planes(img);
    let w = img.width();
    Ok(views
        .iter()
        .map(|v| {
            let gather = |p: &Vec<f64>| v.pixel_indices(w).map(|i| p[i]).collect::<Vec<_>>();
            raw_patch_features(&gather(&planes[0]), &gather(&planes[1]), &gather(&planes[2]), v.size)
        })
        .collect())
}

pub fn patch_features(img: &Image, grid: &PatchGrid) -> Result<PatchFeatures> {
    let raw = raw_features(img, grid)?;
    Ok(PatchFeatures {
        grid_h: grid.grid_h,
        grid_w: grid.grid_w,
        data: raw.iter().flat_map(standardize).collect(),
    })
}

/// Linear head `y = Wᵀx + b`; W is stored row-major as F×D.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHead {
    f: usize,
    d: usize,
    w: Vec<f64>,
    b: Vec<f64>,
    frozen_w: Vec<f64>,
    frozen_b: Vec<f64>,
}

impl EmbeddingHead {
    /// Gaussian init with std 1/√F and zero bias.
    pub fn random(f: usize, d: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(&[seed, 0x6865_6164]);
        let s = 1.0 / (f as f64).sqrt();
        let w = (0..f * d).map(|_| s * standard_normal(&mut rng)).collect();
        Self::from_parameters(f, d, w, vec![0.0; d])
    }

    pub fn from_parameters(f: usize, d: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        Self::with_frozen(f, d, w.clone(), b.clone(), w, b)
    }

    pub fn with_frozen(
        f: usize,
        d: usize,
        w: Vec<f64>,
        b: Vec<f64>,
        frozen_w: Vec<f64>,
        frozen_b: Vec<f64>,
    ) -> Result<Self> {
        if f == 0 || d == 0 {
            return Err(Error::InvalidArgument("head dimensions must be nonzero".into()));
        }
        if w.len() != f * d || frozen_w.len() != f * d || b.len() != d || frozen_b.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "head parameters do not match F={f}, D={d}"
            )));
        }
        if w.iter().chain(&b).chain(&frozen_w).chain(&frozen_b).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head parameters".into()));
        }
        Ok(Self {
            f,
            d,
            w,
            b,
            frozen_w,
            frozen_b,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.f
    }

    pub fn output_dim(&self) -> usize {
        self.d
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    pub fn frozen_weights(&self) -> &[f64] {
        &self.frozen_w
    }

    pub fn frozen_bias(&self) -> &[f64] {
        &self.frozen_b
    }

    /// The frozen snapshot as a standalone head.
    pub fn frozen(&self) -> EmbeddingHead {
        Self {
            w: self.frozen_w.clone(),
            b: self.frozen_b.clone(),
            ..self.clone()
        }
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.w, &mut self.b)
    }

    /// Raw (unnormalized) projection of one feature row.
    pub fn project(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.w[i * self.d..(i + 1) * self.d];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xi * wv;
            }
        }
    }
}

/// Normalizes in place; vectors with norm below `DEGENERATE_NORM` become e₁.
/// Returns the original norm.
pub fn normalize_or_e1(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < DEGENERATE_NORM {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl Embedding {
    pub fn unit(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        normalize_or_e1(&mut v);
        Self {
            values: v.iter().map(|&x| x as f32).collect(),
            normalized: true,
        }
    }

    pub fn raw(values: Vec<f32>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Unit-normalized patch vectors in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddings {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl PatchEmbeddings {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn head_forward(feat: &PatchFeatures, head: &EmbeddingHead) -> Result<PatchEmbeddings> {
    if feat.data.len() != feat.len() * head.f {
        return Err(Error::DimensionMismatch(format!(
            "features have {} values for {} patches, head expects F={}",
            feat.data.len(),
            feat.len(),
            head.f
        )));
    }
    let mut data = Vec::with_capacity(feat.len() * head.d);
    let mut y = vec![0f64; head.d];
    for x in feat.data.chunks_exact(head.f) {
        head.project(x, &mut y);
        normalize_or_e1(&mut y);
        data.extend(y.iter().map(|&v| v as f32));
    }
    Ok(PatchEmbeddings {
        grid_h: feat.grid_h,
        grid_w: feat.grid_w,
        dim: head.d,
        data,
    })
}

/// Renormalized mean of the patch vectors.
pub fn image_embedding(pe: &PatchEmbeddings) -> Result<Embedding> {
    if pe.is_empty() || pe.dim == 0 {
        return Err(Error::InvalidArgument("empty patch grid".into()));
    }
    let mut mean = vec![0f64; pe.dim];
    for i in 0..pe.len() {
        for (m, &v) in mean.iter_mut().zip(pe.row(i)) {
            *m += v as f64;
        }
    }
    let n = pe.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(Embedding::unit(&mean))
}

/// Convenience: image → patch grid → head → pooled embedding.
pub fn embed_image(img: &Image, head: &EmbeddingHead, patch_size: usize) -> Result<Embedding> {
    let grid = PatchGrid::for_image(img, patch_size)?;
    image_embedding(&head_forward(&patch_features(img, &grid)?, head)?)
}

// ---------------------------------------------------------------------------
// NVEB

pub const NVEB_MAGIC: &[u8; 4] = b"NVEB";
pub const NVEB_VERSION: u16 = 1;
const FLAG_NORMALIZED: u16 = 1;
const FLAG_GRID: u16 = 2;

/// Contents of an NVEB file: `count` vectors of `dim` floats, optionally
/// arranged as a patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub normalized: bool,
    pub count: usize,
    pub dim: usize,
    pub grid: Option<(u16, u16)>,
    pub data: Vec<f32>,
}

impl EmbeddingSet {
    pub fn from_patches(pe: &PatchEmbeddings) -> Result<Self> {
        let gh = u16::try_from(pe.grid_h).map_err(|_| Error::Format("grid too large".into()))?;
        let gw = u16::try_from(pe.grid_w).map_err(|_| Error::Format("grid too large".into()))?;
        Ok(Self {
            normalized: true,
            count: pe.len(),
            dim: pe.dim,
            grid: Some((gh, gw)),
            data: pe.data.clone(),
        })
    }

    pub fn from_embeddings(es: &[Embedding]) -> Result<Self> {
        let dim = es.first().map_or(0, Embedding::dim);
        if es.iter().any(|e| e.dim() != dim) {
            return Err(Error::DimensionMismatch("embeddings differ in dimension".into()));
        }
        Ok(Self {
            normalized: es.iter().all(|e| e.normalized),
            count: es.len(),
            dim,
            grid: None,
            data: es.iter().flat_map(|e| e.values.iter().copied()).collect(),
        })
    }

    pub fn to_patches(&self) -> Result<PatchEmbeddings> {
        let (gh, gw) = self
            .grid
            .ok_or_else(|| Error::Format("embedding file carries no patch grid".into()))?;
        Ok(PatchEmbeddings {
            grid_h: gh as usize,
            grid_w: gw as usize,
            dim: self.dim,
            data: self.data.clone(),
        })
    }

    pub fn to_embeddings(&self) -> Vec<Embedding> {
        if self.dim == 0 {
            return vec![Embedding { values: Vec::new(), normalized: self.normalized }; self.count];
        }
        self.data
            .chunks_exact(self.dim)
            .map(|c| Embedding {
                values: c.to_vec(),
                normalized: self.normalized,
            })
            .collect()
    }
}

pub fn write_embeddings_to(set: &EmbeddingSet, w: &mut impl Write) -> Result<()> {
    if set.data.len() != set.count * set.dim {
        return Err(Error::Format("count × dim does not match payload".into()));
    }
    if let Some((gh, gw)) = set.grid {
        if gh as usize * gw as usize != set.count {
            return Err(Error::Format("grid does not match count".into()));
        }
    }
    let count = u32::try_from(set.count).map_err(|_| Error::Format("count overflow".into()))?;
    let dim = u32::try_from(set.dim).map_err(|_| Error::Format("dim overflow".into()))?;
    let mut flags = 0u16;
    if set.normalized {
        flags |= FLAG_NORMALIZED;
    }
    if set.grid.is_some() {
        flags |= FLAG_GRID;
    }
    let mut buf = Vec::with_capacity(16 + 4 + set.data.len() * 4);
    buf.extend_from_slice(NVEB_MAGIC);
    buf.extend_from_slice(&NVEB_VERSION.to_le_bytes());
    buf.extend_from_slice(&flags.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    if let Some((gh, gw)) = set.grid {
        buf.extend_from_slice(&gh.to_le_bytes());
        buf.extend_from_slice(&gw.to_le_bytes());
    }
    for v in &set.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io("<stream>", e))
}

pub fn read_embeddings_from(r: &mut impl Read) -> Result<EmbeddingSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<stream>", e))?;
    let short = || Error::Format("truncated embedding file".into());
    let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(short);
    if take(0, 4)? != NVEB_MAGIC {
        return Err(Error::Format("bad magic, expected NVEB".into()));
    }
    let u16_at = |at: usize| -> Result<u16> { Ok(u16::from_le_bytes(take(at, 2)?.try_into().unwrap())) };
    let u32_at = |at: usize| -> Result<u32> { Ok(u32::from_le_bytes(take(at, 4)?.try_into().unwrap())) };
    let version = u16_at(4)?;
    if version != NVEB_VERSION {
        return Err(Error::Format(format!("unsupported NVEB version {version}")));
    }
    let flags = u16_at(6)?;
    let count = u32_at(8)? as usize;
    let dim = u32_at(12)? as usize;
    let mut at = 16;
    let grid = if flags & FLAG_GRID != 0 {
        let g = (u16_at(16)?, u16_at(18)?);
        at = 20;
        if g.0 as usize * g.1 as usize != count {
            return Err(Error::Format(format!(
                "grid {}x{} inconsistent with count {count}",
                g.0, g.1
            )));
        }
        Some(g)
    } else {
        None
    };
    let n = count
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("count × dim overflows".into()))?;
    if bytes.len() - at != n * 4 {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {} for {count}×{dim}",
            bytes.len() - at,
            n * 4
        )));
    }
    let data = bytes[at..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(EmbeddingSet {
        normalized: flags & FLAG_NORMALIZED != 0,
        count,
        dim,
        grid,
        data,
    })
}

pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_embeddings_to(set, &mut f).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        e => e,
    })
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings_from(&mut f)
}

/// The shared DCT basis for the default patch size.
pub fn default_dct_basis() -> &'static [f64] {
    static B: OnceLock<Vec<f64>> = OnceLock::new();
    B.get_or_init(|| dct_basis(PatchGrid::DEFAULT_PATCH))
}
