//! Dense block-matching flow and temporal-region-of-interest masks.
//!
//! Flow is integer-valued and estimated with a three-level pyramid: an
//! exhaustive search on the coarsest level followed by small refinement
//! windows on every finer level. Masks select the pixels with the largest
//! motion at a requested coverage fraction.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{encode_gray_png, Image, Plane};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub levels: usize,
    pub block: usize,
    pub coarse_radius: i32,
    pub refine_radius: i32,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            levels: 3,
            block: 8,
            coarse_radius: 8,
            refine_radius: 2,
        }
    }
}

impl FlowParams {
    /// Largest displacement the pyramid can report along one axis.
    pub fn max_radius(&self) -> i32 {
        let mut r = self.coarse_radius;
        for _ in 1..self.levels {
            r = 2 * r + self.refine_radius;
        }
        r
    }
}

/// Per-pixel integer displacement from `prev` to `curr`, indexed in `prev`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<i32>,
    pub v: Vec<i32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0; width * height],
            v: vec![0; width * height],
        }
    }
}

pub const MIN_FLOW_DIM: usize = 32;

fn downsample2(p: &Plane) -> Plane {
    let (w, h) = (p.width / 2, p.height / 2);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let s = p.get(2 * x, 2 * y)
                + p.get(2 * x + 1, 2 * y)
                + p.get(2 * x, 2 * y + 1)
                + p.get(2 * x + 1, 2 * y + 1);
            out.push(s * 0.25);
        }
    }
    Plane::new(w, h, out)
}

struct BlockGrid {
    bw: usize,
    bh: usize,
    flow: Vec<(i32, i32)>,
}

fn sad(prev: &Plane, curr: &Plane, x0: usize, y0: usize, block: usize, du: i32, dv: i32) -> f64 {
    let x1 = (x0 + block).min(prev.width);
    let y1 = (y0 + block).min(prev.height);
    let mut acc = 0f64;
    for y in y0..y1 {
        for x in x0..x1 {
            let a = prev.get(x, y);
            let b = curr.get_clamped(x as isize + du as isize, y as isize + dv as isize);
            acc += (a - b).abs() as f64;
        }
    }
    acc
}

fn match_level(
    prev: &Plane,
    curr: &Plane,
    block: usize,
    predict: impl Fn(usize, usize) -> (i32, i32) + Sync,
    radius: i32,
) -> BlockGrid {
    let bw = prev.width.div_ceil(block);
    let bh = prev.height.div_ceil(block);
    let flow = (0..bw * bh)
        .into_par_iter()
        .map(|bi| {
            let (bx, by) = (bi % bw, bi / bw);
            let (pu, pv) = predict(bx, by);
            // (cost, squared magnitude, raster position in the window)
            let mut best: Option<(f64, i64, usize, (i32, i32))> = None;
            let side = (2 * radius + 1) as usize;
            for (k, (dv, du)) in (-radius..=radius)
                .flat_map(|dv| (-radius..=radius).map(move |du| (dv, du)))
                .enumerate()
            {
                debug_assert!(k < side * side);
                let (u, v) = (pu + du, pv + dv);
                let cost = sad(prev, curr, bx * block, by * block, block, u, v);
                let mag = i64::from(u) * i64::from(u) + i64::from(v) * i64::from(v);
                let better = match best {
                    None => true,
                    Some((bc, bm, bk, _)) => (cost, mag, k) < (bc, bm, bk),
                };
                if better {
                    best = Some((cost, mag, k, (u, v)));
                }
            }
            best.expect("nonempty search window").3
        })
        .collect();
    BlockGrid { bw, bh, flow }
}

fn median9(mut vals: [i32; 9]) -> i32 {
    vals.sort_unstable();
    vals[4]
}

fn median3x3(src: &[i32], w: usize, h: usize) -> Vec<i32> {
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        src[yc * w + xc]
    };
    let mut out = vec![0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut win = [0; 9];
            let mut k = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    win[k] = at(x as isize + dx, y as isize + dy);
                    k += 1;
                }
            }
            out[y * w + x] = median9(win);
        }
    }
    out
}

pub fn estimate_flow(prev: &Image, curr: &Image) -> Result<FlowField> {
    estimate_flow_with(prev, curr, &FlowParams::default())
}

pub fn estimate_flow_with(prev: &Image, curr: &Image, params: &FlowParams) -> Result<FlowField> {
    if !prev.same_shape(curr) {
        return Err(Error::DimensionMismatch(format!(
            "flow frames {}x{} and {}x{}",
            prev.width(),
            prev.height(),
            curr.width(),
            curr.height()
        )));
    }
    if prev.width().min(prev.height()) < MIN_FLOW_DIM {
        return Err(Error::TooSmall(format!(
            "flow needs frames of at least {MIN_FLOW_DIM}x{MIN_FLOW_DIM}"
        )));
    }
    if params.levels == 0 || params.block == 0 {
        return Err(Error::InvalidArgument("flow levels and block must be ≥ 1".into()));
    }
    let mut prev_pyr = vec![prev.luma()];
    let mut curr_pyr = vec![curr.luma()];
    for _ in 1..params.levels {
        let p = downsample2(prev_pyr.last().unwrap());
        let c = downsample2(curr_pyr.last().unwrap());
        if p.width < params.block || p.height < params.block {
            break;
        }
        prev_pyr.push(p);
        curr_pyr.push(c);
    }
    let top = prev_pyr.len() - 1;
    let mut grid = match_level(
        &prev_pyr[top],
        &curr_pyr[top],
        params.block,
        |_, _| (0, 0),
        params.coarse_radius,
    );
    for level in (0..top).rev() {
        let parent = grid;
        let (pw, ph) = (parent.bw, parent.bh);
        let block = params.block;
        grid = match_level(
            &prev_pyr[level],
            &curr_pyr[level],
            block,
            |bx, by| {
                // Parent block containing this block's center.
                let cx = (bx * block + block / 2) / 2 / block;
                let cy = (by * block + block / 2) / 2 / block;
                let (u, v) = parent.flow[cy.min(ph - 1) * pw + cx.min(pw - 1)];
                (2 * u, 2 * v)
            },
            params.refine_radius,
        );
    }
    let (w, h) = (prev.width(), prev.height());
    let mut u = vec![0; w * h];
    let mut v = vec![0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (fu, fv) = grid.flow[(y / params.block) * grid.bw + x / params.block];
            u[y * w + x] = fu;
            v[y * w + x] = fv;
        }
    }
    Ok(FlowField {
        width: w,
        height: h,
        u: median3x3(&u, w, h),
        v: median3x3(&v, w, h),
    })
}

pub fn flow_magnitude(f: &FlowField) -> Plane {
    let data = f
        .u
        .iter()
        .zip(&f.v)
        .map(|(&u, &v)| ((u as f64).powi(2) + (v as f64).powi(2)).sqrt() as f32)
        .collect();
    Plane::new(f.width, f.height, data)
}

const NVFL_MAGIC: &[u8; 4] = b"NVFL";

pub fn write_flow(f: &FlowField, mut w: impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(14 + f.u.len() * 4);
    buf.extend_from_slice(NVFL_MAGIC);
    buf.extend_from_slice(&1u16.to_le_bytes());
    buf.extend_from_slice(&(f.width as u32).to_le_bytes());
    buf.extend_from_slice(&(f.height as u32).to_le_bytes());
    for (&u, &v) in f.u.iter().zip(&f.v) {
        let (u16v, v16v) = (
            i16::try_from(u).map_err(|_| Error::Format(format!("flow {u} exceeds i16")))?,
            i16::try_from(v).map_err(|_| Error::Format(format!("flow {v} exceeds i16")))?,
        );
        buf.extend_from_slice(&u16v.to_le_bytes());
        buf.extend_from_slice(&v16v.to_le_bytes());
    }
    w.write_all(&buf)
        .map_err(|e| Error::io("<flow stream>", e))
}

pub fn read_flow(mut r: impl Read) -> Result<FlowField> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::io("<flow stream>", e))?;
    if buf.len() < 14 || &buf[..4] != NVFL_MAGIC {
        return Err(Error::Format("bad flow magic".into()));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != 1 {
        return Err(Error::Format(format!("unsupported flow version {version}")));
    }
    let width = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
    let n = width * height;
    if buf.len() != 14 + n * 4 {
        return Err(Error::Format(format!(
            "flow payload is {} bytes, expected {}",
            buf.len() - 14,
            n * 4
        )));
    }
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for px in buf[14..].chunks_exact(4) {
        u.push(i32::from(i16::from_le_bytes([px[0], px[1]])));
        v.push(i32::from(i16::from_le_bytes([px[2], px[3]])));
    }
    Ok(FlowField {
        width,
        height,
        u,
        v,
    })
}

pub fn save_flow(f: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_flow(f, std::io::BufWriter::new(file))
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_flow(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TroiParams {
    /// 3×3 morphological closing after selection.
    pub close: bool,
    /// Connected components (8-connectivity) smaller than this are removed.
    pub min_component: usize,
    pub min_coverage: f64,
    pub max_coverage: f64,
    pub feather_sigma: f64,
}

impl Default for TroiParams {
    fn default() -> Self {
        Self {
            close: true,
            min_component: 16,
            min_coverage: 0.30,
            max_coverage: 0.85,
            feather_sigma: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TroiMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
    /// Achieved fraction of set pixels after cleanup.
    pub coverage: f64,
    /// Selected pixel count before cleanup.
    pub selected: usize,
    /// Feathered weights in [0, 1], present after [`feather_mask`].
    pub soft: Option<Vec<f32>>,
}

impl TroiMask {
    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height);
        let count = bits.iter().filter(|&&b| b).count();
        Self {
            width,
            height,
            coverage: count as f64 / bits.len() as f64,
            selected: count,
            bits,
            soft: None,
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::from_bits(width, height, vec![true; width * height])
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Per-pixel blend weights: soft weights when feathered, else 0/1.
    pub fn weights(&self) -> Vec<f32> {
        match &self.soft {
            Some(s) => s.clone(),
            None => self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Reads a mask PNG (gray or RGB); pixels at or above mid-gray are set.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        let gray = decoded.to_luma8();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        Ok(Self::from_bits(w, h, gray.into_raw().into_iter().map(|v| v >= 128).collect()))
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let data: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        encode_gray_png(&data, self.width, self.height)
    }
}

/// Number of pixels selected for a coverage fraction.
///
/// The product is nudged down by 1e-9 before `ceil` so that fractions like
/// 0.3 × 100, which evaluate to 30.000000000000004 in binary floating point,
/// select 30 pixels.
pub fn coverage_count(coverage: f64, n: usize) -> usize {
    ((coverage * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

pub fn troi_from_flow(mag: &Plane, coverage: f64, params: &TroiParams) -> Result<TroiMask> {
    let n = mag.data.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty magnitude map".into()));
    }
    if !(params.min_coverage..=params.max_coverage).contains(&coverage) || coverage > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "coverage {coverage} outside [{}, {}]",
            params.min_coverage, params.max_coverage
        )));
    }
    let take = coverage_count(coverage, n);
    let mut order: Vec<usize> = (0..n).collect();
    // Descending magnitude, ascending raster index on ties.
    order.sort_by(|&a, &b| mag.data[b].total_cmp(&mag.data[a]).then(a.cmp(&b)));
    let mut bits = vec![false; n];
    for &i in &order[..take] {
        bits[i] = true;
    }
    let (w, h) = (mag.width, mag.height);
    // Cleanup is skipped on frames smaller than min_component² pixels.
    if n >= params.min_component * params.min_component {
        if params.close {
            bits = erode(&dilate(&bits, w, h), w, h);
        }
        if params.min_component > 1 {
            remove_small_components(&mut bits, w, h, params.min_component);
        }
    }
    let count = bits.iter().filter(|&&b| b).count();
    Ok(TroiMask {
        width: w,
        height: h,
        bits,
        coverage: count as f64 / n as f64,
        selected: take,
        soft: None,
    })
}

fn neighborhood(bits: &[bool], w: usize, h: usize, want: bool) -> Vec<bool> {
    // want = true: dilation (any set); want = false: erosion (all set).
    // Out-of-frame neighbors are ignored.
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut hit = !want;
            'win: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let b = bits[ny as usize * w + nx as usize];
                    if want && b {
                        hit = true;
                        break 'win;
                    }
                    if !want && !b {
                        hit = false;
                        break 'win;
                    }
                }
            }
            out[y * w + x] = hit;
        }
    }
    out
}

fn dilate(bits: &[bool], w: usize, h: usize) -> Vec<bool> {
    neighborhood(bits, w, h, true)
}

fn erode(bits: &[bool], w: usize, h: usize) -> Vec<bool> {
    neighborhood(bits, w, h, false)
}

fn remove_small_components(bits: &mut [bool], w: usize, h: usize, min_size: usize) {
    let mut label = vec![usize::MAX; w * h];
    let mut stack = Vec::new();
    let mut members = Vec::new();
    for start in 0..w * h {
        if !bits[start] || label[start] != usize::MAX {
            continue;
        }
        members.clear();
        stack.push(start);
        label[start] = start;
        while let Some(i) = stack.pop() {
            members.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if bits[j] && label[j] == usize::MAX {
                        label[j] = start;
                        stack.push(j);
                    }
                }
            }
        }
        if members.len() < min_size {
            for &i in &members {
                bits[i] = false;
            }
        }
    }
}

/// Adds feathered weights: a Gaussian blur (σ = `sigma`, truncated to a disc
/// of radius 3σ) of the binary mask with edge-replicated borders.
pub fn feather_mask(m: &TroiMask, sigma: f64) -> TroiMask {
    let (w, h) = (m.width, m.height);
    let mut out = m.clone();
    if sigma <= 0.0 {
        out.soft = Some(m.weights_hard());
        return out;
    }
    let reach = 3.0 * sigma;
    let r = reach.floor() as isize;
    let mut kernel = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            if d2 <= reach * reach {
                kernel.push((dx, dy, (-d2 / (2.0 * sigma * sigma)).exp()));
            }
        }
    }
    let norm: f64 = kernel.iter().map(|k| k.2).sum();
    // Gather with clamped coordinates so the mask extends past the border.
    let acc: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            kernel
                .iter()
                .filter(|&&(dx, dy, _)| {
                    let nx = (x + dx).clamp(0, w as isize - 1) as usize;
                    let ny = (y + dy).clamp(0, h as isize - 1) as usize;
                    m.bits[ny * w + nx]
                })
                .map(|k| k.2)
                .sum()
        })
        .collect();
    let soft = acc
        .into_iter()
        .map(|a| {
            let v = a / norm;
            if v >= 1.0 - 1e-9 {
                1.0
            } else {
                v.max(0.0) as f32
            }
        })
        .collect();
    out.soft = Some(soft);
    out
}

impl TroiMask {
    fn weights_hard(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}
