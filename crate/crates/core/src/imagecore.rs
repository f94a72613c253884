//! Raster images, PNG codec, BT.601 color transforms and patch grids.

use std::path::Path;

use image::{DynamicImage, ExtendedColorType, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    Srgb,
    /// Full-range BT.601 Y, Cb, Cr with chroma centered at the midpoint.
    LumaChroma,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    U8(Vec<u8>),
    /// Unit-interval floats.
    F32(Vec<f32>),
}

/// A three-channel raster with row-major interleaved samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    color_space: ColorSpace,
    samples: Samples,
}

impl Image {
    pub fn from_u8(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_len(width, height, data.len())?;
        Ok(Self {
            width,
            height,
            color_space: ColorSpace::Srgb,
            samples: Samples::U8(data),
        })
    }

    pub fn from_f32(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "float sample {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            color_space: ColorSpace::Srgb,
            samples: Samples::F32(data),
        })
    }

    /// Builds a float image, clamping every sample into [0, 1].
    pub fn from_f32_clamped(width: usize, height: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::from_f32(width, height, data)
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            color_space: ColorSpace::Srgb,
            samples: Samples::U8(data),
        }
    }

    pub fn with_color_space(mut self, cs: ColorSpace) -> Self {
        self.color_space = cs;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color_space
    }

    pub fn samples(&self) -> &Samples {
        &self.samples
    }

    pub fn is_u8(&self) -> bool {
        matches!(self.samples, Samples::U8(_))
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Samples as unit floats (copied).
    pub fn float_data(&self) -> Vec<f32> {
        match &self.samples {
            Samples::U8(d) => d.iter().map(|&v| f32::from(v) / 255.0).collect(),
            Samples::F32(d) => d.clone(),
        }
    }

    #[inline]
    pub fn sample(&self, x: usize, y: usize, c: usize) -> f32 {
        let i = (y * self.width + x) * CHANNELS + c;
        match &self.samples {
            Samples::U8(d) => f32::from(d[i]) / 255.0,
            Samples::F32(d) => d[i],
        }
    }

    pub fn to_f32(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            color_space: self.color_space,
            samples: Samples::F32(self.float_data()),
        }
    }

    /// Quantizes by `round(v * 255)`.
    pub fn to_u8(&self) -> Image {
        let data = match &self.samples {
            Samples::U8(d) => d.clone(),
            Samples::F32(d) => d.iter().map(|&v| quantize(v)).collect(),
        };
        Image {
            width: self.width,
            height: self.height,
            color_space: self.color_space,
            samples: Samples::U8(data),
        }
    }

    /// Wraps float samples in an image of the same sample kind and color
    /// space as `self`; 8-bit images are quantized exactly once here.
    pub fn like(&self, width: usize, height: usize, mut data: Vec<f32>) -> Image {
        debug_assert_eq!(data.len(), width * height * CHANNELS);
        let samples = if self.is_u8() {
            Samples::U8(data.iter().map(|&v| quantize(v)).collect())
        } else {
            for v in &mut data {
                *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            }
            Samples::F32(data)
        };
        Image {
            width,
            height,
            color_space: self.color_space,
            samples,
        }
    }

    /// BT.601 luma as a float plane.
    pub fn luma(&self) -> Plane {
        let n = self.pixel_count();
        let mut out = Vec::with_capacity(n);
        let f = self.float_data();
        match self.color_space {
            ColorSpace::LumaChroma => out.extend(f.chunks_exact(3).map(|p| p[0])),
            ColorSpace::Srgb => out.extend(
                f.chunks_exact(3)
                    .map(|p| (KR * p[0] as f64 + KG * p[1] as f64 + KB * p[2] as f64) as f32),
            ),
        }
        Plane::new(self.width, self.height, out)
    }
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("image dimensions must be nonzero".into()));
    }
    if len != width * height * CHANNELS {
        return Err(Error::DimensionMismatch(format!(
            "{len} samples for a {width}x{height}x{CHANNELS} image"
        )));
    }
    Ok(())
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel float raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "plane length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0.0; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Edge-replicating access.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }
}

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;
const CB_SCALE: f64 = 0.5 / (1.0 - KB);
const CR_SCALE: f64 = 0.5 / (1.0 - KR);

/// Full-range BT.601 forward transform of one unit-float pixel.
#[inline]
pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> [f64; 3] {
    let y = KR * r + KG * g + KB * b;
    [y, 0.5 + (b - y) * CB_SCALE, 0.5 + (r - y) * CR_SCALE]
}

#[inline]
pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> [f64; 3] {
    let r = y + (cr - 0.5) / CR_SCALE;
    let b = y + (cb - 0.5) / CB_SCALE;
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

/// sRGB → LumaChroma. The sample kind of the input is preserved.
pub fn to_luma_chroma(img: &Image) -> Result<Image> {
    if img.color_space != ColorSpace::Srgb {
        return Err(Error::InvalidArgument("expected an sRGB image".into()));
    }
    let mut f = img.float_data();
    for p in f.chunks_exact_mut(3) {
        let ycc = rgb_to_ycbcr(p[0] as f64, p[1] as f64, p[2] as f64);
        for c in 0..3 {
            p[c] = ycc[c].clamp(0.0, 1.0) as f32;
        }
    }
    Ok(img
        .like(img.width, img.height, f)
        .with_color_space(ColorSpace::LumaChroma))
}

/// LumaChroma → sRGB, clamped.
pub fn from_luma_chroma(img: &Image) -> Result<Image> {
    if img.color_space != ColorSpace::LumaChroma {
        return Err(Error::InvalidArgument("expected a luma-chroma image".into()));
    }
    let mut f = img.float_data();
    for p in f.chunks_exact_mut(3) {
        let rgb = ycbcr_to_rgb(p[0] as f64, p[1] as f64, p[2] as f64);
        for c in 0..3 {
            p[c] = rgb[c].clamp(0.0, 1.0) as f32;
        }
    }
    Ok(img
        .like(img.width, img.height, f)
        .with_color_space(ColorSpace::Srgb))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = reader;
    reader.set_format(ImageFormat::Png);
    let decoded = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data = match decoded {
        DynamicImage::ImageRgb8(buf) => buf.into_raw(),
        DynamicImage::ImageRgba8(buf) => buf
            .into_raw()
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_) => {
            return Err(Error::UnsupportedBitDepth {
                path: path.to_path_buf(),
                depth: 16,
            })
        }
        DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_) => {
            return Err(Error::UnsupportedBitDepth {
                path: path.to_path_buf(),
                depth: 32,
            })
        }
        other => {
            return Err(Error::UnsupportedColorType {
                path: path.to_path_buf(),
                color: format!("{:?}", other.color()),
            })
        }
    };
    Image::from_u8(w, h, data)
}

/// Writes an 8-bit RGB PNG. Float images are quantized by `round(v * 255)`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// PNG bytes for an image (sRGB, 8-bit).
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let srgb = match img.color_space {
        ColorSpace::Srgb => img.to_u8(),
        ColorSpace::LumaChroma => from_luma_chroma(img)?.to_u8(),
    };
    let Samples::U8(data) = srgb.samples else {
        unreachable!("to_u8 yields 8-bit samples")
    };
    encode_raw_png(&data, img.width, img.height, ExtendedColorType::Rgb8)
}

/// Grayscale 8-bit PNG bytes.
pub fn encode_gray_png(data: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    encode_raw_png(data, width, height, ExtendedColorType::L8)
}

fn encode_raw_png(
    data: &[u8],
    width: usize,
    height: usize,
    color: ExtendedColorType,
) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    image::write_buffer_with_format(
        &mut out,
        data,
        width as u32,
        height as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

/// Non-overlapping square patches anchored at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGrid {
    pub const DEFAULT_PATCH: usize = 14;

    pub fn for_size(width: usize, height: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || patch_size > width.min(height) {
            return Err(Error::TooSmall(format!(
                "patch size {patch_size} does not fit a {width}x{height} image"
            )));
        }
        Ok(Self {
            patch_size,
            grid_h: height / patch_size,
            grid_w: width / patch_size,
        })
    }

    pub fn for_image(img: &Image, patch_size: usize) -> Result<Self> {
        Self::for_size(img.width, img.height, patch_size)
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchView {
    pub row: usize,
    pub col: usize,
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

impl PatchView {
    /// Pixel indices (raster order in the full image) covered by the patch.
    pub fn pixel_indices(&self, image_width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.y0..self.y0 + self.size).flat_map(move |y| {
            (self.x0..self.x0 + self.size).map(move |x| y * image_width + x)
        })
    }
}

/// Patches in raster order; right and bottom remainders are dropped.
pub fn extract_patches(img: &Image, grid: &PatchGrid) -> Result<Vec<PatchView>> {
    let expected = PatchGrid::for_image(img, grid.patch_size)?;
    if expected != *grid {
        return Err(Error::DimensionMismatch(format!(
            "grid {}x{} does not match a {}x{} image at patch {}",
            grid.grid_w, grid.grid_h, img.width, img.height, grid.patch_size
        )));
    }
    let s = grid.patch_size;
    Ok((0..grid.grid_h)
        .flat_map(|row| {
            (0..grid.grid_w).map(move |col| PatchView {
                row,
                col,
                x0: col * s,
                y0: row * s,
                size: s,
            })
        })
        .collect())
}

/// Mean squared difference over unit-float samples.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (fa, fb) = (a.float_data(), b.float_data());
    let sum: f64 = fa
        .iter()
        .zip(&fb)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / fa.len() as f64)
}

/// Separable bilinear resampling with half-pixel-center alignment.
pub fn resize_bilinear(img: &Image, new_w: usize, new_h: usize) -> Result<Image> {
    if new_w == 0 || new_h == 0 {
        return Err(Error::InvalidArgument("resize target must be nonzero".into()));
    }
    let src = img.float_data();
    let taps = |n_src: usize, n_dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_src as f64 / n_dst as f64;
        (0..n_dst)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xt = taps(img.width, new_w);
    let yt = taps(img.height, new_h);
    // Horizontal pass.
    let mut tmp = vec![0f64; new_w * img.height * CHANNELS];
    for y in 0..img.height {
        for (x, &(x0, x1, t)) in xt.iter().enumerate() {
            for c in 0..CHANNELS {
                let a = src[(y * img.width + x0) * CHANNELS + c] as f64;
                let b = src[(y * img.width + x1) * CHANNELS + c] as f64;
                tmp[(y * new_w + x) * CHANNELS + c] = a * (1.0 - t) + b * t;
            }
        }
    }
    let mut out = vec![0f32; new_w * new_h * CHANNELS];
    for (y, &(y0, y1, t)) in yt.iter().enumerate() {
        for x in 0..new_w {
            for c in 0..CHANNELS {
                let a = tmp[(y0 * new_w + x) * CHANNELS + c];
                let b = tmp[(y1 * new_w + x) * CHANNELS + c];
                out[(y * new_w + x) * CHANNELS + c] = (a * (1.0 - t) + b * t) as f32;
            }
        }
    }
    Ok(img.like(new_w, new_h, out))
}
