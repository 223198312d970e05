//! First-layer handcrafted channels (LUV color, normalized gradient magnitude
//! and six orientation histograms) and the per-scale channel pyramid.
//!
//! Fixed constants:
//! - sRGB companding and the sRGB→XYZ matrix with a D65 white point.
//! - LUV rescaling `L/100`, `(u + 134)/354`, `(v + 140)/262`.
//! - Gradients: centered differences, replicated borders, computed on the color
//!   plane with the largest magnitude at each pixel.
//! - Normalized magnitude: `M / (S + 0.005)` where `S` is `M` smoothed by a
//!   radius-5 triangle filter.
//! - Orientation bins: 6 bins over `[0, π)`, bin `k` centered at `kπ/6`, raw
//!   magnitude split linearly between the two nearest bins.
//! - Post-shrink smoothing: radius-1 triangle filter (`[1 2 1] / 4`).

use std::f32::consts::PI;
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{McfError, Result};
use crate::image::ImageBuffer;

pub const MODEL_HEIGHT: usize = 128;
pub const MODEL_WIDTH: usize = 64;
pub const L1_CHANNELS: usize = 10;
pub const ORIENTATION_BINS: usize = 6;
pub const NORM_CONSTANT: f32 = 0.005;
pub const NORM_RADIUS: usize = 5;

const CHANNEL_DUMP_MAGIC: &[u8; 4] = b"MCFC";
const CHANNEL_DUMP_VERSION: u32 = 1;

/// A stack of equally sized real-valued planes belonging to one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStack {
    layer: usize,
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ChannelStack {
    pub fn new(
        layer: usize,
        channels: usize,
        width: usize,
        height: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(McfError::InvalidInput(format!(
                "empty channel stack {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * width * height {
            return Err(McfError::InvalidInput(format!(
                "channel stack {channels}x{height}x{width} needs {} values, got {}",
                channels * width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(McfError::InvalidInput("non-finite channel value".into()));
        }
        Ok(ChannelStack {
            layer,
            channels,
            width,
            height,
            data,
        })
    }

    pub(crate) fn from_parts(
        layer: usize,
        channels: usize,
        width: usize,
        height: usize,
        data: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(data.len(), channels * width * height);
        ChannelStack {
            layer,
            channels,
            width,
            height,
            data,
        }
    }

    pub fn zeros(layer: usize, channels: usize, width: usize, height: usize) -> Self {
        ChannelStack::from_parts(layer, channels, width, height, vec![0.0; channels * width * height])
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn with_layer(mut self, layer: usize) -> Self {
        self.layer = layer;
        self
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Stacks `other`'s planes after this stack's planes.
    pub fn concat(mut self, other: ChannelStack) -> Result<Self> {
        if self.width != other.width || self.height != other.height {
            return Err(McfError::InvalidInput(format!(
                "cannot concatenate {}x{} with {}x{} stacks",
                self.width, self.height, other.width, other.height
            )));
        }
        self.channels += other.channels;
        self.data.extend(other.data);
        Ok(self)
    }

    /// Integer-aligned spatial crop across all planes.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(McfError::InvalidInput(format!(
                "crop ({x}, {y}, {w}, {h}) outside {}x{} stack",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(self.channels * w * h);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for row in y..y + h {
                data.extend_from_slice(&plane[row * self.width + x..row * self.width + x + w]);
            }
        }
        Ok(ChannelStack::from_parts(self.layer, self.channels, w, h, data))
    }

    pub fn mirror_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width) {
            data.extend(row.iter().rev());
        }
        ChannelStack::from_parts(self.layer, self.channels, self.width, self.height, data)
    }

    /// Debug dump: `MCFC`, u32 version, u32 width, u32 height, u32 channel
    /// count, then little-endian f32 values plane by plane.
    pub fn write_dump(&self, mut out: impl Write) -> Result<()> {
        out.write_all(CHANNEL_DUMP_MAGIC)?;
        for v in [
            CHANNEL_DUMP_VERSION,
            self.width as u32,
            self.height as u32,
            self.channels as u32,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(mut input: impl Read, layer: usize) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHANNEL_DUMP_MAGIC {
            return Err(McfError::Load {
                what: "channel dump".into(),
                reason: "bad magic".into(),
            });
        }
        let mut header = [0u32; 4];
        for h in header.iter_mut() {
            *h = read_u32(&mut input)?;
        }
        let [version, width, height, channels] = header;
        if version != CHANNEL_DUMP_VERSION {
            return Err(McfError::Load {
                what: "channel dump".into(),
                reason: format!("unsupported version {version}"),
            });
        }
        let n = (width as usize) * (height as usize) * (channels as usize);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(read_f32(&mut input)?);
        }
        ChannelStack::new(layer, channels as usize, width as usize, height as usize, data)
    }
}

pub(crate) fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_f32(input: &mut impl Read) -> Result<f32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}

// sRGB (D65) to XYZ.
const RGB_TO_XYZ: [[f32; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];
const WHITE_X: f32 = 0.950_47;
const WHITE_Y: f32 = 1.0;
const WHITE_Z: f32 = 1.088_83;
const LUV_EPSILON: f32 = 216.0 / 24389.0;
const LUV_KAPPA: f32 = 24389.0 / 27.0;
pub const LUV_U_OFFSET: f32 = 134.0;
pub const LUV_U_RANGE: f32 = 354.0;
pub const LUV_V_OFFSET: f32 = 140.0;
pub const LUV_V_RANGE: f32 = 262.0;

fn srgb_to_linear(c: f32) -> f32 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Converts one sRGB pixel to rescaled `(L, U, V)` in `[0, 1]`.
pub fn luv_pixel(rgb: [f32; 3]) -> [f32; 3] {
    let lin = rgb.map(srgb_to_linear);
    let [x, y, z] = RGB_TO_XYZ.map(|row| row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]);
    let yr = y / WHITE_Y;
    let l = if yr > LUV_EPSILON {
        116.0 * yr.cbrt() - 16.0
    } else {
        LUV_KAPPA * yr
    };
    let white_den = WHITE_X + 15.0 * WHITE_Y + 3.0 * WHITE_Z;
    let un = 4.0 * WHITE_X / white_den;
    let vn = 9.0 * WHITE_Y / white_den;
    let den = x + 15.0 * y + 3.0 * z;
    let (u, v) = if den > 0.0 {
        (
            13.0 * l * (4.0 * x / den - un),
            13.0 * l * (9.0 * y / den - vn),
        )
    } else {
        (0.0, 0.0)
    };
    [
        l / 100.0,
        (u + LUV_U_OFFSET) / LUV_U_RANGE,
        (v + LUV_V_OFFSET) / LUV_V_RANGE,
    ]
}

pub fn rgb_to_luv(image: &ImageBuffer) -> Result<ChannelStack> {
    image.validate()?;
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    for i in 0..n {
        let luv = luv_pixel([r[i], g[i], b[i]]);
        data[i] = luv[0];
        data[n + i] = luv[1];
        data[2 * n + i] = luv[2];
    }
    Ok(ChannelStack::from_parts(1, 3, w, h, data))
}

/// Per-pixel gradient magnitude and orientation in `[0, π)`, taken from the
/// color plane with the strongest gradient.
pub fn gradient_mag_orient(image: &ImageBuffer) -> (Vec<f32>, Vec<f32>) {
    let (w, h) = (image.width(), image.height());
    let mut mag = vec![-1.0f32; w * h];
    let mut orient = vec![0.0f32; w * h];
    for c in 0..3 {
        let p = image.plane(c);
        for y in 0..h {
            let up = y.saturating_sub(1);
            let down = (y + 1).min(h - 1);
            for x in 0..w {
                let left = x.saturating_sub(1);
                let right = (x + 1).min(w - 1);
                let gx = (p[y * w + right] - p[y * w + left]) * 0.5;
                let gy = (p[down * w + x] - p[up * w + x]) * 0.5;
                let m = (gx * gx + gy * gy).sqrt();
                let i = y * w + x;
                if m > mag[i] {
                    mag[i] = m;
                    orient[i] = fold_orientation(gy.atan2(gx));
                }
            }
        }
    }
    (mag, orient)
}

fn fold_orientation(theta: f32) -> f32 {
    let mut t = theta;
    if t < 0.0 {
        t += PI;
    }
    if t >= PI {
        t -= PI;
    }
    t
}

/// Splits `mag` between the two orientation bins nearest `orient`.
/// Returns `(lower_bin, weight_lower, upper_bin, weight_upper)`.
#[inline]
pub fn orientation_split(mag: f32, orient: f32) -> (usize, f32, usize, f32) {
    let pos = orient / (PI / ORIENTATION_BINS as f32);
    let lower = pos.floor();
    let frac = pos - lower;
    let lo = (lower as usize) % ORIENTATION_BINS;
    let hi = (lo + 1) % ORIENTATION_BINS;
    (lo, mag * (1.0 - frac), hi, mag * frac)
}

/// Seven gradient channels: normalized magnitude followed by six orientation bins.
pub fn gradient_channels(image: &ImageBuffer) -> Result<ChannelStack> {
    image.validate()?;
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    let (mag, orient) = gradient_mag_orient(image);
    let smoothed = triangle_filter_plane(&mag, w, h, NORM_RADIUS);
    let mut data = vec![0.0f32; 7 * n];
    for i in 0..n {
        data[i] = mag[i] / (smoothed[i] + NORM_CONSTANT);
        let (lo, wlo, hi, whi) = orientation_split(mag[i], orient[i]);
        data[(1 + lo) * n + i] += wlo;
        data[(1 + hi) * n + i] += whi;
    }
    Ok(ChannelStack::from_parts(1, 7, w, h, data))
}

/// Separable triangle filter with replicated borders.
pub fn triangle_filter_plane(plane: &[f32], w: usize, h: usize, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return plane.to_vec();
    }
    let r = radius as isize;
    let norm = ((radius + 1) * (radius + 1)) as f32;
    let kernel: Vec<f32> = (-r..=r).map(|k| (r + 1 - k.abs()) as f32 / norm).collect();
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                acc += k * row[clamp(x as isize + t as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for (t, k) in kernel.iter().enumerate() {
            let src = clamp(y as isize + t as isize - r, h);
            let src_row = &tmp[src * w..(src + 1) * w];
            let dst_row = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += k * s;
            }
        }
    }
    out
}

/// Averages non-overlapping `shrink x shrink` blocks. Dimensions must be
/// multiples of `shrink`.
pub fn block_average(stack: &ChannelStack, shrink: usize) -> Result<ChannelStack> {
    validate_shrink(shrink)?;
    let (w, h) = (stack.width(), stack.height());
    if w % shrink != 0 || h % shrink != 0 {
        return Err(McfError::InvalidInput(format!(
            "{w}x{h} stack is not divisible by shrink {shrink}"
        )));
    }
    if shrink == 1 {
        return Ok(stack.clone());
    }
    let (sw, sh) = (w / shrink, h / shrink);
    let inv = 1.0 / (shrink * shrink) as f32;
    let mut data = vec![0.0f32; stack.channels() * sw * sh];
    for c in 0..stack.channels() {
        let src = stack.plane(c);
        let dst = &mut data[c * sw * sh..(c + 1) * sw * sh];
        for y in 0..h {
            let drow = &mut dst[(y / shrink) * sw..(y / shrink + 1) * sw];
            for (x, v) in src[y * w..(y + 1) * w].iter().enumerate() {
                drow[x / shrink] += v;
            }
        }
        for v in dst.iter_mut() {
            *v *= inv;
        }
    }
    Ok(ChannelStack::from_parts(stack.layer(), stack.channels(), sw, sh, data))
}

pub fn validate_shrink(shrink: usize) -> Result<()> {
    if matches!(shrink, 1 | 2 | 4) {
        Ok(())
    } else {
        Err(McfError::Config(format!("shrink must be 1, 2 or 4, got {shrink}")))
    }
}

/// Full first-layer stack: `[L, U, V, |∇|, O1..O6]`, block-averaged by
/// `shrink` and smoothed. Trailing rows and columns that do not fill a whole
/// shrink block are cropped away.
pub fn compute_l1(image: &ImageBuffer, shrink: usize) -> Result<ChannelStack> {
    validate_shrink(shrink)?;
    let (w, h) = (
        image.width() / shrink * shrink,
        image.height() / shrink * shrink,
    );
    if w == 0 || h == 0 {
        return Err(McfError::InvalidInput(format!(
            "{}x{} image is smaller than one shrink block",
            image.width(),
            image.height()
        )));
    }
    let cropped;
    let image = if w != image.width() || h != image.height() {
        cropped = image.crop(0, 0, w, h)?;
        &cropped
    } else {
        image
    };
    let full = rgb_to_luv(image)?.concat(gradient_channels(image)?)?;
    let mut shrunk = block_average(&full, shrink)?;
    let (sw, sh) = (shrunk.width(), shrunk.height());
    for c in 0..shrunk.channels() {
        let smoothed = triangle_filter_plane(shrunk.plane(c), sw, sh, 1);
        shrunk.plane_mut(c).copy_from_slice(&smoothed);
    }
    Ok(shrunk)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PyramidSpec {
    pub scales_per_octave: usize,
    /// Model window as `(height, width)` pixels.
    pub min_window: (usize, usize),
    pub shrink: usize,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec {
            scales_per_octave: 4,
            min_window: (MODEL_HEIGHT, MODEL_WIDTH),
            shrink: 4,
        }
    }
}

impl PyramidSpec {
    pub fn validate(&self) -> Result<()> {
        validate_shrink(self.shrink)?;
        if self.scales_per_octave == 0 {
            return Err(McfError::Config("scales_per_octave must be at least 1".into()));
        }
        let (wh, ww) = self.min_window;
        if wh == 0 || ww == 0 || wh % self.shrink != 0 || ww % self.shrink != 0 {
            return Err(McfError::Config(format!(
                "model window {wh}x{ww} must be a positive multiple of shrink {}",
                self.shrink
            )));
        }
        Ok(())
    }

    /// Strictly decreasing scale factors from 1.0 down to the scale at which
    /// the image just contains the model window.
    pub fn scales(&self, width: usize, height: usize) -> Vec<f64> {
        let (wh, ww) = self.min_window;
        let fits = |s: f64| {
            let (lw, lh) = level_dims(width, height, s);
            lw >= ww && lh >= wh
        };
        let mut scales = Vec::new();
        let mut k = 0;
        loop {
            let s = 2f64.powf(-(k as f64) / self.scales_per_octave as f64);
            if !fits(s) {
                break;
            }
            scales.push(s);
            k += 1;
        }
        if let Some(&last) = scales.last() {
            let terminal = (wh as f64 / height as f64).max(ww as f64 / width as f64);
            if last > terminal + 1e-9 && fits(terminal) {
                scales.push(terminal);
            }
        }
        scales
    }
}

fn level_dims(width: usize, height: usize, scale: f64) -> (usize, usize) {
    (
        (width as f64 * scale).round() as usize,
        (height as f64 * scale).round() as usize,
    )
}

/// One pyramid level: the resampled image and its first-layer channels.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub scale: f64,
    /// Actual per-axis ratios `level / original` after rounding the level size.
    pub scale_x: f64,
    pub scale_y: f64,
    pub image: ImageBuffer,
    pub channels: ChannelStack,
}

pub fn build_pyramid(image: &ImageBuffer, spec: &PyramidSpec) -> Result<Vec<PyramidLevel>> {
    spec.validate()?;
    image.validate()?;
    let (w, h) = (image.width(), image.height());
    spec.scales(w, h)
        .into_par_iter()
        .map(|scale| {
            let (lw, lh) = level_dims(w, h, scale);
            let level_image = if (lw, lh) == (w, h) {
                image.clone()
            } else {
                image.resize(lw, lh)?
            };
            let channels = compute_l1(&level_image, spec.shrink)?;
            Ok(PyramidLevel {
                scale,
                scale_x: lw as f64 / w as f64,
                scale_y: lh as f64 / h as f64,
                image: level_image,
                channels,
            })
        })
        .collect()
}
