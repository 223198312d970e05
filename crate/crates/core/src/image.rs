//! Planar RGB image buffer with the resampling helpers the pipeline needs.

use std::path::Path;

use crate::error::{McfError, Result};

/// Three-plane RGB image with values in `[0, 1]`, stored plane-major and
/// row-major within each plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(McfError::InvalidInput(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != 3 * width * height {
            return Err(McfError::InvalidInput(format!(
                "expected {} samples for a {width}x{height} RGB image, got {}",
                3 * width * height,
                data.len()
            )));
        }
        let image = ImageBuffer {
            width,
            height,
            data,
        };
        image.validate()?;
        Ok(image)
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        let plane = width * height;
        let mut data = Vec::with_capacity(3 * plane);
        for value in rgb {
            data.extend(std::iter::repeat(value).take(plane));
        }
        ImageBuffer::new(width, height, data)
    }

    /// Builds an image from a per-pixel closure returning `[r, g, b]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                for c in 0..3 {
                    data[c * plane + y * width + x] = px[c];
                }
            }
        }
        ImageBuffer::new(width, height, data)
    }

    /// Checks the value-range invariant: every sample finite and in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if let Some((i, v)) = self
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            let plane = self.width * self.height;
            let (c, p) = (i / plane, i % plane);
            return Err(McfError::InvalidInput(format!(
                "pixel ({}, {}) plane {c} has value {v} outside [0, 1]",
                p % self.width,
                p / self.width
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[c * self.width * self.height + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, value: f32) {
        let idx = c * self.width * self.height + y * self.width + x;
        self.data[idx] = value;
    }

    /// Decodes a PNG or binary PPM file into `[0, 1]` by dividing by 255.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::open(path)
            .map_err(|e| McfError::Load {
                what: path.display().to_string(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        ImageBuffer::from_fn(w, h, |x, y| {
            let p = decoded.get_pixel(x as u32, y as u32).0;
            [
                p[0] as f32 / 255.0,
                p[1] as f32 / 255.0,
                p[2] as f32 / 255.0,
            ]
        })
    }

    /// Quantizes to 8 bits and writes the image; the format follows the file
    /// extension (`.png`, `.ppm`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            for c in 0..3 {
                px.0[c] = (self.get(c, x as usize, y as usize) * 255.0).round() as u8;
            }
        }
        out.save(path)?;
        Ok(())
    }

    /// Integer-aligned crop. The region must lie inside the image.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(McfError::InvalidInput(format!(
                "crop ({x}, {y}, {w}, {h}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            let plane = self.plane(c);
            for row in y..y + h {
                data.extend_from_slice(&plane[row * self.width + x..row * self.width + x + w]);
            }
        }
        Ok(ImageBuffer {
            width: w,
            height: h,
            data,
        })
    }

    /// Bilinear resize of the whole image.
    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        self.resample_region(
            0.0,
            0.0,
            self.width as f64,
            self.height as f64,
            width,
            height,
        )
    }

    /// Bilinear resample of an arbitrary (possibly out-of-bounds) region onto a
    /// `width x height` grid. Source coordinates are clamped to the image, so
    /// regions hanging over the border replicate edge pixels.
    pub fn resample_region(
        &self,
        x0: f64,
        y0: f64,
        region_w: f64,
        region_h: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 || region_w <= 0.0 || region_h <= 0.0 {
            return Err(McfError::InvalidInput(format!(
                "cannot resample region {region_w}x{region_h} to {width}x{height}"
            )));
        }
        let sx = region_w / width as f64;
        let sy = region_h / height as f64;
        let xs: Vec<(usize, usize, f32)> = (0..width)
            .map(|j| taps(x0 + (j as f64 + 0.5) * sx - 0.5, self.width))
            .collect();
        let ys: Vec<(usize, usize, f32)> = (0..height)
            .map(|i| taps(y0 + (i as f64 + 0.5) * sy - 0.5, self.height))
            .collect();
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            let plane = self.plane(c);
            for &(y_lo, y_hi, fy) in &ys {
                let row_lo = &plane[y_lo * self.width..(y_lo + 1) * self.width];
                let row_hi = &plane[y_hi * self.width..(y_hi + 1) * self.width];
                for &(x_lo, x_hi, fx) in &xs {
                    let top = row_lo[x_lo] + (row_lo[x_hi] - row_lo[x_lo]) * fx;
                    let bottom = row_hi[x_lo] + (row_hi[x_hi] - row_hi[x_lo]) * fx;
                    // Clamp guards against rounding slightly outside [0, 1].
                    data.push((top + (bottom - top) * fy).clamp(0.0, 1.0));
                }
            }
        }
        Ok(ImageBuffer {
            width,
            height,
            data,
        })
    }

    pub fn mirror_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..3 {
            let plane = self.plane(c);
            for row in plane.chunks_exact(self.width) {
                data.extend(row.iter().rev());
            }
        }
        ImageBuffer {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

fn taps(pos: f64, len: usize) -> (usize, usize, f32) {
    let max = (len - 1) as f64;
    let p = pos.clamp(0.0, max);
    let lo = p.floor();
    let hi = (lo + 1.0).min(max);
    (lo as usize, hi as usize, (p - lo) as f32)
}
