//! Raster images, crop/resize preprocessing and patch quantization.

use crate::error::{Error, Result};

use super::location::BoundingBox;

/// Side of the preprocessing canvas.
pub const CANVAS_SIDE: usize = 256;
/// Side of the central region whose codes are the masked-image target.
pub const CENTER_SIDE: usize = 128;

/// Row-major 8-bit raster with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRaster {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl ImageRaster {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage("image is empty".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Copies the window `[y0, y0+h) x [x0, x0+w)`.
    pub fn window(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::InvalidImage(format!(
                "window {h}x{w} at ({y0},{x0}) does not fit {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut pixels = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            pixels.extend_from_slice(&self.pixels[start..start + w * c]);
        }
        Self::new(h, w, c, pixels)
    }

    /// Crops to a normalized box; pixel edges are the rounded scaled coordinates.
    pub fn crop(&self, b: &BoundingBox) -> Result<Self> {
        b.validate()?;
        let x0 = (b.x1 * self.width as f64).round() as usize;
        let x1 = (b.x2 * self.width as f64).round() as usize;
        let y0 = (b.y1 * self.height as f64).round() as usize;
        let y1 = (b.y2 * self.height as f64).round() as usize;
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::InvalidBox(format!("crop box {:?} has zero area", b.coords())));
        }
        self.window(y0, x0, y1 - y0, x1 - x0)
    }

    /// Bilinear resize with half-pixel centers; same-size resize is the identity.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidImage("resize target is empty".into()));
        }
        if out_h == self.height && out_w == self.width {
            return Ok(self.clone());
        }
        let c = self.channels;
        let ys = axis_taps(self.height, out_h);
        let xs = axis_taps(self.width, out_w);
        let mut pixels = vec![0u8; out_h * out_w * c];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                for ch in 0..c {
                    let p00 = self.get(y0, x0, ch) as f64;
                    let p01 = self.get(y0, x1, ch) as f64;
                    let p10 = self.get(y1, x0, ch) as f64;
                    let p11 = self.get(y1, x1, ch) as f64;
                    let top = p00 + (p01 - p00) * fx;
                    let bottom = p10 + (p11 - p10) * fx;
                    let v = top + (bottom - top) * fy;
                    pixels[(oy * out_w + ox) * c + ch] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Self::new(out_h, out_w, c, pixels)
    }

    /// Mean over every pixel and channel.
    pub fn mean_intensity(&self) -> f64 {
        let sum: u64 = self.pixels.iter().map(|&p| p as u64).sum();
        sum as f64 / self.pixels.len() as f64
    }

    /// Splits into non-overlapping square patches in raster order.
    pub fn patches(&self, patch_size: usize) -> Result<Vec<ImageRaster>> {
        if patch_size == 0 || !self.height.is_multiple_of(patch_size) || !self.width.is_multiple_of(patch_size) {
            return Err(Error::InvalidImage(format!(
                "{}x{} is not divisible into {patch_size}-pixel patches",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity((self.height / patch_size) * (self.width / patch_size));
        for py in 0..self.height / patch_size {
            for px in 0..self.width / patch_size {
                out.push(self.window(py * patch_size, px * patch_size, patch_size, patch_size)?);
            }
        }
        Ok(out)
    }
}

/// Source index pair and interpolation weight per output coordinate.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Optionally crops to the object box, resizes to the 256x256 canvas and
/// extracts the central 128x128 window.
pub fn preprocess_image(
    image: &ImageRaster,
    object_box: Option<&BoundingBox>,
) -> Result<(ImageRaster, ImageRaster)> {
    let cropped = match object_box {
        Some(b) => image.crop(b)?,
        None => image.clone(),
    };
    let canvas = cropped.resize_bilinear(CANVAS_SIDE, CANVAS_SIDE)?;
    let off = (CANVAS_SIDE - CENTER_SIDE) / 2;
    let center = canvas.window(off, off, CENTER_SIDE, CENTER_SIDE)?;
    Ok((canvas, center))
}

/// Maps one image patch to a code index in `[0, size())`.
pub trait VisualCodebook {
    fn size(&self) -> usize;
    fn code(&self, patch: &ImageRaster) -> usize;
}

/// Deterministic stand-in for a learned quantizer: bins the mean patch intensity.
#[derive(Debug, Clone, Copy)]
pub struct MeanIntensityCodebook {
    size: usize,
}

impl MeanIntensityCodebook {
    pub fn new(size: usize) -> Self {
        Self { size }
    }
}

impl VisualCodebook for MeanIntensityCodebook {
    fn size(&self) -> usize {
        self.size
    }

    fn code(&self, patch: &ImageRaster) -> usize {
        let code = (patch.mean_intensity() / 256.0 * self.size as f64).floor() as usize;
        code.min(self.size.saturating_sub(1))
    }
}
