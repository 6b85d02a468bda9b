//! Dense 2D image-plane containers: RGB images, scalar maps, flow maps, masks.
//!
//! All maps are row-major, top-left origin, pixel (x, y) at index `y * width + x`.
//! Values are f64 in memory regardless of on-disk precision.

use crate::error::Error;
use crate::Result;

/// RGB image with channels in [0, 1], 3 floats per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        ImageRgb {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Mean over RGB at an integer pixel.
    #[inline]
    pub fn luma(&self, x: usize, y: usize) -> f64 {
        let p = self.pixel(x, y);
        (p[0] + p[1] + p[2]) / 3.0
    }

    /// Bilinear sample of one channel at a continuous position, plus the
    /// spatial derivative of that sample. Positions are in pixel-center
    /// coordinates; the valid domain is [0, w-1] x [0, h-1].
    ///
    /// Returns `None` if the 2x2 footprint leaves the image.
    pub fn sample_bilinear(&self, x: f64, y: f64, channel: usize) -> Option<(f64, [f64; 2])> {
        if self.width < 2 || self.height < 2 {
            return None;
        }
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64)
        {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width - 2);
        let y0 = (y.floor() as usize).min(self.height - 2);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let at = |px: usize, py: usize| self.data[(py * self.width + px) * 3 + channel];
        let (v00, v10) = (at(x0, y0), at(x0 + 1, y0));
        let (v01, v11) = (at(x0, y0 + 1), at(x0 + 1, y0 + 1));
        let v = v00 * (1.0 - fx) * (1.0 - fy)
            + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v11 * fx * fy;
        let dx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
        let dy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx;
        Some((v, [dx, dy]))
    }
}

/// Single-channel float map (depth, weight sums, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize) -> Self {
        ScalarMap {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

/// Two-channel float map (optical flow in pixels, or projected grid flow).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FlowMap {
    pub fn new(width: usize, height: usize) -> Self {
        FlowMap {
            width,
            height,
            data: vec![0.0; width * height * 2],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        let i = (y * self.width + x) * 2;
        [self.data[i], self.data[i + 1]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, f: [f64; 2]) {
        let i = (y * self.width + x) * 2;
        self.data[i] = f[0];
        self.data[i + 1] = f[1];
    }
}

/// Boolean pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl MaskMap {
    pub fn new(width: usize, height: usize) -> Self {
        MaskMap {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Checks two maps share a shape; used before pixelwise comparisons.
pub fn check_same_shape(
    name: &str,
    (w1, h1): (usize, usize),
    (w2, h2): (usize, usize),
) -> Result<()> {
    if (w1, h1) != (w2, h2) {
        return Err(Error::DimensionMismatch(format!(
            "{name}: {w1}x{h1} vs {w2}x{h2}"
        )));
    }
    Ok(())
}
