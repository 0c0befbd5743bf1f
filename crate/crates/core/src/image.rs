//! 8-bit RGB images and bilinear resampling.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Interleaved RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(invalid("rgb buffer length does not match dimensions"));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// `[3, H, W]` float tensor on the 0..255 scale.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut out = vec![0.0f32; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c] as f32;
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], out).expect("sized above")
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || self.width == 0 || self.height == 0 {
            return Err(invalid("resize: zero-sized image"));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let taps = |out: usize, src: usize| -> Vec<(usize, usize, f32)> {
            let s = src as f32 / out as f32;
            (0..out)
                .map(|o| {
                    let x = ((o as f32 + 0.5) * s - 0.5).max(0.0);
                    let lo = (x as usize).min(src - 1);
                    let hi = (lo + 1).min(src - 1);
                    (lo, hi, x - lo as f32)
                })
                .collect()
        };
        let tx = taps(width, self.width);
        let ty = taps(height, self.height);
        let mut out = Self::new(width, height);
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
                let mut px = [0u8; 3];
                for k in 0..3 {
                    let top = a[k] as f32 * (1.0 - fx) + b[k] as f32 * fx;
                    let bot = c[k] as f32 * (1.0 - fx) + d[k] as f32 * fx;
                    px[k] = libm::roundf(top * (1.0 - fy) + bot * fy).clamp(0.0, 255.0) as u8;
                }
                out.put(x, y, px);
            }
        }
        Ok(out)
    }
}
