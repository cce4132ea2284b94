//! RGB images in `[0, 1]` and their patch decomposition.

use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Row-major `height × width × 3` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl SyntheticImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * CHANNELS {
            return Err(Error::invalid(format!(
                "{} pixel values for a {height}×{width}×{CHANNELS} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    pub fn patch_count(&self, patch: usize) -> usize {
        (self.height / patch) * (self.width / patch)
    }

    /// Non-overlapping `patch × patch` tiles in raster order, each flattened
    /// as `(dy, dx, channel)`. Returns `n_patches × patch²·3` values.
    pub fn patchify(&self, patch: usize) -> Result<Vec<f32>> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::invalid(format!(
                "patch size {patch} does not tile a {}×{} image",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(self.pixels.len());
        for py in 0..self.height / patch {
            for px in 0..self.width / patch {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = (y * self.width + px * patch) * CHANNELS;
                    out.extend_from_slice(&self.pixels[start..start + patch * CHANNELS]);
                }
            }
        }
        Ok(out)
    }

    /// `u32` height, `u32` width, then `f32` pixels, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.pixels.len() * 4);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::invalid("pixel file shorter than its header"));
        }
        let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != h * w * CHANNELS * 4 {
            return Err(Error::invalid(format!(
                "pixel file holds {} bytes for a {h}×{w} image",
                body.len()
            )));
        }
        let pixels = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(h, w, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io_util::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
