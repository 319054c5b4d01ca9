//! Random flips, rotations and crops for training batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    /// Angles are drawn uniformly from `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    /// Zero padding added on every side before a random crop back to size.
    pub crop_padding: usize,
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            hflip_prob: 0.0,
            max_rotation_deg: 0.0,
            crop_padding: 0,
        }
    }

    /// Rotations and crops without flips, which would change a digit's meaning.
    pub fn digits() -> Self {
        Self {
            hflip_prob: 0.0,
            max_rotation_deg: 15.0,
            crop_padding: 4,
        }
    }

    pub fn natural_images() -> Self {
        Self {
            hflip_prob: 0.5,
            ..Self::digits()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.hflip_prob == 0.0 && self.max_rotation_deg == 0.0 && self.crop_padding == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return Err(Error::Config(format!(
                "max_rotation_deg {} must be >= 0",
                self.max_rotation_deg
            )));
        }
        Ok(())
    }
}

/// Augments every image of an `[n, c, h, w]` batch independently.
pub fn augment(batch: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor<f32>> {
    cfg.validate()?;
    if batch.rank() != 4 {
        return Err(Error::InvalidArgument(format!(
            "augment expects [n, c, h, w], got {:?}",
            batch.shape()
        )));
    }
    if cfg.is_identity() {
        return Ok(batch.clone());
    }
    let (c, h, w) = (batch.dim(1), batch.dim(2), batch.dim(3));
    let size = c * h * w;
    let mut out = batch.data().to_vec();
    for img in out.chunks_mut(size) {
        if cfg.hflip_prob > 0.0 && rng.unit() < cfg.hflip_prob {
            hflip(img, c, h, w);
        }
        if cfg.max_rotation_deg > 0.0 {
            let deg = (2.0 * rng.unit() - 1.0) * cfg.max_rotation_deg;
            rotate(img, c, h, w, deg);
        }
        if cfg.crop_padding > 0 {
            let span = 2 * cfg.crop_padding + 1;
            let (dy, dx) = (rng.below(span), rng.below(span));
            shift(
                img,
                c,
                h,
                w,
                dy as isize - cfg.crop_padding as isize,
                dx as isize - cfg.crop_padding as isize,
            );
        }
    }
    Tensor::new(batch.shape().to_vec(), out)
}

pub fn hflip(img: &mut [f32], c: usize, h: usize, w: usize) {
    for row in img[..c * h * w].chunks_mut(w) {
        row.reverse();
    }
}

/// Rotates counter-clockwise about the image centre with bilinear sampling and zero fill.
pub fn rotate(img: &mut [f32], c: usize, h: usize, w: usize, degrees: f64) {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = img.to_vec();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let sample = |y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                plane[y as usize * w + x as usize] as f64
            }
        };
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let sy = cos * dy + sin * dx + cy;
                let sx = cos * dx - sin * dy + cx;
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let v = (1.0 - fy) * ((1.0 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1))
                    + fy * ((1.0 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
                img[ch * h * w + y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// Equivalent to zero padding followed by a crop whose origin is offset by `(dy, dx)`.
fn shift(img: &mut [f32], c: usize, h: usize, w: usize, dy: isize, dx: isize) {
    let src = img.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                img[(ch * h + y) * w + x] = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    0.0
                } else {
                    src[(ch * h + sy as usize) * w + sx as usize]
                };
            }
        }
    }
}
