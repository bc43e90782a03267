//! Geometric augmentation applied identically to an image and its labels.
//!
//! Order: optional reflection pad, random crop, horizontal flip, 90° rotation.
//! Labels are only ever indexed, never interpolated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabelMap, Sample};
use crate::error::{config_err, Result};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Crop `(height, width)`; `None` keeps the full image.
    pub crop: Option<(usize, usize)>,
    /// Pad by `max(crop)/8` pixels per side before cropping (reflection for
    /// the image, edge replication for labels).
    pub pad_before_crop: bool,
    pub hflip: bool,
    /// Random multiple of 90°; non-square crops only use 0° and 180° so batch
    /// shapes stay fixed.
    pub rot90: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: Some((64, 64)),
            pad_before_crop: false,
            hflip: true,
            rot90: true,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            crop: None,
            pad_before_crop: false,
            hflip: false,
            rot90: false,
            seed: 0,
        }
    }

    pub fn pad_amount(&self) -> usize {
        match (self.pad_before_crop, self.crop) {
            (true, Some((h, w))) => h.max(w) / 8,
            _ => 0,
        }
    }
}

/// Seed for one sample in one epoch, mixing all three inputs (SplitMix64 finalizer).
pub fn sample_seed(base: u64, index: u64, epoch: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(epoch.wrapping_mul(0x94D0_49BB_1331_11EB))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Planar image (`C` planes of `H·W`) with a matching label plane.
struct Planes {
    channels: usize,
    h: usize,
    w: usize,
    img: Vec<f64>,
    lbl: Vec<u8>,
}

impl Planes {
    /// Rebuilds every plane from a source-coordinate map `(y, x) -> (sy, sx)`.
    fn remap(&self, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut img = vec![0.0; self.channels * h * w];
        let mut lbl = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                lbl[y * w + x] = self.lbl[sy * self.w + sx];
                for c in 0..self.channels {
                    img[(c * h + y) * w + x] = self.img[(c * self.h + sy) * self.w + sx];
                }
            }
        }
        Self { channels: self.channels, h, w, img, lbl }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period.max(1));
    if m >= n {
        m = period - m;
    }
    m as usize
}

pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    let [_, channels, h, w] = sample.image.tensor().dims4()?;
    let mut p = Planes {
        channels,
        h,
        w,
        img: sample.image.tensor().data().to_vec(),
        lbl: sample.label.data.clone(),
    };

    let pad = cfg.pad_amount();
    if pad > 0 {
        if pad >= h || pad >= w {
            return Err(config_err(format!("padding {pad} too large for a {h}x{w} image")));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut padded = p.remap(ph, pw, |y, x| {
            (reflect(y as isize - pad as isize, h), reflect(x as isize - pad as isize, w))
        });
        // labels replicate the nearest edge instead of reflecting
        for y in 0..ph {
            for x in 0..pw {
                let sy = (y as isize - pad as isize).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize - pad as isize).clamp(0, w as isize - 1) as usize;
                padded.lbl[y * pw + x] = p.lbl[sy * w + sx];
            }
        }
        p = padded;
    }

    if let Some((ch, cw)) = cfg.crop {
        if ch == 0 || cw == 0 || ch > p.h || cw > p.w {
            return Err(config_err(format!(
                "crop {ch}x{cw} does not fit the {}x{} (padded) image",
                p.h, p.w
            )));
        }
        let oy = rng.gen_range(0..=p.h - ch);
        let ox = rng.gen_range(0..=p.w - cw);
        if (ch, cw) != (p.h, p.w) {
            p = p.remap(ch, cw, |y, x| (y + oy, x + ox));
        }
    }

    if cfg.hflip && rng.gen_bool(0.5) {
        let w = p.w;
        p = p.remap(p.h, p.w, |y, x| (y, w - 1 - x));
    }

    if cfg.rot90 {
        let k = if p.h == p.w { rng.gen_range(0..4) } else { 2 * rng.gen_range(0..2) };
        let (h, w) = (p.h, p.w);
        p = match k {
            // counter-clockwise quarter turns
            1 => p.remap(w, h, |y, x| (x, w - 1 - y)),
            2 => p.remap(h, w, |y, x| (h - 1 - y, w - 1 - x)),
            3 => p.remap(w, h, |y, x| (h - 1 - x, y)),
            _ => p,
        };
    }

    let image = FeatureMap::new(Tensor::new(vec![1, channels, p.h, p.w], p.img)?)?;
    Sample::new(image, LabelMap::new(p.h, p.w, p.lbl)?)
}
