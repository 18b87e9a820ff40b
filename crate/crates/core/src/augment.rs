//! Time and frequency band masking of feature matrices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentConfig {
    pub enabled: bool,
    pub num_time_masks: usize,
    pub max_time_mask_width: usize,
    pub num_freq_masks: usize,
    pub max_freq_mask_width: usize,
    pub mask_value: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            num_time_masks: 2,
            max_time_mask_width: 15,
            num_freq_masks: 2,
            max_freq_mask_width: 8,
            mask_value: 0.0,
        }
    }
}

/// One masked band: `axis` 0 is time, 1 is frequency.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Band {
    pub axis: usize,
    pub start: usize,
    pub width: usize,
}

/// Draws the bands for a `[T, F]` input. Widths are uniform on
/// `[0, max_width]`, clamped to the axis size.
pub fn draw_bands(t: usize, f: usize, cfg: &SpecAugmentConfig, rng: &mut impl Rng) -> Vec<Band> {
    let mut bands = Vec::new();
    for (axis, size, count, max_w) in [
        (0, t, cfg.num_time_masks, cfg.max_time_mask_width),
        (1, f, cfg.num_freq_masks, cfg.max_freq_mask_width),
    ] {
        let max_w = max_w.min(size);
        for _ in 0..count {
            let width = rng.random_range(0..=max_w);
            let start = rng.random_range(0..=size - width);
            bands.push(Band { axis, start, width });
        }
    }
    bands
}

/// Returns a masked copy of `features` (`[T, F]`); the input is untouched.
pub fn spec_augment(features: &Tensor<f64>, cfg: &SpecAugmentConfig, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    if features.rank() != 2 {
        return Err(Error::Shape {
            op: "spec_augment",
            detail: format!("expected [T, F], got {:?}", features.shape()),
        });
    }
    let mut out = features.clone();
    if !cfg.enabled {
        return Ok(out);
    }
    let (t, f) = (features.dim(0), features.dim(1));
    let data = out.data_mut();
    for band in draw_bands(t, f, cfg, rng) {
        for i in band.start..band.start + band.width {
            if band.axis == 0 {
                data[i * f..(i + 1) * f].iter_mut().for_each(|x| *x = cfg.mask_value);
            } else {
                (0..t).for_each(|r| data[r * f + i] = cfg.mask_value);
            }
        }
    }
    Ok(out)
}
