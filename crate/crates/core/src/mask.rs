//! Residual reverberation mask.
//!
//! The mask estimates the fraction of each bin's magnitude that is
//! reverberation: `M = clip(max(R - C, 0) / (R + eps), 0, 1)` for reverberant
//! magnitude `R` and clean magnitude `C`. Applying it subtracts `M * R` from
//! the reverberant magnitude and keeps the reverberant phase.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;
use crate::{Error, Result};

/// Real `F x T` matrix with every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeMask {
    values: Array2<f64>,
}

impl MagnitudeMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn constant(dim: (usize, usize), value: f64) -> Result<Self> {
        Self::new(Array2::from_elem(dim, value))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub epsilon: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { epsilon: 1e-8 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "mask epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Ground-truth residual mask from reverberant and clean magnitudes.
pub fn oracle_mask(reverb_mag: &Array2<f64>, clean_mag: &Array2<f64>, cfg: &MaskConfig) -> Result<MagnitudeMask> {
    if reverb_mag.dim() != clean_mag.dim() {
        return Err(Error::invalid(format!(
            "reverberant magnitude {:?} and clean magnitude {:?} differ in shape",
            reverb_mag.dim(),
            clean_mag.dim()
        )));
    }
    let bad = |m: &Array2<f64>| m.iter().any(|v| !(v.is_finite() && *v >= 0.0));
    if bad(reverb_mag) || bad(clean_mag) {
        return Err(Error::invalid("magnitudes must be finite and non-negative"));
    }
    let values = ndarray::Zip::from(reverb_mag)
        .and(clean_mag)
        .map_collect(|&r, &c| ((r - c).max(0.0) / (r + cfg.epsilon)).clamp(0.0, 1.0));
    Ok(MagnitudeMask { values })
}

/// Removes `mask * |R|` from every bin, leaving the phase untouched.
pub fn apply_mask(reverb_spec: &Spectrogram, mask: &MagnitudeMask) -> Result<Spectrogram> {
    if reverb_spec.dim() != mask.dim() {
        return Err(Error::invalid(format!(
            "spectrogram {:?} and mask {:?} differ in shape",
            reverb_spec.dim(),
            mask.dim()
        )));
    }
    // Scaling the complex bin by a non-negative real keeps its argument.
    let bins = ndarray::Zip::from(reverb_spec.bins())
        .and(&mask.values)
        .map_collect(|&c, &m| c * (1.0 - m));
    Ok(reverb_spec.with_bins(bins))
}
