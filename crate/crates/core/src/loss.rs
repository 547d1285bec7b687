//! Hybrid training objective.
//!
//! `total = bce_weight * BCE(M, M') + mag_weight * mean(w(f) (M (1 - M'))^2)
//!        + lambda(epoch) * MSE(istft(R (1 - M')), clean)`
//!
//! with target mask `M`, predicted mask `M'` and a Gaussian frequency
//! emphasis `w(f) = 1 + gain * exp(-(f - center)^2 / (2 sigma^2))`. The
//! time-domain weight ramps linearly from 0 to `td_max`.

use serde::{Deserialize, Serialize};

use crate::dsp::{istft, AudioBuffer, Spectrogram};
use crate::mask::{apply_mask, MagnitudeMask};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Hz.
    pub gauss_center: f64,
    /// Hz.
    pub gauss_sigma: f64,
    pub gauss_gain: f64,
    pub bce_weight: f64,
    pub mag_weight: f64,
    /// Time-domain weight reached at `td_ramp_epochs`.
    pub td_max: f64,
    /// Epoch at which the time-domain weight reaches `td_max`.
    pub td_ramp_epochs: usize,
    pub clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gauss_center: 2000.0,
            gauss_sigma: 500.0,
            gauss_gain: 1.0,
            bce_weight: 1.0,
            mag_weight: 1.0,
            td_max: 1.0,
            td_ramp_epochs: 124,
            clamp_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.gauss_gain, self.bce_weight, self.mag_weight, self.td_max];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.gauss_sigma > 0.0 && self.gauss_sigma.is_finite()) || !self.gauss_center.is_finite() {
            return Err(Error::Config("gauss_sigma must be positive".into()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config("clamp_eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }

    /// Time-domain weight for `epoch`; non-decreasing in `epoch`.
    pub fn td_weight(&self, epoch: usize) -> f64 {
        if self.td_ramp_epochs == 0 {
            return self.td_max;
        }
        self.td_max * (epoch.min(self.td_ramp_epochs) as f64 / self.td_ramp_epochs as f64)
    }

    /// Gaussian emphasis for each bin frequency.
    pub fn frequency_weights(&self, freqs: &[f64]) -> Vec<f64> {
        freqs
            .iter()
            .map(|f| {
                let z = (f - self.gauss_center) / self.gauss_sigma;
                1.0 + self.gauss_gain * (-0.5 * z * z).exp()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub bce: f64,
    pub weighted_mag: f64,
    pub time_domain: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    /// One JSON object per line.
    pub fn to_log_line(&self) -> String {
        serde_json::to_string(self).expect("report is plain data")
    }
}

fn same_shape(a: &MagnitudeMask, b: &MagnitudeMask) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "masks differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy with predictions clamped to
/// `[clamp_eps, 1 - clamp_eps]`.
pub fn bce_loss(target: &MagnitudeMask, predicted: &MagnitudeMask, clamp_eps: f64) -> Result<f64> {
    same_shape(target, predicted)?;
    let n = target.values().len() as f64;
    let sum: f64 = target
        .values()
        .iter()
        .zip(predicted.values())
        .map(|(&m, &p)| {
            let p = p.clamp(clamp_eps, 1.0 - clamp_eps);
            -(m * p.ln() + (1.0 - m) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / n)
}

/// Frequency-weighted residual magnitude loss; `freqs` gives the Hz of each
/// mask row.
pub fn weighted_mag_loss(
    target: &MagnitudeMask,
    predicted: &MagnitudeMask,
    cfg: &LossConfig,
    freqs: &[f64],
) -> Result<f64> {
    same_shape(target, predicted)?;
    let (nf, nt) = target.dim();
    if freqs.len() != nf {
        return Err(Error::invalid(format!(
            "{} frequencies for {nf} mask rows",
            freqs.len()
        )));
    }
    let w = cfg.frequency_weights(freqs);
    let mut sum = 0.0;
    for (((f, _), _), (&m, &p)) in target
        .values()
        .indexed_iter()
        .zip(target.values().iter().zip(predicted.values()))
    {
        let r = m * (1.0 - p);
        sum += w[f] * r * r;
    }
    Ok(sum / (nf * nt) as f64)
}

/// Brings `clean` to the ISTFT output length. Up to `hop - 1` trailing
/// samples may be dropped by the framing; anything else is a mismatch.
pub(crate) fn align_clean(clean: &AudioBuffer, len: usize, hop: usize) -> Result<AudioBuffer> {
    if clean.len() < len || clean.len() >= len + hop.max(1) {
        return Err(Error::invalid(format!(
            "clean audio has {} samples, ISTFT output has {len}",
            clean.len()
        )));
    }
    Ok(clean.resized(len))
}

/// Mean squared sample error between the resynthesized masked spectrogram
/// and the clean audio.
pub fn time_domain_loss(
    reverb_spec: &Spectrogram,
    predicted_mask: &MagnitudeMask,
    clean_audio: &AudioBuffer,
) -> Result<f64> {
    let y = istft(&apply_mask(reverb_spec, predicted_mask)?)?;
    let clean = align_clean(clean_audio, y.len(), reverb_spec.config().hop())?;
    if y.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = y
        .samples()
        .iter()
        .zip(clean.samples())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / y.len() as f64)
}

pub fn hybrid_loss(
    target: &MagnitudeMask,
    predicted: &MagnitudeMask,
    reverb_spec: &Spectrogram,
    clean_audio: &AudioBuffer,
    cfg: &LossConfig,
    epoch: usize,
) -> Result<LossReport> {
    let freqs = reverb_spec.config().bin_frequencies(reverb_spec.sample_rate());
    let bce = bce_loss(target, predicted, cfg.clamp_eps)?;
    let weighted_mag = weighted_mag_loss(target, predicted, cfg, &freqs)?;
    let lambda = cfg.td_weight(epoch);
    let time_domain = time_domain_loss(reverb_spec, predicted, clean_audio)?;
    Ok(LossReport {
        epoch,
        bce,
        weighted_mag,
        time_domain,
        lambda,
        total: cfg.bce_weight * bce + cfg.mag_weight * weighted_mag + lambda * time_domain,
    })
}
