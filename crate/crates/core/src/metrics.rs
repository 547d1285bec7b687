//! Evaluation metrics: a modulation-energy reverberation measure (SRMR),
//! direct-to-reverberant ratio of impulse responses and spectral error.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dataset::RoomImpulseResponse;
use crate::dsp::{AudioBuffer, Spectrogram};
use crate::{Error, Result};

/// Shortest input accepted by [`srmr`], in seconds.
pub const SRMR_MIN_DURATION: f64 = 0.5;

/// Default half-width of the direct-path window for [`drr`].
pub const DRR_DIRECT_WINDOW_MS: f64 = 2.5;

/// Quality factor of the modulation band-pass filters.
const MODULATION_Q: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrmrConfig {
    pub acoustic_bands: usize,
    /// Lowest and highest acoustic band centres, Hz.
    pub band_low: f64,
    pub band_high: f64,
    pub modulation_bands: usize,
    /// Lowest and highest modulation band centres, Hz.
    pub modulation_low: f64,
    pub modulation_high: f64,
    /// Number of modulation bands counted as speech-like.
    pub low_modulation_bands: usize,
    /// Cutoff of the envelope smoother, Hz.
    pub envelope_lowpass: f64,
}

impl Default for SrmrConfig {
    fn default() -> Self {
        Self {
            acoustic_bands: 23,
            band_low: 125.0,
            band_high: 7500.0,
            modulation_bands: 8,
            modulation_low: 4.0,
            modulation_high: 128.0,
            low_modulation_bands: 4,
            envelope_lowpass: 128.0,
        }
    }
}

impl SrmrConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let in_range = |lo: f64, hi: f64| lo > 0.0 && lo <= hi && hi < nyquist;
        if self.acoustic_bands == 0 || !in_range(self.band_low, self.band_high) {
            return Err(Error::Config(format!(
                "acoustic bands must be non-empty and lie in (0, {nyquist}) Hz"
            )));
        }
        if self.modulation_bands < 2 || !in_range(self.modulation_low, self.modulation_high) {
            return Err(Error::Config(
                "need at least 2 modulation bands in a valid frequency range".into(),
            ));
        }
        if self.low_modulation_bands == 0 || self.low_modulation_bands >= self.modulation_bands {
            return Err(Error::Config(
                "low_modulation_bands must leave at least one band on each side".into(),
            ));
        }
        if !(self.envelope_lowpass > 0.0 && self.envelope_lowpass < nyquist) {
            return Err(Error::Config("envelope_lowpass must lie below Nyquist".into()));
        }
        Ok(())
    }
}

/// Centres spaced evenly on a log axis from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let ratio = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|i| lo * (ratio * i as f64).exp()).collect()
}

/// Equivalent rectangular bandwidth of the auditory filter at `freq` Hz.
fn erb(freq: f64) -> f64 {
    24.7 * (4.37 * freq / 1000.0 + 1.0)
}

/// Second-order IIR section in transposed direct form II.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn normalized(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Self {
            b: b.map(|v| v / a0),
            a: [a1 / a0, a2 / a0],
        }
    }

    /// Band-pass with unit gain at `freq`.
    fn band_pass(freq: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * freq / fs;
        let alpha = w0.sin() / (2.0 * q);
        Self::normalized([alpha, 0.0, -alpha], 1.0 + alpha, -2.0 * w0.cos(), 1.0 - alpha)
    }

    /// Butterworth low-pass.
    fn low_pass(freq: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * freq / fs;
        let alpha = w0.sin() / 2f64.sqrt();
        let c = w0.cos();
        Self::normalized(
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0],
            1.0 + alpha,
            -2.0 * c,
            1.0 - alpha,
        )
    }

    fn filter(&self, x: &[f64]) -> Vec<f64> {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let (mut s1, mut s2) = (0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = b0 * v + s1;
                s1 = b1 * v - a1 * y + s2;
                s2 = b2 * v - a2 * y;
                y
            })
            .collect()
    }
}

/// Ratio of low- to high-modulation-frequency envelope energy, summed over
/// an auditory filterbank. Reverberation fills in the envelope and lowers it.
pub fn srmr(audio: &AudioBuffer, cfg: &SrmrConfig) -> Result<f64> {
    cfg.validate(audio.sample_rate())?;
    if audio.duration() < SRMR_MIN_DURATION {
        return Err(Error::invalid(format!(
            "SRMR needs at least {SRMR_MIN_DURATION} s of audio, got {:.3} s",
            audio.duration()
        )));
    }
    let fs = audio.sample_rate() as f64;
    let smoother = Biquad::low_pass(cfg.envelope_lowpass, fs);
    let mod_filters: Vec<Biquad> = log_spaced(cfg.modulation_low, cfg.modulation_high, cfg.modulation_bands)
        .into_iter()
        .map(|f| Biquad::band_pass(f, MODULATION_Q, fs))
        .collect();

    let (mut low, mut high) = (0.0, 0.0);
    for fc in log_spaced(cfg.band_low, cfg.band_high, cfg.acoustic_bands) {
        let stage = Biquad::band_pass(fc, fc / erb(fc), fs);
        let band = stage.filter(&stage.filter(audio.samples()));
        let rectified: Vec<f64> = band.iter().map(|v| v.abs()).collect();
        let envelope = smoother.filter(&rectified);
        for (k, m) in mod_filters.iter().enumerate() {
            let energy: f64 = m.filter(&envelope).iter().map(|v| v * v).sum();
            if k < cfg.low_modulation_bands {
                low += energy;
            } else {
                high += energy;
            }
        }
    }
    if high.is_nan() || high <= 0.0 {
        return Err(Error::invalid("signal has no high-modulation energy (silent input?)"));
    }
    Ok(low / high)
}

/// Direct-to-reverberant ratio in dB: energy within `direct_window_ms` of
/// the direct-path peak over the energy of every later sample. Returns
/// `f64::INFINITY` when nothing follows the direct window.
pub fn drr(rir: &RoomImpulseResponse, direct_window_ms: f64) -> Result<f64> {
    if !(direct_window_ms >= 0.0 && direct_window_ms.is_finite()) {
        return Err(Error::invalid("direct window must be a non-negative duration"));
    }
    let x = rir.samples();
    let peak = rir.direct_path_index();
    let half = (direct_window_ms * rir.sample_rate() as f64 / 1000.0).round() as usize;
    let end = (peak + half + 1).min(x.len());
    let direct: f64 = x[peak.saturating_sub(half)..end].iter().map(|v| v * v).sum();
    let late: f64 = x[end..].iter().map(|v| v * v).sum();
    if late == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (direct / late).log10())
}

/// Mean squared difference of magnitudes over all bins.
pub fn spectral_mse(a: &Spectrogram, b: &Spectrogram) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "spectrograms differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.bins().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a
        .bins()
        .iter()
        .zip(b.bins())
        .map(|(x, y)| (x.norm() - y.norm()).powi(2))
        .sum();
    Ok(sum / n as f64)
}
