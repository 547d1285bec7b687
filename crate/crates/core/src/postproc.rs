//! Post-processing after masking: spectral gating, a high-shelf EQ and
//! crossfaded chunk stitching.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{AudioBuffer, Spectrogram};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocConfig {
    /// Bins quieter than the row floor plus this many dB are zeroed.
    pub gate_threshold_db: f64,
    /// Quantile of each frequency row taken as its noise floor.
    pub gate_floor_percentile: f64,
    /// Hz at which the shelf reaches full gain.
    pub eq_shelf_freq: f64,
    pub eq_shelf_gain_db: f64,
    /// Crossfade length between chunks as a fraction of the chunk length.
    pub chunk_overlap: f64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            gate_threshold_db: 6.0,
            gate_floor_percentile: 0.10,
            eq_shelf_freq: 2000.0,
            eq_shelf_gain_db: 3.0,
            chunk_overlap: 0.25,
        }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.chunk_overlap > 0.0 && self.chunk_overlap < 0.5) {
            return Err(Error::Config("chunk_overlap must lie in (0, 0.5)".into()));
        }
        if !(self.gate_floor_percentile > 0.0 && self.gate_floor_percentile < 1.0) {
            return Err(Error::Config("gate_floor_percentile must lie in (0, 1)".into()));
        }
        if !self.eq_shelf_gain_db.is_finite() || !self.gate_threshold_db.is_finite() {
            return Err(Error::Config("gate threshold and EQ gain must be finite".into()));
        }
        if !(self.eq_shelf_freq > 0.0 && self.eq_shelf_freq.is_finite()) {
            return Err(Error::Config("eq_shelf_freq must be positive".into()));
        }
        Ok(())
    }

    /// Crossfade length in samples for chunks of `chunk_len`.
    pub fn overlap_samples(&self, chunk_len: usize) -> usize {
        (self.chunk_overlap * chunk_len as f64).round() as usize
    }
}

/// Lower-order-statistic quantile: the sorted value at `floor(q * (n - 1))`.
fn row_floor(row: &mut [f64], q: f64) -> f64 {
    row.sort_by(|a, b| a.total_cmp(b));
    row[(q * (row.len() - 1) as f64).floor() as usize]
}

/// Zeroes every bin whose magnitude lies below its row's noise floor raised
/// by `gate_threshold_db`. Surviving bins are returned untouched.
pub fn spectral_gate(spec: &Spectrogram, cfg: &PostprocConfig) -> Spectrogram {
    let ratio = 10f64.powf(cfg.gate_threshold_db / 20.0);
    let mut bins = spec.bins().clone();
    for mut row in bins.rows_mut() {
        if row.is_empty() {
            continue;
        }
        let mut mags: Vec<f64> = row.iter().map(|c| c.norm()).collect();
        let threshold = row_floor(&mut mags, cfg.gate_floor_percentile) * ratio;
        for c in row.iter_mut() {
            if c.norm() < threshold {
                *c = Complex64::new(0.0, 0.0);
            }
        }
    }
    spec.with_bins(bins)
}

/// Shelf gain in dB at `freq` Hz: 0 below half the shelf frequency, a ramp
/// linear in log frequency up to the shelf frequency, flat above.
pub fn shelf_gain_db(freq: f64, cfg: &PostprocConfig) -> f64 {
    let lo = cfg.eq_shelf_freq / 2.0;
    if freq <= lo {
        0.0
    } else if freq >= cfg.eq_shelf_freq {
        cfg.eq_shelf_gain_db
    } else {
        cfg.eq_shelf_gain_db * (freq / lo).log2()
    }
}

/// Applies the high-shelf curve to the whole buffer in the frequency domain.
pub fn eq_boost(audio: &AudioBuffer, cfg: &PostprocConfig) -> AudioBuffer {
    let n = audio.len();
    if n == 0 {
        return audio.clone();
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = audio.samples().iter().map(|&s| Complex64::new(s, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let sr = audio.sample_rate() as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        // Negative-frequency bins mirror the positive ones to keep the output real.
        let bin = k.min(n - k);
        let freq = bin as f64 * sr / n as f64;
        *c *= 10f64.powf(shelf_gain_db(freq, cfg) / 20.0);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let samples = buf.iter().map(|c| c.re / n as f64).collect();
    AudioBuffer::new(samples, audio.sample_rate()).expect("finite gains keep samples finite")
}

/// Raised-cosine fade-in over `overlap` samples; the matching fade-out is
/// `1 - fade_in`.
pub fn crossfade_in(overlap: usize) -> Vec<f64> {
    (0..overlap)
        .map(|k| 0.5 * (1.0 - (PI * (k as f64 + 0.5) / overlap as f64).cos()))
        .collect()
}

/// Joins equal-length chunks that overlap by `overlap` samples, crossfading
/// each seam. Output length is `n * L - (n - 1) * overlap`.
pub fn stitch_chunks(chunks: &[AudioBuffer], overlap: usize) -> Result<AudioBuffer> {
    let first = chunks.first().ok_or_else(|| Error::invalid("no chunks to stitch"))?;
    let len = first.len();
    let sr = first.sample_rate();
    if chunks.iter().any(|c| c.len() != len || c.sample_rate() != sr) {
        return Err(Error::invalid("chunks differ in length or sample rate"));
    }
    if chunks.len() == 1 {
        return Ok(first.clone());
    }
    if overlap == 0 || 2 * overlap >= len {
        return Err(Error::invalid(format!(
            "overlap {overlap} must lie strictly between 0 and half the chunk length {len}"
        )));
    }
    let fade = crossfade_in(overlap);
    let step = len - overlap;
    let mut out = vec![0.0; chunks.len() * len - (chunks.len() - 1) * overlap];
    for (i, chunk) in chunks.iter().enumerate() {
        let start = i * step;
        for (k, &s) in chunk.samples().iter().enumerate() {
            let mut g = 1.0;
            if i > 0 && k < overlap {
                g *= fade[k];
            }
            if i + 1 < chunks.len() && k >= step {
                g *= 1.0 - fade[k - step];
            }
            out[start + k] += g * s;
        }
    }
    AudioBuffer::new(out, sr)
}

/// Cuts `audio` into chunks of `len` samples advancing by `len - overlap`,
/// zero padding the last one; the inverse layout of [`stitch_chunks`].
pub fn split_chunks(audio: &AudioBuffer, len: usize, overlap: usize) -> Result<Vec<AudioBuffer>> {
    if len == 0 || overlap >= len {
        return Err(Error::invalid("chunk length must exceed the overlap"));
    }
    let step = len - overlap;
    let count = if audio.len() <= len {
        1
    } else {
        1 + (audio.len() - len).div_ceil(step)
    };
    (0..count)
        .map(|i| {
            let start = i * step;
            let end = (start + len).min(audio.len());
            let mut v = audio.samples()[start.min(end)..end].to_vec();
            v.resize(len, 0.0);
            AudioBuffer::new(v, audio.sample_rate())
        })
        .collect()
}

/// Magnitude grid as whitespace-separated text, one frequency row per line.
pub fn magnitude_grid(magnitude: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in magnitude.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
