//! Time-frequency conversion with perfect-reconstruction framing.
//!
//! Framing convention: the signal is zero padded by `fft_size - hop` samples
//! on both sides, frames advance by `hop`, and only the non-negative
//! frequency bins (`fft_size / 2 + 1`) are kept. The inverse is a weighted
//! overlap-add normalized by the summed squared window, so any window with a
//! positive envelope over the signal reconstructs exactly; the periodic Hann
//! window at 50% overlap is the default.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::{Error, Result};

/// Floor applied to the squared-window envelope during resynthesis.
pub const ENVELOPE_FLOOR: f64 = 1e-8;

/// A mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Scales to a peak of exactly 1. Silent buffers are returned unchanged.
    pub fn peak_normalized(&self) -> Self {
        let peak = self.peak();
        if peak == 0.0 {
            return self.clone();
        }
        Self {
            samples: self.samples.iter().map(|s| s / peak).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Truncates or zero-pads to `len` samples.
    pub fn resized(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

/// Framing parameters for [`stft`] / [`istft`].
#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    fft_size: usize,
    hop: usize,
    window: Vec<f64>,
}

impl StftConfig {
    /// Periodic Hann analysis/synthesis window.
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        Self::with_window(fft_size, hop, hann_window(fft_size)?)
    }

    pub fn with_window(fft_size: usize, hop: usize, window: Vec<f64>) -> Result<Self> {
        if fft_size < 2 || hop == 0 {
            return Err(Error::invalid(format!(
                "fft_size {fft_size} and hop {hop} must be positive (fft_size >= 2)"
            )));
        }
        if hop > fft_size || !fft_size.is_multiple_of(hop) {
            return Err(Error::invalid(format!("hop {hop} must divide fft_size {fft_size}")));
        }
        if window.len() != fft_size {
            return Err(Error::invalid(format!(
                "window length {} != fft_size {fft_size}",
                window.len()
            )));
        }
        if window.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("window values must lie in [0, 1]"));
        }
        Ok(Self { fft_size, hop, window })
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Zero padding applied to each end of the signal.
    pub fn pad(&self) -> usize {
        self.fft_size - self.hop
    }

    /// Number of retained frequency bins, `fft_size / 2 + 1`.
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        let padded = len + 2 * self.pad();
        if padded < self.fft_size {
            return 0;
        }
        1 + (padded - self.fft_size) / self.hop
    }

    /// Length of the signal [`istft`] produces from `frames` frames.
    pub fn output_len(&self, frames: usize) -> usize {
        if frames == 0 {
            return 0;
        }
        ((frames - 1) * self.hop + self.fft_size).saturating_sub(2 * self.pad())
    }

    /// Center frequency in Hz of every retained bin.
    pub fn bin_frequencies(&self, sample_rate: u32) -> Vec<f64> {
        (0..self.bins())
            .map(|k| k as f64 * sample_rate as f64 / self.fft_size as f64)
            .collect()
    }

    /// Summed squared window over the padded signal, one entry per sample.
    fn envelope(&self, frames: usize) -> Vec<f64> {
        let total = (frames.max(1) - 1) * self.hop + self.fft_size;
        let mut env = vec![0.0; total];
        for t in 0..frames {
            let start = t * self.hop;
            for (e, w) in env[start..start + self.fft_size].iter_mut().zip(&self.window) {
                *e += w * w;
            }
        }
        env
    }
}

/// Complex STFT, `bins` rows by `frames` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    bins: Array2<Complex64>,
    config: StftConfig,
    sample_rate: u32,
}

impl Spectrogram {
    pub fn new(bins: Array2<Complex64>, config: StftConfig, sample_rate: u32) -> Result<Self> {
        if bins.nrows() != config.bins() {
            return Err(Error::invalid(format!(
                "spectrogram has {} rows, expected {}",
                bins.nrows(),
                config.bins()
            )));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if bins.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::invalid("spectrogram contains non-finite bins"));
        }
        Ok(Self {
            bins,
            config,
            sample_rate,
        })
    }

    /// Rebuilds from polar form, `magnitude * exp(i * phase)`.
    pub fn from_polar(
        magnitude: &Array2<f64>,
        phase: &Array2<f64>,
        config: StftConfig,
        sample_rate: u32,
    ) -> Result<Self> {
        if magnitude.dim() != phase.dim() {
            return Err(Error::invalid("magnitude and phase shapes differ"));
        }
        let bins = ndarray::Zip::from(magnitude)
            .and(phase)
            .map_collect(|&m, &p| Complex64::from_polar(m, p));
        Self::new(bins, config, sample_rate)
    }

    pub fn bins(&self) -> &Array2<Complex64> {
        &self.bins
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// `(frequency bins, time frames)`.
    pub fn dim(&self) -> (usize, usize) {
        self.bins.dim()
    }

    pub fn frames(&self) -> usize {
        self.bins.ncols()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.bins.mapv(|c| c.norm())
    }

    pub(crate) fn with_bins(&self, bins: Array2<Complex64>) -> Self {
        Self {
            bins,
            config: self.config.clone(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Periodic Hann window, `w[k] = 0.5 * (1 - cos(2 pi k / n))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid(format!("window length {n} < 2")));
    }
    Ok((0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos()))
        .collect())
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

/// Short-time Fourier transform of `audio`.
pub fn stft(audio: &AudioBuffer, cfg: &StftConfig) -> Result<Spectrogram> {
    let n = cfg.fft_size;
    if audio.len() < n {
        return Err(Error::invalid(format!(
            "audio has {} samples, shorter than one {n}-sample frame",
            audio.len()
        )));
    }
    let pad = cfg.pad();
    let mut padded = vec![0.0; audio.len() + 2 * pad];
    padded[pad..pad + audio.len()].copy_from_slice(audio.samples());

    let frames = cfg.frame_count(audio.len());
    let bins = cfg.bins();
    let plans = Plans::new(n);
    let mut out = Array2::<Complex64>::zeros((bins, frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        let start = t * cfg.hop;
        for ((b, &x), &w) in buf.iter_mut().zip(&padded[start..start + n]).zip(&cfg.window) {
            *b = Complex64::new(x * w, 0.0);
        }
        plans.forward.process(&mut buf);
        for f in 0..bins {
            out[[f, t]] = buf[f];
        }
    }
    Spectrogram::new(out, cfg.clone(), audio.sample_rate())
}

/// Inverse of [`stft`]: weighted overlap-add with the padding trimmed.
pub fn istft(spec: &Spectrogram) -> Result<AudioBuffer> {
    let cfg = &spec.config;
    let n = cfg.fft_size;
    let frames = spec.frames();
    let env = cfg.envelope(frames);
    let plans = Plans::new(n);
    let mut acc = vec![0.0; env.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        hermitian_fill(&mut buf, spec.bins.column(t).iter().copied());
        plans.inverse.process(&mut buf);
        let start = t * cfg.hop;
        for ((a, b), &w) in acc[start..start + n].iter_mut().zip(&buf).zip(&cfg.window) {
            *a += w * b.re / n as f64;
        }
    }
    let pad = cfg.pad();
    let len = cfg.output_len(frames);
    let samples = (pad..pad + len).map(|i| acc[i] / env[i].max(ENVELOPE_FLOOR)).collect();
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Adjoint of [`istft`] with respect to the real and imaginary parts of the
/// bins: for a gradient `grad` on the output samples returns, per bin, the
/// complex number `dL/dRe + i dL/dIm`.
///
/// For a real parameter `m` scaling a bin as `X = (1 - m) S`, the chain rule
/// gives `dL/dm = -Re(conj(S) * adjoint)`.
pub fn istft_adjoint(grad: &[f64], config: &StftConfig, frames: usize) -> Result<Array2<Complex64>> {
    let len = config.output_len(frames);
    if grad.len() != len {
        return Err(Error::invalid(format!(
            "gradient has {} samples, istft output has {len}",
            grad.len()
        )));
    }
    let n = config.fft_size;
    let pad = config.pad();
    let env = config.envelope(frames);
    let mut scaled = vec![0.0; env.len()];
    for (i, g) in grad.iter().enumerate() {
        scaled[pad + i] = g / env[pad + i].max(ENVELOPE_FLOOR);
    }
    let plans = Plans::new(n);
    let bins = config.bins();
    let mut out = Array2::<Complex64>::zeros((bins, frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        let start = t * config.hop;
        for ((b, &g), &w) in buf.iter_mut().zip(&scaled[start..start + n]).zip(&config.window) {
            *b = Complex64::new(w * g / n as f64, 0.0);
        }
        plans.forward.process(&mut buf);
        for f in 0..bins {
            // Interior bins appear twice in the Hermitian extension.
            let weight = if f == 0 || 2 * f == n { 1.0 } else { 2.0 };
            out[[f, t]] = buf[f] * weight;
        }
    }
    Ok(out)
}

/// Expands the non-negative half spectrum into a full Hermitian spectrum.
fn hermitian_fill(buf: &mut [Complex64], half: impl Iterator<Item = Complex64>) {
    let n = buf.len();
    for (f, c) in half.enumerate() {
        buf[f] = c;
        if f != 0 && 2 * f != n {
            buf[n - f] = c.conj();
        }
    }
}

/// Element-wise modulus and argument. Phase lies in `(-pi, pi]`; zero bins
/// get phase 0.
pub fn magnitude_phase(spec: &Spectrogram) -> (Array2<f64>, Array2<f64>) {
    let magnitude = spec.bins.mapv(|c| c.norm());
    let phase = spec.bins.mapv(|c| {
        if c.re == 0.0 && c.im == 0.0 {
            return 0.0;
        }
        let p = c.im.atan2(c.re);
        if p <= -PI {
            PI
        } else {
            p
        }
    });
    (magnitude, phase)
}
