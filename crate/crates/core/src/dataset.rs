//! Reverberant/clean pair synthesis and on-disk dataset handling.
//!
//! Pairs are produced by convolving clean audio with a room impulse
//! response, aligning the result on the RIR's direct path, cutting both
//! signals into fixed-length chunks and peak-normalizing each chunk.
//!
//! On disk a dataset is a directory of `<id>_clean.wav` / `<id>_reverb.wav`
//! files plus `manifest.tsv` with the columns `id`, `rir_label`, `t60`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use crate::dsp::AudioBuffer;
use crate::{Error, Result};

/// Clean chunks whose peak falls below this are dropped by [`chunk_pairs`].
pub const SILENCE_PEAK: f64 = 1e-4;

/// Reverberation time at which a synthetic tail carries as much energy as
/// the unit direct path.
const REFERENCE_T60: f64 = 1.0;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct RoomImpulseResponse {
    samples: Vec<f64>,
    sample_rate: u32,
    label: String,
}

impl RoomImpulseResponse {
    pub fn new(samples: Vec<f64>, sample_rate: u32, label: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("impulse response contains non-finite samples"));
        }
        if samples.iter().all(|&s| s == 0.0) {
            return Err(Error::invalid("impulse response is all zero"));
        }
        Ok(Self {
            samples,
            sample_rate,
            label: label.into(),
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Index of the largest absolute sample (first one on ties).
    pub fn direct_path_index(&self) -> usize {
        self.samples
            .iter()
            .enumerate()
            .fold(
                (0, 0.0),
                |(bi, bv), (i, &s)| {
                    if s.abs() > bv {
                        (i, s.abs())
                    } else {
                        (bi, bv)
                    }
                },
            )
            .0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub clean: AudioBuffer,
    pub reverberant: AudioBuffer,
    pub rir_label: String,
}

/// Full linear convolution computed with FFTs; output length `a + b - 1`.
pub fn convolve_full(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |x: &[f64]| {
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (b, &v) in buf.iter_mut().zip(x) {
            b.re = v;
        }
        buf
    };
    let mut fa = load(a);
    let mut fb = load(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa[..out_len].iter().map(|c| c.re / n as f64).collect()
}

/// Reverberant version of `clean`: convolved, aligned on the RIR direct
/// path, truncated to the clean length and peak-normalized.
pub fn convolve_rir(clean: &AudioBuffer, rir: &RoomImpulseResponse) -> Result<AudioBuffer> {
    if clean.sample_rate() != rir.sample_rate() {
        return Err(Error::invalid(format!(
            "clean audio at {} Hz but RIR '{}' at {} Hz",
            clean.sample_rate(),
            rir.label(),
            rir.sample_rate()
        )));
    }
    if clean.is_empty() {
        return Err(Error::invalid("clean audio is empty"));
    }
    let full = convolve_full(clean.samples(), rir.samples());
    let d = rir.direct_path_index();
    let aligned = full[d..d + clean.len()].to_vec();
    Ok(AudioBuffer::new(aligned, clean.sample_rate())?.peak_normalized())
}

/// Synthetic RIR: a unit direct-path impulse followed by exponentially
/// decaying noise, 60 dB of energy decay over `t60` seconds.
///
/// The tail is scaled so its expected energy is `(t60 / 1 s)^2` relative to
/// the direct path, which makes the direct-to-reverberant ratio fall
/// monotonically with `t60` and vanish towards short decay times.
pub fn synth_rir(t60: f64, length: usize, seed: u64, sample_rate: u32) -> Result<RoomImpulseResponse> {
    if !(t60 > 0.0 && t60.is_finite()) {
        return Err(Error::invalid(format!("t60 must be positive, got {t60}")));
    }
    if length == 0 {
        return Err(Error::invalid("RIR length must be positive"));
    }
    // Amplitude decay per sample: energy falls by 10^-6 after t60 seconds.
    let decay = (-3.0 * std::f64::consts::LN_10 / (t60 * sample_rate as f64)).exp();
    let expected: f64 = (1..length).map(|n| decay.powi(2 * n as i32)).sum();
    let gain = if expected > 0.0 {
        (t60 / REFERENCE_T60) / expected.sqrt()
    } else {
        0.0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = 3f64.sqrt();
    let mut samples = Vec::with_capacity(length);
    samples.push(1.0);
    let mut env = gain;
    for _ in 1..length {
        env *= decay;
        // Keep the tail strictly below the direct path so it stays the argmax.
        let v: f64 = env * unit * rng.random_range(-1.0..1.0);
        samples.push(v.clamp(-0.999, 0.999));
    }
    RoomImpulseResponse::new(samples, sample_rate, format!("synth-t60-{t60:.2}s-seed{seed}"))
}

/// Cuts aligned clean/reverberant signals into chunks of `chunk_len`
/// samples. The last partial chunk is zero padded; chunks silent in the
/// clean signal are dropped. Every kept chunk is peak-normalized.
pub fn chunk_pairs(
    clean: &AudioBuffer,
    reverberant: &AudioBuffer,
    chunk_len: usize,
    rir_label: &str,
) -> Result<Vec<TrainingPair>> {
    if clean.len() != reverberant.len() {
        return Err(Error::invalid(format!(
            "clean has {} samples, reverberant {}",
            clean.len(),
            reverberant.len()
        )));
    }
    if clean.sample_rate() != reverberant.sample_rate() {
        return Err(Error::invalid("clean and reverberant sample rates differ"));
    }
    if chunk_len == 0 {
        return Err(Error::invalid("chunk length must be positive"));
    }
    let sr = clean.sample_rate();
    let cut = |x: &AudioBuffer, start: usize| {
        let end = (start + chunk_len).min(x.len());
        let mut v = x.samples()[start..end].to_vec();
        v.resize(chunk_len, 0.0);
        AudioBuffer::new(v, sr)
    };
    let mut pairs = Vec::new();
    for start in (0..clean.len()).step_by(chunk_len) {
        let c = cut(clean, start)?;
        if c.peak() < SILENCE_PEAK {
            continue;
        }
        let r = cut(reverberant, start)?;
        pairs.push(TrainingPair {
            clean: c.peak_normalized(),
            reverberant: r.peak_normalized(),
            rir_label: rir_label.to_string(),
        });
    }
    Ok(pairs)
}

fn map_hound(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::FormatError(msg) => Error::Format(format!("{}: {msg}", path.display())),
        hound::Error::Unsupported => Error::UnsupportedFormat(format!("{}: unsupported WAV encoding", path.display())),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads a PCM WAV file, averaging channels to mono and mapping samples to
/// `[-1, 1]`.
pub fn wav_read(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedFormat(format!(
            "{}: only integer PCM is supported, found {:?}",
            path.display(),
            spec.sample_format
        )));
    }
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }
    let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
    let raw: Vec<i32> = reader
        .into_samples::<i32>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| map_hound(path, e))?;
    let mono = raw
        .chunks_exact(channels)
        .map(|frame| frame.iter().map(|&s| s as f64).sum::<f64>() / (channels as f64 * scale))
        .collect();
    AudioBuffer::new(mono, spec.sample_rate)
}

/// Writes 16-bit PCM mono. Samples outside `[-1, 1]` are clipped.
pub fn wav_write(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in audio.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub rir_label: String,
    pub t60: f64,
}

pub fn clean_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_clean.wav"))
}

pub fn reverb_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_reverb.wav"))
}

pub fn write_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut out = String::from("id\trir_label\tt60\n");
    for row in rows {
        out.push_str(&format!("{}\t{}\t{}\n", row.id, row.rir_label, row.t60));
    }
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, label, t60] = fields[..] else {
            return Err(Error::Format(format!(
                "{}:{}: expected 3 tab-separated fields",
                path.display(),
                n + 1
            )));
        };
        let t60 = t60
            .parse()
            .map_err(|_| Error::Format(format!("{}:{}: bad t60 '{t60}'", path.display(), n + 1)))?;
        rows.push(ManifestRow {
            id: id.to_string(),
            rir_label: label.to_string(),
            t60,
        });
    }
    Ok(rows)
}

/// Writes both files of a pair under `dir`.
pub fn write_pair(dir: &Path, id: &str, pair: &TrainingPair) -> Result<()> {
    wav_write(clean_path(dir, id), &pair.clean)?;
    wav_write(reverb_path(dir, id), &pair.reverberant)
}

pub fn read_pair(dir: &Path, row: &ManifestRow) -> Result<TrainingPair> {
    Ok(TrainingPair {
        clean: wav_read(clean_path(dir, &row.id))?,
        reverberant: wav_read(reverb_path(dir, &row.id))?,
        rir_label: row.rir_label.clone(),
    })
}

/// Loads every pair listed in the manifest of `dir`.
pub fn load_dataset(dir: &Path) -> Result<(Vec<ManifestRow>, Vec<TrainingPair>)> {
    let rows = read_manifest(dir)?;
    let pairs = rows.iter().map(|row| read_pair(dir, row)).collect::<Result<Vec<_>>>()?;
    Ok((rows, pairs))
}
