//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod reference;

use std::f64::consts::PI;

use dereverb_core::dataset::{chunk_pairs, convolve_rir, synth_rir, TrainingPair};
use dereverb_core::dsp::{AudioBuffer, StftConfig};
use dereverb_core::loss::LossConfig;
use dereverb_core::mask::MaskConfig;
use dereverb_core::network::{AttentionConfig, ForwardTrace, NetworkConfig, UNetConfig, UNetWeights};
use dereverb_core::trainer::{evaluate, loss_and_gradients, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FS: u32 = 16000;

/// 16 frequency bins and, for 225-sample chunks, 16 frames.
pub const TOY_FFT: usize = 30;
pub const TOY_HOP: usize = 15;
pub const TOY_CHUNK: usize = 225;
pub const TOY_BINS: usize = 16;

pub fn toy_stft() -> StftConfig {
    StftConfig::new(TOY_FFT, TOY_HOP).unwrap()
}

pub fn toy_network() -> NetworkConfig {
    NetworkConfig {
        widths: [2, 4, 8],
        attention: AttentionConfig::default(),
    }
}

pub fn toy_unet() -> UNetConfig {
    UNetConfig::new(TOY_BINS, toy_network())
}

/// Two Hann-shaped tone bursts at bin-centred frequencies, reverberated by a
/// synthetic RIR and cut to one toy chunk.
pub fn toy_pair(seed: u64) -> TrainingPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clean = vec![0.0; TOY_CHUNK];
    for _ in 0..2 {
        let len = rng.random_range(30..60);
        let start = rng.random_range(0..TOY_CHUNK - len);
        let bin = rng.random_range(2..13) as f64;
        let freq = bin * FS as f64 / TOY_FFT as f64;
        let amp = rng.random_range(0.5..1.0);
        for k in 0..len {
            let env = 0.5 * (1.0 - (2.0 * PI * k as f64 / len as f64).cos());
            clean[start + k] += amp * env * (2.0 * PI * freq * k as f64 / FS as f64).sin();
        }
    }
    let clean = AudioBuffer::new(clean, FS).unwrap();
    let t60 = rng.random_range(1.0..2.0);
    let rir = synth_rir(t60, 4000, seed.wrapping_mul(31).wrapping_add(7), FS).unwrap();
    let reverb = convolve_rir(&clean, &rir).unwrap();
    chunk_pairs(&clean, &reverb, TOY_CHUNK, rir.label()).unwrap().remove(0)
}

/// One Hann tone burst in the first 120 samples of a toy chunk, so that the
/// rest of the chunk is dominated by its reverberant tail.
pub fn decay_pair(seed: u64) -> TrainingPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clean = vec![0.0; TOY_CHUNK];
    let len = rng.random_range(30..60);
    let start = rng.random_range(0..60);
    let bin = rng.random_range(2..13) as f64;
    let freq = bin * FS as f64 / TOY_FFT as f64;
    let amp = rng.random_range(0.5..1.0);
    for k in 0..len {
        let env = 0.5 * (1.0 - (2.0 * PI * k as f64 / len as f64).cos());
        clean[start + k] = amp * env * (2.0 * PI * freq * k as f64 / FS as f64).sin();
    }
    let clean = AudioBuffer::new(clean, FS).unwrap();
    let t60 = rng.random_range(1.0..2.0);
    let rir = synth_rir(t60, 4000, seed.wrapping_mul(31).wrapping_add(7), FS).unwrap();
    let reverb = convolve_rir(&clean, &rir).unwrap();
    chunk_pairs(&clean, &reverb, TOY_CHUNK, rir.label()).unwrap().remove(0)
}

/// Two seconds of syllable-like harmonic bursts: a random fundamental with
/// decaying harmonics up to 4 kHz, gated by raised-cosine syllables at a
/// 3 to 6 Hz rate.
pub fn speech_like(seed: u64, seconds: f64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * FS as f64) as usize;
    let f0 = rng.random_range(110.0..220.0);
    let rate = rng.random_range(3.0..6.0);
    let harmonics = (4000.0 / f0) as usize;
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let x = (0..n)
        .map(|i| {
            let t = i as f64 / FS as f64;
            let cycle = (t * rate).fract();
            // Syllable for the first 60 % of each cycle, then a pause.
            let env = if cycle < 0.6 {
                (PI * cycle / 0.6).sin().powi(2)
            } else {
                0.0
            };
            let tone: f64 = phases
                .iter()
                .enumerate()
                .map(|(h, p)| (2.0 * PI * f0 * (h + 1) as f64 * t + p).sin() / (h + 1) as f64)
                .sum();
            env * tone
        })
        .collect();
    AudioBuffer::new(x, FS).unwrap().peak_normalized()
}

pub fn toy_sample(seed: u64) -> Sample {
    Sample::new(&toy_pair(seed), &toy_stft(), &MaskConfig::default()).unwrap()
}

/// Initialized toy weights with small random biases, so that no relu input
/// sits exactly at zero (zero bias over zero padding would), and query/key
/// projections rescaled so that attention scores on `sample` have unit
/// spread (attention far from uniform).
pub fn generic_weights(seed: u64, sample: &Sample) -> UNetWeights {
    let mut w = UNetWeights::init(toy_unet(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in w.params_mut() {
        if p.dims.len() == 1 {
            p.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    let tokens = evaluate(&w, sample, &full_loss(), 1).unwrap().trace.tcn_out;
    let rms = (tokens.data().iter().map(|v| v * v).sum::<f64>() / tokens.len() as f64).sqrt();
    let d = w.config().token_dim() as f64;
    let limit = 3f64.sqrt() / (rms * d.sqrt());
    for p in w.params_mut() {
        if p.name == "attn.query" || p.name == "attn.key" {
            p.values_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-limit..limit));
        }
    }
    w
}

/// The loss with the time-domain term at full weight from epoch 1.
pub fn full_loss() -> LossConfig {
    LossConfig {
        td_ramp_epochs: 1,
        ..LossConfig::default()
    }
}

/// Which side of every relu and which pooling winner each unit is on.
fn activation_pattern(tr: &ForwardTrace) -> Vec<u64> {
    let mut out = Vec::new();
    for t in tr.enc_act.iter().chain(&tr.tcn_act).chain(&tr.dec_act) {
        out.extend(t.data().iter().map(|&v| u64::from(v > 0.0)));
    }
    for (_, arg) in &tr.enc_pool {
        out.extend(arg.iter().map(|&i| i as u64));
    }
    out
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, floor)`.
    pub rel_error: f64,
    /// Entries whose step crossed a relu or pooling switch and had to be
    /// shrunk.
    pub refined: usize,
}

/// Central finite differences of the total loss for every parameter entry.
///
/// A central difference across a relu kink or a change of pooling winner
/// estimates neither one-sided derivative, so any entry whose perturbed
/// forward passes change the activation pattern is recomputed with a step
/// ten times smaller, down to `h / 1e4`.
///
/// The floor in the error is `1e-6` times the norm of the whole gradient.
/// It only matters for tensors whose gradient vanishes identically, such
/// as the key bias (softmax ignores a shift shared by all keys), which are
/// then compared against rounding noise instead of against zero.
pub fn check_gradients(w: &UNetWeights, s: &Sample, cfg: &LossConfig, h: f64) -> Vec<GradCheck> {
    let epoch = 1;
    let (_, grads) = loss_and_gradients(w, s, cfg, epoch).unwrap();
    let base = activation_pattern(&evaluate(w, s, cfg, epoch).unwrap().trace);
    let mut probe = w.clone();
    let at = |probe: &mut UNetWeights, pi: usize, k: usize, v: f64| {
        probe.params_mut()[pi].values_mut()[k] = v;
        let e = evaluate(probe, s, cfg, epoch).unwrap();
        (e.report.total, activation_pattern(&e.trace) == base)
    };
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let floor = 1e-6
        * grads
            .params()
            .iter()
            .map(|p| norm(p.values()).powi(2))
            .sum::<f64>()
            .sqrt();
    let mut out = Vec::new();
    for (pi, gp) in grads.params().iter().enumerate() {
        let mut refined = 0;
        let mut num = vec![0.0; gp.values().len()];
        for (k, n) in num.iter_mut().enumerate() {
            let orig = w.params()[pi].values()[k];
            let mut step = h;
            loop {
                let (up, same_up) = at(&mut probe, pi, k, orig + step);
                let (down, same_down) = at(&mut probe, pi, k, orig - step);
                *n = (up - down) / (2.0 * step);
                if (same_up && same_down) || step <= h * 1e-4 {
                    break;
                }
                step /= 10.0;
                refined += 1;
            }
            probe.params_mut()[pi].values_mut()[k] = orig;
        }
        let diff: Vec<f64> = num.iter().zip(gp.values()).map(|(a, b)| a - b).collect();
        let scale = norm(&num).max(norm(gp.values())).max(floor);
        out.push(GradCheck {
            name: gp.name.clone(),
            rel_error: norm(&diff) / scale,
            refined,
        });
    }
    out
}
