//! The mask predictor: a three-level U-Net with a dilated temporal
//! convolution stack and multi-head attention in the bottleneck.
//!
//! ```text
//! |R| / peak ──pad──► [conv3x3 ─ relu ─ pool] x3 ─► tcn(1,2,4,8) ─► attention
//!                        │ skip                                        │
//!                        ▼                                             ▼
//! mask ◄─crop─ sigmoid ◄─ conv1x1 ◄─ [upsample ─ concat skip ─ conv3x3 ─ relu] x3
//! ```
//!
//! Frequency and time are zero padded to multiples of 8 before the network
//! and cropped afterwards.

pub mod attention;
pub mod tensor;
mod weights;

use ndarray::Array2;

pub use attention::{AttentionCache, AttentionConfig, AttentionWeights};
pub use tensor::Tensor;
pub use weights::{padded_len, NetworkConfig, Param, UNetConfig, UNetWeights, KERNEL, TCN_DILATIONS};

use crate::mask::MagnitudeMask;
use crate::{Error, Result};

/// Floor of the peak used to normalize the input magnitude.
pub const PEAK_FLOOR: f64 = 1e-8;

/// Keeps sigmoid outputs strictly inside `(0, 1)` in floating point.
pub(crate) const OUTPUT_MARGIN: f64 = 1e-12;

/// Four dilated `1 x k` convolutions with relu, plus a residual connection
/// around the whole stack. `layers` holds `(kernel, bias)` per convolution.
pub fn tcn_block(input: &Tensor, layers: &[(&Tensor, &[f64]); 4]) -> Result<Tensor> {
    Ok(tcn_block_traced(input, layers)?.0)
}

fn tcn_block_traced(input: &Tensor, layers: &[(&Tensor, &[f64]); 4]) -> Result<(Tensor, Vec<Tensor>)> {
    let mut acts = Vec::with_capacity(4);
    let mut x = input.clone();
    for (&(kernel, bias), &d) in layers.iter().zip(&TCN_DILATIONS) {
        if kernel.shape()[3] != input.shape()[3] {
            return Err(Error::invalid(format!(
                "tcn convolution outputs {} channels, block input has {}",
                kernel.shape()[3],
                input.shape()[3]
            )));
        }
        x = tensor::relu(&tensor::conv2d(&x, kernel, bias, (1, d))?);
        acts.push(x.clone());
    }
    x.add_assign(input)?;
    Ok((x, acts))
}

/// Intermediate activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Normalized, padded input, `(1, F', T', 1)`.
    pub input: Tensor,
    /// Relu outputs of the encoder blocks (the skip connections).
    pub enc_act: Vec<Tensor>,
    /// Pooled encoder outputs and their argmax indices.
    pub enc_pool: Vec<(Tensor, Vec<usize>)>,
    pub tcn_act: Vec<Tensor>,
    /// TCN output, which is the attention input.
    pub tcn_out: Tensor,
    pub attention: Vec<AttentionCache>,
    pub attention_out: Tensor,
    /// Decoder conv inputs (upsampled features concatenated with the skip),
    /// deepest block first.
    pub dec_cat: Vec<Tensor>,
    pub dec_act: Vec<Tensor>,
    /// Padded sigmoid output, `(1, F', T', 1)`.
    pub output: Tensor,
    pub freq: usize,
    pub time: usize,
}

fn finite(layer: &str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: layer.to_string(),
            detail: "activation is not finite".into(),
        })
    }
}

fn prepare_input(config: &UNetConfig, reverb_mag: &Array2<f64>) -> Result<Tensor> {
    let (nf, nt) = reverb_mag.dim();
    if nf != config.freq_bins {
        return Err(Error::invalid(format!(
            "magnitude has {nf} frequency bins, network expects {}",
            config.freq_bins
        )));
    }
    if nt == 0 {
        return Err(Error::invalid("magnitude has no frames"));
    }
    if reverb_mag.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("magnitude contains non-finite values"));
    }
    let peak = reverb_mag.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(PEAK_FLOOR);
    let mut x = Tensor::zeros([1, padded_len(nf), padded_len(nt), 1]);
    for ((f, t), v) in reverb_mag.indexed_iter() {
        x.set(0, f, t, 0, v / peak);
    }
    Ok(x)
}

/// Forward pass returning the cropped mask and the full trace.
pub fn unet_forward_traced(weights: &UNetWeights, reverb_mag: &Array2<f64>) -> Result<(MagnitudeMask, ForwardTrace)> {
    let cfg = weights.config();
    let input = prepare_input(cfg, reverb_mag)?;

    let mut enc_act = Vec::with_capacity(3);
    let mut enc_pool = Vec::with_capacity(3);
    let mut x = input.clone();
    for layer in ["enc1", "enc2", "enc3"] {
        let a = tensor::relu(&tensor::conv2d(&x, weights.kernel(layer), weights.bias(layer), (1, 1))?);
        finite(layer, &a)?;
        let (p, arg) = tensor::maxpool2_indexed(&a)?;
        x = p.clone();
        enc_act.push(a);
        enc_pool.push((p, arg));
    }

    let tcn_layers = ["tcn1", "tcn2", "tcn3", "tcn4"].map(|l| (weights.kernel(l), weights.bias(l)));
    let (tcn_out, tcn_act) = tcn_block_traced(&x, &tcn_layers)?;
    finite("tcn", &tcn_out)?;

    let (attention_out, attention) =
        attention::multi_head_attention_traced(&tcn_out, &cfg.attention, &weights.attention())?;
    finite("attention", &attention_out)?;

    let mut dec_cat = Vec::with_capacity(3);
    let mut dec_act = Vec::with_capacity(3);
    let mut x = attention_out.clone();
    for (layer, skip) in ["dec3", "dec2", "dec1"].into_iter().zip(enc_act.iter().rev()) {
        let cat = tensor::concat_channels(&tensor::upsample2(&x), skip)?;
        x = tensor::relu(&tensor::conv2d(
            &cat,
            weights.kernel(layer),
            weights.bias(layer),
            (1, 1),
        )?);
        finite(layer, &x)?;
        dec_cat.push(cat);
        dec_act.push(x.clone());
    }

    let logits = tensor::conv2d(&x, weights.kernel("head"), weights.bias("head"), (1, 1))?;
    finite("head", &logits)?;
    let output = logits.map(|z| tensor::sigmoid(z).clamp(OUTPUT_MARGIN, 1.0 - OUTPUT_MARGIN));

    let (nf, nt) = reverb_mag.dim();
    let mask = Array2::from_shape_fn((nf, nt), |(f, t)| output.get(0, f, t, 0));
    let trace = ForwardTrace {
        input,
        enc_act,
        enc_pool,
        tcn_act,
        tcn_out,
        attention,
        attention_out,
        dec_cat,
        dec_act,
        output,
        freq: nf,
        time: nt,
    };
    Ok((MagnitudeMask::new(mask)?, trace))
}

/// Predicts the residual reverberation mask for a reverberant magnitude.
pub fn unet_forward(weights: &UNetWeights, reverb_mag: &Array2<f64>) -> Result<MagnitudeMask> {
    Ok(unet_forward_traced(weights, reverb_mag)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mag(f: usize, t: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((f, t), |_| rng.random_range(0.0..2.0))
    }

    fn toy(freq_bins: usize) -> UNetConfig {
        UNetConfig {
            freq_bins,
            widths: [2, 4, 8],
            attention: AttentionConfig { heads: 4, key_dim: 32 },
        }
    }

    #[test]
    fn shape_preserved_on_full_size_input() {
        let cfg = UNetConfig::new(
            257,
            NetworkConfig {
                widths: [2, 4, 8],
                ..NetworkConfig::default()
            },
        );
        assert_eq!(cfg.padded_freq(), 264);
        let w = UNetWeights::init(cfg, 1);
        let mag = random_mag(257, 64, 2);
        let (mask, trace) = unet_forward_traced(&w, &mag).unwrap();
        assert_eq!(mask.dim(), (257, 64));
        assert_eq!(trace.output.shape(), [1, 264, 64, 1]);
        assert!(mask.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn odd_time_axis_is_padded_and_cropped() {
        let w = UNetWeights::init(toy(17), 4);
        let mask = unet_forward(&w, &random_mag(17, 13, 5)).unwrap();
        assert_eq!(mask.dim(), (17, 13));
    }

    #[test]
    fn zero_weights_give_half() {
        let w = UNetWeights::zeros(toy(16));
        let mask = unet_forward(&w, &random_mag(16, 16, 3)).unwrap();
        assert!(mask.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn input_scale_invariance() {
        let w = UNetWeights::init(toy(16), 9);
        let mag = random_mag(16, 24, 4);
        let base = unet_forward(&w, &mag).unwrap();
        for s in [0.1, 10.0] {
            let scaled = unet_forward(&w, &mag.mapv(|v| v * s)).unwrap();
            let diff = (scaled.values() - base.values())
                .iter()
                .fold(0.0f64, |m, d| m.max(d.abs()));
            assert!(diff < 1e-6);
        }
    }

    #[test]
    fn deterministic() {
        let w = UNetWeights::init(toy(16), 9);
        let mag = random_mag(16, 16, 4);
        assert_eq!(unet_forward(&w, &mag).unwrap(), unet_forward(&w, &mag).unwrap());
    }

    #[test]
    fn bad_inputs_rejected() {
        let w = UNetWeights::init(toy(16), 1);
        let mut mag = random_mag(16, 8, 1);
        mag[[3, 3]] = f64::NAN;
        assert!(matches!(unet_forward(&w, &mag), Err(Error::InvalidArgument(_))));
        assert!(unet_forward(&w, &random_mag(15, 8, 1)).is_err());
    }

    #[test]
    fn tcn_zero_kernels_pass_input_through() {
        let x = Tensor::from_vec([1, 2, 20, 3], (0..120).map(|v| v as f64 * 0.01).collect()).unwrap();
        let k = Tensor::zeros([1, 3, 3, 3]);
        let b = [0.0; 3];
        let layers = [(&k, &b[..]), (&k, &b[..]), (&k, &b[..]), (&k, &b[..])];
        assert_eq!(tcn_block(&x, &layers).unwrap(), x);
    }

    #[test]
    fn tcn_receptive_field_is_fifteen_frames() {
        let (nt, t0) = (48, 20);
        let mut x = Tensor::zeros([1, 1, nt, 1]);
        x.set(0, 0, t0, 0, 1.0);
        let k = Tensor::filled([1, 3, 1, 1], 1.0);
        let layers = [(&k, &[0.0][..]), (&k, &[0.0][..]), (&k, &[0.0][..]), (&k, &[0.0][..])];
        let y = tcn_block(&x, &layers).unwrap();
        for t in 0..nt {
            let v = y.get(0, 0, t, 0);
            if t.abs_diff(t0) > 15 {
                assert_eq!(v, 0.0, "frame {t}");
            } else if t.abs_diff(t0) == 15 {
                assert!(v > 0.0);
            }
        }
        // The residual adds the impulse itself on top of the stack output.
        let stacked = tcn_block(&Tensor::zeros(x.shape()), &layers).unwrap();
        assert!(stacked.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tcn_matches_sequential_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_vec([1, 2, 16, 4], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let ks: Vec<Tensor> = (0..4)
            .map(|_| Tensor::from_vec([1, 3, 4, 4], (0..48).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap())
            .collect();
        let bs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.random_range(-0.1..0.1)).collect())
            .collect();
        let layers = [0, 1, 2, 3].map(|i| (&ks[i], &bs[i][..]));
        let y = tcn_block(&x, &layers).unwrap();
        let mut h = x.clone();
        for (i, d) in [1, 2, 4, 8].into_iter().enumerate() {
            h = tensor::conv2d(&h, &ks[i], &bs[i], (1, d)).unwrap().map(|v| v.max(0.0));
        }
        h.add_assign(&x).unwrap();
        assert!(y.max_abs_diff(&h) < 1e-6);
    }

    #[test]
    fn tcn_channel_mismatch() {
        let x = Tensor::zeros([1, 1, 8, 2]);
        let k = Tensor::zeros([1, 3, 2, 3]);
        let b = [0.0; 3];
        let layers = [(&k, &b[..]), (&k, &b[..]), (&k, &b[..]), (&k, &b[..])];
        assert!(tcn_block(&x, &layers).is_err());
    }
}
