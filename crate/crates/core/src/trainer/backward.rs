//! Reverse-mode gradients of the hybrid loss through the U-Net.

use ndarray::Array2;

use crate::dataset::TrainingPair;
use crate::dsp::{istft, istft_adjoint, AudioBuffer, Spectrogram, StftConfig};
use crate::loss::{align_clean, hybrid_loss, LossConfig, LossReport};
use crate::mask::{apply_mask, oracle_mask, MagnitudeMask, MaskConfig};
use crate::network::tensor::{conv2d_backward, maxpool2_backward, relu_backward, split_channels, upsample2_backward};
use crate::network::{attention, unet_forward_traced, ForwardTrace, Tensor, UNetWeights, OUTPUT_MARGIN, TCN_DILATIONS};
use crate::{Error, Result};

/// A training pair with its spectra and target mask precomputed.
#[derive(Debug, Clone)]
pub struct Sample {
    pub reverb_spec: Spectrogram,
    pub reverb_mag: Array2<f64>,
    pub target: MagnitudeMask,
    pub clean: AudioBuffer,
}

impl Sample {
    pub fn new(pair: &TrainingPair, stft_cfg: &StftConfig, mask_cfg: &MaskConfig) -> Result<Self> {
        let reverb_spec = crate::dsp::stft(&pair.reverberant, stft_cfg)?;
        let clean_spec = crate::dsp::stft(&pair.clean, stft_cfg)?;
        let reverb_mag = reverb_spec.magnitude();
        let target = oracle_mask(&reverb_mag, &clean_spec.magnitude(), mask_cfg)?;
        Ok(Self {
            reverb_spec,
            reverb_mag,
            target,
            clean: pair.clean.clone(),
        })
    }
}

/// Result of the forward half: the loss components, the predicted mask and
/// the activations needed by [`backward`].
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: LossReport,
    pub mask: MagnitudeMask,
    pub trace: ForwardTrace,
}

/// Runs the network and the hybrid loss on one sample.
pub fn evaluate(weights: &UNetWeights, sample: &Sample, cfg: &LossConfig, epoch: usize) -> Result<Evaluation> {
    let (mask, trace) = unet_forward_traced(weights, &sample.reverb_mag)?;
    let report = hybrid_loss(&sample.target, &mask, &sample.reverb_spec, &sample.clean, cfg, epoch)?;
    if !report.total.is_finite() {
        return Err(Error::Numeric {
            layer: "loss".into(),
            detail: format!("total loss is {}", report.total),
        });
    }
    Ok(Evaluation { report, mask, trace })
}

/// Gradient of the total loss with respect to the predicted mask values.
fn mask_gradient(sample: &Sample, eval: &Evaluation, cfg: &LossConfig) -> Result<Array2<f64>> {
    let (nf, nt) = eval.mask.dim();
    let n = (nf * nt) as f64;
    let spec = &sample.reverb_spec;
    let weights = cfg.frequency_weights(&spec.config().bin_frequencies(spec.sample_rate()));
    let target = sample.target.values();
    let pred = eval.mask.values();
    let eps = cfg.clamp_eps;

    let mut grad = Array2::zeros((nf, nt));
    for ((f, t), g) in grad.indexed_iter_mut() {
        let (m, p) = (target[[f, t]], pred[[f, t]]);
        let bce = if p > eps && p < 1.0 - eps {
            (-m / p + (1.0 - m) / (1.0 - p)) / n
        } else {
            0.0
        };
        let mag = -2.0 * weights[f] * m * m * (1.0 - p) / n;
        *g = cfg.bce_weight * bce + cfg.mag_weight * mag;
    }

    let lambda = eval.report.lambda;
    if lambda != 0.0 {
        let y = istft(&apply_mask(spec, &eval.mask)?)?;
        let clean = align_clean(&sample.clean, y.len(), spec.config().hop())?;
        let len = y.len().max(1) as f64;
        let g_y: Vec<f64> = y
            .samples()
            .iter()
            .zip(clean.samples())
            .map(|(a, b)| 2.0 * (a - b) / len)
            .collect();
        let adj = istft_adjoint(&g_y, spec.config(), nt)?;
        for ((f, t), g) in grad.indexed_iter_mut() {
            *g -= lambda * (spec.bins()[[f, t]].conj() * adj[[f, t]]).re;
        }
    }
    Ok(grad)
}

fn slot<'a>(grads: &'a mut UNetWeights, name: &str) -> &'a mut [f64] {
    grads
        .params_mut()
        .iter_mut()
        .find(|p| p.name == name)
        .unwrap_or_else(|| panic!("no parameter named {name}"))
        .values_mut()
}

fn store(grads: &mut UNetWeights, name: &str, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            layer: name.to_string(),
            detail: "gradient is not finite".into(),
        });
    }
    slot(grads, name).copy_from_slice(values);
    Ok(())
}

fn store_conv(grads: &mut UNetWeights, layer: &str, kernel: &Tensor, bias: &[f64]) -> Result<()> {
    store(grads, &format!("{layer}.kernel"), kernel.data())?;
    store(grads, &format!("{layer}.bias"), bias)
}

/// Exact gradients of `loss_scale * total` with respect to every parameter,
/// returned in a [`UNetWeights`] with the same names and shapes.
pub fn backward(
    weights: &UNetWeights,
    sample: &Sample,
    eval: &Evaluation,
    cfg: &LossConfig,
    loss_scale: f64,
) -> Result<UNetWeights> {
    let tr = &eval.trace;
    let mut grads = UNetWeights::zeros(*weights.config());

    let g_mask = mask_gradient(sample, eval, cfg)?;
    let mut g = Tensor::zeros(tr.output.shape());
    for ((f, t), &gm) in g_mask.indexed_iter() {
        let p = tr.output.get(0, f, t, 0);
        // The output clamp has zero slope.
        if p > OUTPUT_MARGIN && p < 1.0 - OUTPUT_MARGIN {
            g.set(0, f, t, 0, loss_scale * gm * p * (1.0 - p));
        }
    }

    let (g_x, g_k, g_b) = conv2d_backward(&tr.dec_act[2], weights.kernel("head"), (1, 1), &g)?;
    store_conv(&mut grads, "head", &g_k, &g_b)?;
    let mut g = g_x;

    let mut g_skip: Vec<Option<Tensor>> = vec![None, None, None];
    for (i, layer) in ["dec3", "dec2", "dec1"].into_iter().enumerate().rev() {
        let g_pre = relu_backward(&tr.dec_act[i], &g);
        let (g_cat, g_k, g_b) = conv2d_backward(&tr.dec_cat[i], weights.kernel(layer), (1, 1), &g_pre)?;
        store_conv(&mut grads, layer, &g_k, &g_b)?;
        let skip = 2 - i;
        let up_channels = tr.dec_cat[i].shape()[3] - tr.enc_act[skip].shape()[3];
        let (g_up, g_s) = split_channels(&g_cat, up_channels);
        g_skip[skip] = Some(g_s);
        g = upsample2_backward(&g_up);
    }

    let cfg_att = &weights.config().attention;
    let (g_tcn_out, ag) =
        attention::multi_head_attention_backward(tr.tcn_out.shape(), cfg_att, &weights.attention(), &tr.attention, &g)?;
    for (name, values) in [
        ("attn.query", &ag.query),
        ("attn.query_bias", &ag.query_bias),
        ("attn.key", &ag.key),
        ("attn.key_bias", &ag.key_bias),
        ("attn.value", &ag.value),
        ("attn.value_bias", &ag.value_bias),
        ("attn.output", &ag.output),
        ("attn.output_bias", &ag.output_bias),
    ] {
        store(&mut grads, name, values)?;
    }

    let tcn_input = &tr.enc_pool[2].0;
    let mut g = g_tcn_out.clone();
    for l in (0..TCN_DILATIONS.len()).rev() {
        let layer = format!("tcn{}", l + 1);
        let g_pre = relu_backward(&tr.tcn_act[l], &g);
        let input = if l == 0 { tcn_input } else { &tr.tcn_act[l - 1] };
        let (g_in, g_k, g_b) = conv2d_backward(input, weights.kernel(&layer), (1, TCN_DILATIONS[l]), &g_pre)?;
        store_conv(&mut grads, &layer, &g_k, &g_b)?;
        g = g_in;
    }
    // Residual around the temporal stack.
    g.add_assign(&g_tcn_out)?;

    for (l, layer) in ["enc1", "enc2", "enc3"].into_iter().enumerate().rev() {
        let act = &tr.enc_act[l];
        let mut g_act = maxpool2_backward(act.shape(), &tr.enc_pool[l].1, &g);
        if let Some(s) = &g_skip[l] {
            g_act.add_assign(s)?;
        }
        let g_pre = relu_backward(act, &g_act);
        let input = if l == 0 { &tr.input } else { &tr.enc_pool[l - 1].0 };
        let (g_in, g_k, g_b) = conv2d_backward(input, weights.kernel(layer), (1, 1), &g_pre)?;
        store_conv(&mut grads, layer, &g_k, &g_b)?;
        g = g_in;
    }
    Ok(grads)
}

/// Forward and backward on one sample.
pub fn loss_and_gradients(
    weights: &UNetWeights,
    sample: &Sample,
    cfg: &LossConfig,
    epoch: usize,
) -> Result<(LossReport, UNetWeights)> {
    let eval = evaluate(weights, sample, cfg, epoch)?;
    let grads = backward(weights, sample, &eval, cfg, 1.0)?;
    Ok((eval.report, grads))
}
