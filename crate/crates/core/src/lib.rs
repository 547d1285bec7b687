//! Residual-reverb-mask dereverberation.
//!
//! The engine converts reverberant audio to an STFT magnitude, predicts a
//! mask in `[0, 1]` giving the fraction of every time-frequency bin that is
//! reverberation, subtracts `mask * magnitude` while keeping the reverberant
//! phase, and resynthesizes. Around that core sit a U-Net mask predictor
//! (convolutional encoder, dilated temporal bottleneck with multi-head
//! attention, decoder with skip connections), a hybrid training objective,
//! a reverse-mode trainer with Adam, spectral post-processing, RIR-based
//! dataset synthesis and SRMR evaluation.
//!
//! Modules, bottom-up:
//!
//! - [`dsp`]: windows, STFT/ISTFT, magnitude/phase.
//! - [`mask`]: oracle residual mask and mask application.
//! - [`dataset`]: RIR synthesis and convolution, chunking, WAV I/O.
//! - [`network`]: tensor primitives, U-Net forward pass, weight files.
//! - [`loss`]: BCE, frequency-weighted magnitude loss, time-domain loss.
//! - [`trainer`]: gradients, Adam, the epoch loop.
//! - [`postproc`]: spectral gate, high-shelf EQ, chunk stitching.
//! - [`metrics`]: SRMR, DRR, spectral MSE.
//! - [`pipeline`]: configuration and the `synth`/`train`/`infer`/`eval`/`bench` commands.

pub mod dataset;
pub mod dsp;
mod error;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod postproc;
pub mod trainer;

pub use error::{Error, Result};
