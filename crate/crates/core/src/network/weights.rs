//! Parameter storage and the weight file format.
//!
//! A weight file is a UTF-8 text manifest followed by a little-endian
//! `f32` payload:
//!
//! ```text
//! dereverb-weights 1
//! config freq_bins=257 widths=16,32,64 heads=4 key_dim=32
//! tensor enc1.kernel 3,3,1,16 0
//! tensor enc1.bias 16 576
//! ...
//! payload 5059844
//! <payload bytes>
//! ```
//!
//! Each `tensor` line gives the name, the comma-separated shape and the
//! byte offset of its values inside the payload. Tensors are listed in
//! architecture order and packed back to back.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionConfig, AttentionWeights};
use super::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &str = "dereverb-weights 1";

/// Time-axis dilations of the four bottleneck convolutions.
pub const TCN_DILATIONS: [usize; 4] = [1, 2, 4, 8];

/// Spatial size of encoder/decoder kernels.
pub const KERNEL: usize = 3;

/// Network widths and attention shape, independent of the input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Channels of the three encoder blocks; the decoder mirrors them.
    pub widths: [usize; 3],
    pub attention: AttentionConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            attention: AttentionConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        self.attention.validate()
    }
}

/// Full architecture description for a given number of frequency bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    /// Unpadded number of frequency bins of the input magnitude.
    pub freq_bins: usize,
    pub widths: [usize; 3],
    pub attention: AttentionConfig,
}

/// Rounds up to the next multiple of 8 (three pooling stages).
pub fn padded_len(n: usize) -> usize {
    n.div_ceil(8) * 8
}

impl UNetConfig {
    pub fn new(freq_bins: usize, network: NetworkConfig) -> Self {
        Self {
            freq_bins,
            widths: network.widths,
            attention: network.attention,
        }
    }

    pub fn padded_freq(&self) -> usize {
        padded_len(self.freq_bins)
    }

    /// Feature size of one attention token.
    pub fn token_dim(&self) -> usize {
        self.padded_freq() / 8 * self.widths[2]
    }

    /// Ordered `(name, shape)` of every parameter tensor.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let [w1, w2, w3] = self.widths;
        let d = self.token_dim();
        let inner = self.attention.inner_dim();
        let mut out = Vec::new();
        let mut conv = |name: &str, kf: usize, kt: usize, cin: usize, cout: usize| {
            out.push((format!("{name}.kernel"), vec![kf, kt, cin, cout]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        conv("enc1", KERNEL, KERNEL, 1, w1);
        conv("enc2", KERNEL, KERNEL, w1, w2);
        conv("enc3", KERNEL, KERNEL, w2, w3);
        for i in 1..=TCN_DILATIONS.len() {
            conv(&format!("tcn{i}"), 1, KERNEL, w3, w3);
        }
        for proj in ["query", "key", "value"] {
            out.push((format!("attn.{proj}"), vec![d, inner]));
            out.push((format!("attn.{proj}_bias"), vec![inner]));
        }
        out.push(("attn.output".into(), vec![inner, d]));
        out.push(("attn.output_bias".into(), vec![d]));
        let mut conv = |name: &str, cin: usize, cout: usize| {
            out.push((format!("{name}.kernel"), vec![KERNEL, KERNEL, cin, cout]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        conv("dec3", w3 + w3, w3);
        conv("dec2", w3 + w2, w2);
        conv("dec1", w2 + w1, w1);
        out.push(("head.kernel".into(), vec![1, 1, w1, 1]));
        out.push(("head.bias".into(), vec![1]));
        out
    }

    fn header_line(&self) -> String {
        let [a, b, c] = self.widths;
        format!(
            "config freq_bins={} widths={a},{b},{c} heads={} key_dim={}",
            self.freq_bins, self.attention.heads, self.attention.key_dim
        )
    }

    fn parse_header(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed config line '{line}'"));
        let mut parts = line.split_whitespace();
        if parts.next() != Some("config") {
            return Err(bad());
        }
        let (mut freq, mut widths, mut heads, mut key_dim) = (None, None, None, None);
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(bad)?;
            match k {
                "freq_bins" => freq = v.parse().ok(),
                "heads" => heads = v.parse().ok(),
                "key_dim" => key_dim = v.parse().ok(),
                "widths" => {
                    let w: Vec<usize> = v
                        .split(',')
                        .map(|s| s.parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    widths = <[usize; 3]>::try_from(w).ok();
                }
                _ => return Err(bad()),
            }
        }
        Ok(Self {
            freq_bins: freq.ok_or_else(bad)?,
            widths: widths.ok_or_else(bad)?,
            attention: AttentionConfig {
                heads: heads.ok_or_else(bad)?,
                key_dim: key_dim.ok_or_else(bad)?,
            },
        })
    }
}

/// One named parameter. `tensor` holds the values with the logical shape
/// left-padded to four axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub tensor: Tensor,
}

impl Param {
    fn new(name: String, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut shape = [1usize; 4];
        shape[4 - dims.len()..].copy_from_slice(&dims);
        let tensor = Tensor::from_vec(shape, data)?;
        Ok(Self { name, dims, tensor })
    }

    pub fn values(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetWeights {
    config: UNetConfig,
    params: Vec<Param>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl UNetWeights {
    /// All-zero parameters.
    pub fn zeros(config: UNetConfig) -> Self {
        let params = config
            .layout()
            .into_iter()
            .map(|(name, dims)| {
                let n = dims.iter().product();
                Param::new(name, dims, vec![0.0; n]).expect("layout shapes are consistent")
            })
            .collect();
        Self { config, params }
    }

    /// Glorot-uniform kernels and projections, zero biases. Values are
    /// stored at `f32` precision so checkpoints round-trip exactly.
    pub fn init(config: UNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(config);
        for p in &mut w.params {
            if p.dims.len() < 2 {
                continue;
            }
            let (fan_in, fan_out) = match p.dims[..] {
                [kf, kt, cin, cout] => (kf * kt * cin, kf * kt * cout),
                [rows, cols] => (rows, cols),
                _ => unreachable!(),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in p.values_mut() {
                *v = round_f32(rng.random_range(-limit..limit));
            }
        }
        w
    }

    pub fn from_params(config: UNetConfig, params: Vec<Param>) -> Result<Self> {
        let w = Self { config, params };
        w.validate()?;
        Ok(w)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn kernel(&self, layer: &str) -> &Tensor {
        &self.param(&format!("{layer}.kernel")).tensor
    }

    pub fn bias(&self, layer: &str) -> &[f64] {
        self.param(&format!("{layer}.bias")).values()
    }

    pub fn attention(&self) -> AttentionWeights<'_> {
        let v = |n: &str| self.param(n).values();
        AttentionWeights {
            query: v("attn.query"),
            query_bias: v("attn.query_bias"),
            key: v("attn.key"),
            key_bias: v("attn.key_bias"),
            value: v("attn.value"),
            value_bias: v("attn.value_bias"),
            output: v("attn.output"),
            output_bias: v("attn.output_bias"),
        }
    }

    /// Checks names, order, shapes and finiteness against the architecture.
    pub fn validate(&self) -> Result<()> {
        self.config
            .widths
            .iter()
            .all(|&w| w > 0)
            .then_some(())
            .ok_or_else(|| Error::Validation("network widths must be positive".into()))?;
        self.config
            .attention
            .validate()
            .map_err(|e| Error::Validation(e.to_string()))?;
        let layout = self.config.layout();
        if layout.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "architecture has {} tensors, weights have {}",
                layout.len(),
                self.params.len()
            )));
        }
        for ((name, dims), p) in layout.iter().zip(&self.params) {
            if &p.name != name {
                return Err(Error::Validation(format!(
                    "expected tensor '{name}', found '{}'",
                    p.name
                )));
            }
            if &p.dims != dims {
                return Err(Error::Validation(format!(
                    "tensor '{name}' has shape {:?}, architecture needs {dims:?}",
                    p.dims
                )));
            }
            if !p.tensor.all_finite() {
                return Err(Error::Validation(format!("tensor '{name}' has non-finite values")));
            }
        }
        Ok(())
    }

    /// Serializes to the manifest-plus-payload format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\n{}\n", self.config.header_line());
        let mut payload = Vec::with_capacity(self.param_count() * 4);
        for p in &self.params {
            let dims: Vec<String> = p.dims.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(header, "tensor {} {} {}", p.name, dims.join(","), payload.len());
            for &v in p.values() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let _ = writeln!(header, "payload {}", payload.len());
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("unterminated manifest".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("manifest is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(Error::Format("not a dereverb weight file".into()));
        }
        let config = UNetConfig::parse_header(next_line()?)?;
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let payload_len = loop {
            let line = next_line()?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[..] {
                ["tensor", name, dims, offset] => {
                    let dims = dims
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Format(format!("bad shape in '{line}'")))?;
                    if dims.is_empty() || dims.len() > 4 {
                        return Err(Error::Format(format!("bad rank in '{line}'")));
                    }
                    let offset = offset
                        .parse()
                        .map_err(|_| Error::Format(format!("bad offset in '{line}'")))?;
                    entries.push((name.to_string(), dims, offset));
                }
                ["payload", n] => {
                    break n
                        .parse::<usize>()
                        .map_err(|_| Error::Format(format!("bad payload size '{n}'")))?
                }
                _ => return Err(Error::Format(format!("unexpected manifest line '{line}'"))),
            }
        };
        let payload = &bytes[pos..];
        if payload.len() != payload_len {
            return Err(Error::Format(format!(
                "payload holds {} bytes, manifest declares {payload_len}",
                payload.len()
            )));
        }
        let mut params = Vec::with_capacity(entries.len());
        for (i, (name, dims, offset)) in entries.iter().enumerate() {
            let end = entries.get(i + 1).map_or(payload_len, |e| e.2);
            let count: usize = dims.iter().product();
            if end < *offset || end - offset != 4 * count {
                return Err(Error::Validation(format!(
                    "tensor '{name}' declares shape {dims:?} ({count} values) but its payload span holds {} bytes",
                    end.saturating_sub(*offset)
                )));
            }
            let data = payload[*offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            params.push(Param::new(name.clone(), dims.clone(), data)?);
        }
        Self::from_params(config, params)
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
