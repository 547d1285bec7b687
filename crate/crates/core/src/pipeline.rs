//! End-to-end configuration and the commands behind the command-line tool.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    chunk_pairs, convolve_rir, load_dataset, read_manifest, read_pair, synth_rir, wav_read, wav_write, write_manifest,
    write_pair, ManifestRow,
};
use crate::dsp::{istft, stft, AudioBuffer, StftConfig};
use crate::loss::LossConfig;
use crate::mask::{apply_mask, oracle_mask, MagnitudeMask, MaskConfig};
use crate::metrics::{spectral_mse, srmr, SrmrConfig};
use crate::network::{unet_forward, NetworkConfig, UNetWeights};
use crate::postproc::{eq_boost, magnitude_grid, spectral_gate, split_chunks, stitch_chunks, PostprocConfig};
use crate::trainer::{train_with, TrainConfig, TrainOutcome, TrainSetup};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftSettings {
    pub fft_size: usize,
    pub hop: usize,
}

impl Default for StftSettings {
    fn default() -> Self {
        Self {
            fft_size: 512,
            hop: 256,
        }
    }
}

/// Synthetic room set used by `synth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_rirs: usize,
    /// Reverberation times are spaced evenly over this range, seconds.
    pub t60_min: f64,
    pub t60_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_rirs: 13,
            t60_min: 0.5,
            t60_max: 3.5,
        }
    }
}

impl SynthConfig {
    pub fn t60s(&self) -> Vec<f64> {
        if self.n_rirs == 1 {
            return vec![self.t60_min];
        }
        let step = (self.t60_max - self.t60_min) / (self.n_rirs - 1) as f64;
        (0..self.n_rirs).map(|k| self.t60_min + step * k as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sample_rate: u32,
    /// Samples per processing chunk; a multiple of the hop.
    pub chunk_len: usize,
    pub weights_path: PathBuf,
    pub stft: StftSettings,
    pub mask: MaskConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub postproc: PostprocConfig,
    pub srmr: SrmrConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            chunk_len: 16384,
            weights_path: PathBuf::from("weights.bin"),
            stft: StftSettings::default(),
            mask: MaskConfig::default(),
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            postproc: PostprocConfig::default(),
            srmr: SrmrConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML; absent fields keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn stft_config(&self) -> Result<StftConfig> {
        StftConfig::new(self.stft.fft_size, self.stft.hop).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        let stft = self.stft_config()?;
        if self.chunk_len < stft.fft_size() || !self.chunk_len.is_multiple_of(stft.hop()) {
            return Err(Error::Config(format!(
                "chunk_len {} must be a multiple of the hop {} and at least one FFT frame",
                self.chunk_len,
                stft.hop()
            )));
        }
        if 2 * self.postproc.overlap_samples(self.chunk_len) >= self.chunk_len {
            return Err(Error::Config("chunk overlap leaves no room between seams".into()));
        }
        if self.synth.n_rirs == 0 || !(self.synth.t60_min > 0.0 && self.synth.t60_min <= self.synth.t60_max) {
            return Err(Error::Config(
                "synth needs at least one RIR and 0 < t60_min <= t60_max".into(),
            ));
        }
        self.mask.validate()?;
        self.network.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.postproc.validate()?;
        self.srmr.validate(self.sample_rate)
    }

    fn check_rate(&self, audio: &AudioBuffer, what: &str) -> Result<()> {
        if audio.sample_rate() != self.sample_rate {
            return Err(Error::invalid(format!(
                "{what} is sampled at {} Hz, expected {} Hz",
                audio.sample_rate(),
                self.sample_rate
            )));
        }
        Ok(())
    }
}

/// Where the per-chunk mask comes from.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    Network(&'a UNetWeights),
    /// Ground-truth mask computed against the clean reference.
    Oracle(&'a AudioBuffer),
    /// All-zero mask: the signal passes through unmasked.
    Identity,
}

/// How a command should obtain masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskMode {
    Network(PathBuf),
    Oracle,
    Identity,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ChunkTiming {
    pub stft: Duration,
    pub forward: Duration,
    pub post: Duration,
}

impl ChunkTiming {
    pub fn total(&self) -> Duration {
        self.stft + self.forward + self.post
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferReport {
    pub chunks: Vec<ChunkTiming>,
    /// Stitching, trimming and EQ of the whole output.
    pub finish: Duration,
    /// Wall time of the whole call.
    pub wall: Duration,
    pub input_len: usize,
    pub output_len: usize,
    pub sample_rate: u32,
}

impl InferReport {
    pub fn breakdown(&self) -> ChunkTiming {
        let mut sum = self.chunks.iter().fold(ChunkTiming::default(), |a, c| ChunkTiming {
            stft: a.stft + c.stft,
            forward: a.forward + c.forward,
            post: a.post + c.post,
        });
        sum.post += self.finish;
        sum
    }

    pub fn real_time_factor(&self) -> f64 {
        self.wall.as_secs_f64() / (self.input_len as f64 / self.sample_rate as f64)
    }
}

/// Chunked dereverberation: per chunk STFT, mask, mask application, gate
/// and ISTFT; then crossfade stitching and EQ of the whole signal.
pub fn dereverberate(
    audio: &AudioBuffer,
    source: MaskSource<'_>,
    cfg: &PipelineConfig,
) -> Result<(AudioBuffer, InferReport)> {
    let start = Instant::now();
    cfg.check_rate(audio, "input")?;
    if audio.is_empty() {
        return Err(Error::invalid("input audio is empty"));
    }
    let stft_cfg = cfg.stft_config()?;
    if let MaskSource::Network(w) = source {
        if w.config().freq_bins != stft_cfg.bins() {
            return Err(Error::Validation(format!(
                "weights expect {} frequency bins, the STFT produces {}",
                w.config().freq_bins,
                stft_cfg.bins()
            )));
        }
    }
    let overlap = cfg.postproc.overlap_samples(cfg.chunk_len);
    let chunks = split_chunks(audio, cfg.chunk_len, overlap)?;
    let clean_chunks = match source {
        MaskSource::Oracle(clean) => {
            cfg.check_rate(clean, "clean reference")?;
            if clean.len() != audio.len() {
                return Err(Error::invalid(format!(
                    "clean reference has {} samples, input has {}",
                    clean.len(),
                    audio.len()
                )));
            }
            Some(split_chunks(clean, cfg.chunk_len, overlap)?)
        }
        _ => None,
    };

    let mut timings = Vec::with_capacity(chunks.len());
    let mut outputs = Vec::with_capacity(chunks.len());
    for (i, chunk) in chunks.iter().enumerate() {
        let t0 = Instant::now();
        let spec = stft(chunk, &stft_cfg)?;
        let mag = spec.magnitude();
        let t1 = Instant::now();
        let mask = match source {
            MaskSource::Network(w) => unet_forward(w, &mag)?,
            MaskSource::Oracle(_) => {
                let clean = &clean_chunks.as_ref().expect("split above")[i];
                oracle_mask(&mag, &stft(clean, &stft_cfg)?.magnitude(), &cfg.mask)?
            }
            MaskSource::Identity => MagnitudeMask::constant(mag.dim(), 0.0)?,
        };
        let t2 = Instant::now();
        let gated = spectral_gate(&apply_mask(&spec, &mask)?, &cfg.postproc);
        outputs.push(istft(&gated)?.resized(cfg.chunk_len));
        let t3 = Instant::now();
        timings.push(ChunkTiming {
            stft: t1 - t0,
            forward: t2 - t1,
            post: t3 - t2,
        });
    }

    let t4 = Instant::now();
    let stitched = stitch_chunks(&outputs, overlap)?.resized(audio.len());
    let out = eq_boost(&stitched, &cfg.postproc);
    if out.samples().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            layer: "postproc".into(),
            detail: "output audio is not finite".into(),
        });
    }
    let finish = t4.elapsed();
    let report = InferReport {
        chunks: timings,
        finish,
        wall: start.elapsed(),
        input_len: audio.len(),
        output_len: out.len(),
        sample_rate: audio.sample_rate(),
    };
    Ok((out, report))
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_wav = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if is_wav && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthReport {
    pub rows: Vec<ManifestRow>,
    /// One message per input file that could not be used.
    pub warnings: Vec<String>,
}

/// Convolves every clean WAV in `clean_dir` with a seeded random choice of
/// synthetic RIRs and writes chunked pairs plus a manifest to `out_dir`.
pub fn cmd_synth(clean_dir: &Path, out_dir: &Path, cfg: &PipelineConfig, seed: u64) -> Result<SynthReport> {
    cfg.validate()?;
    let files = wav_files(clean_dir)?;
    if files.is_empty() {
        return Err(Error::invalid(format!("no WAV files in {}", clean_dir.display())));
    }
    let t60s = cfg.synth.t60s();
    let rirs = t60s
        .iter()
        .enumerate()
        .map(|(k, &t60)| {
            let len = (t60 * cfg.sample_rate as f64).ceil() as usize;
            synth_rir(t60, len.max(1), seed.wrapping_add(k as u64), cfg.sample_rate)
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for path in &files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("clip").to_string();
        let pick = rng.random_range(0..rirs.len());
        let result = wav_read(path).and_then(|clean| {
            cfg.check_rate(&clean, &path.display().to_string())?;
            let reverb = convolve_rir(&clean, &rirs[pick])?;
            chunk_pairs(&clean, &reverb, cfg.chunk_len, rirs[pick].label())
        });
        match result {
            Ok(pairs) => {
                for (k, pair) in pairs.iter().enumerate() {
                    let id = format!("{stem}_{k:03}");
                    write_pair(out_dir, &id, pair)?;
                    rows.push(ManifestRow {
                        id,
                        rir_label: pair.rir_label.clone(),
                        t60: t60s[pick],
                    });
                }
            }
            Err(e) => warnings.push(format!("skipping {}: {e}", path.display())),
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!(
            "no usable audio in {}: {}",
            clean_dir.display(),
            warnings.join("; ")
        )));
    }
    write_manifest(out_dir, &rows)?;
    Ok(SynthReport { rows, warnings })
}

/// Path of the training log written next to a checkpoint.
pub fn train_log_path(weights: &Path) -> PathBuf {
    let mut name = weights.as_os_str().to_owned();
    name.push(".log");
    PathBuf::from(name)
}

#[derive(Debug, Serialize)]
struct LogHeader {
    learning_rate: f64,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    train_pairs: usize,
    val_pairs: usize,
}

/// Trains on the dataset in `dataset_dir`, writing the best checkpoint to
/// `out_weights` and a JSON-lines log beside it.
pub fn cmd_train(dataset_dir: &Path, out_weights: &Path, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (_, pairs) = load_dataset(dataset_dir)?;
    if pairs.len() < cfg.train.batch_size || pairs.len() < 2 {
        return Err(Error::invalid(format!(
            "dataset {} has {} pairs, need at least max(batch_size, 2) = {}",
            dataset_dir.display(),
            pairs.len(),
            cfg.train.batch_size.max(2)
        )));
    }
    let setup = TrainSetup {
        stft: cfg.stft_config()?,
        mask: cfg.mask,
        network: cfg.network,
        train: cfg.train,
        loss: cfg.loss,
    };
    let log_path = train_log_path(out_weights);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let n_val = crate::trainer::split_indices(pairs.len(), cfg.train.seed)?.1.len();
    let header = LogHeader {
        learning_rate: cfg.train.learning_rate,
        batch_size: cfg.train.batch_size,
        epochs: cfg.train.epochs,
        seed: cfg.train.seed,
        train_pairs: pairs.len() - n_val,
        val_pairs: n_val,
    };
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "{}", serde_json::to_string(&header).expect("plain data")).map_err(io)?;
    let mut write_err = None;
    let outcome = train_with(&pairs, &setup, |entry| {
        if let Err(e) = writeln!(log, "{}", entry.to_log_line()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    outcome.weights.save(out_weights)?;
    Ok(outcome)
}

fn load_source(mode: &MaskMode) -> Result<Option<UNetWeights>> {
    match mode {
        MaskMode::Network(path) => Ok(Some(UNetWeights::load(path)?)),
        _ => Ok(None),
    }
}

fn source<'a>(
    weights: &'a Option<UNetWeights>,
    mode: &MaskMode,
    clean: Option<&'a AudioBuffer>,
) -> Result<MaskSource<'a>> {
    Ok(match mode {
        MaskMode::Network(_) => MaskSource::Network(weights.as_ref().expect("loaded for network mode")),
        MaskMode::Identity => MaskSource::Identity,
        MaskMode::Oracle => {
            MaskSource::Oracle(clean.ok_or_else(|| Error::invalid("oracle mode needs a clean reference"))?)
        }
    })
}

/// Dereverberates one file. Oracle mode requires `clean`.
pub fn cmd_infer(
    input: &Path,
    output: &Path,
    mode: &MaskMode,
    clean: Option<&Path>,
    cfg: &PipelineConfig,
) -> Result<InferReport> {
    cfg.validate()?;
    let weights = load_source(mode)?;
    let audio = wav_read(input)?;
    let clean = clean.map(wav_read).transpose()?;
    let (out, report) = dereverberate(&audio, source(&weights, mode, clean.as_ref())?, cfg)?;
    wav_write(output, &out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub repeats: usize,
    pub chunks: usize,
    pub audio_seconds: f64,
    /// Wall time of every repeat, seconds.
    pub runs: Vec<f64>,
    pub median_total: f64,
    pub median_chunk: f64,
    pub real_time_factor: f64,
    /// Breakdown of the median run, seconds.
    pub stft: f64,
    pub forward: f64,
    pub post: f64,
}

impl BenchReport {
    /// Relative gap between the breakdown sum and the measured total.
    pub fn accounting_error(&self) -> f64 {
        ((self.stft + self.forward + self.post) - self.median_total).abs() / self.median_total
    }
}

/// Times [`dereverberate`] `repeats` times on the same audio.
pub fn bench(audio: &AudioBuffer, source: MaskSource<'_>, cfg: &PipelineConfig, repeats: usize) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let mut reports = (0..repeats)
        .map(|_| dereverberate(audio, source, cfg).map(|(_, r)| r))
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<f64> = reports.iter().map(|r| r.wall.as_secs_f64()).collect();
    reports.sort_by_key(|r| r.wall);
    let median = &reports[reports.len() / 2];
    let b = median.breakdown();
    let total = median.wall.as_secs_f64();
    Ok(BenchReport {
        repeats,
        chunks: median.chunks.len(),
        audio_seconds: audio.duration(),
        runs,
        median_total: total,
        median_chunk: total / median.chunks.len() as f64,
        real_time_factor: median.real_time_factor(),
        stft: b.stft.as_secs_f64(),
        forward: b.forward.as_secs_f64(),
        post: b.post.as_secs_f64(),
    })
}

pub fn cmd_bench(
    input: &Path,
    mode: &MaskMode,
    clean: Option<&Path>,
    cfg: &PipelineConfig,
    repeats: usize,
) -> Result<BenchReport> {
    cfg.validate()?;
    let weights = load_source(mode)?;
    let audio = wav_read(input)?;
    let clean = clean.map(wav_read).transpose()?;
    bench(&audio, source(&weights, mode, clean.as_ref())?, cfg, repeats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub rir_label: String,
    pub srmr_reverb: f64,
    pub srmr_output: f64,
    pub srmr_delta: f64,
    pub mse_reverb: f64,
    pub mse_output: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
}

/// Column order of the metric table.
pub const EVAL_COLUMNS: [&str; 7] = [
    "id",
    "rir_label",
    "srmr_reverb",
    "srmr_output",
    "srmr_delta",
    "mse_reverb",
    "mse_output",
];

fn tsv_row(r: &EvalRow) -> String {
    format!(
        "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}\t{:.6e}\n",
        r.id, r.rir_label, r.srmr_reverb, r.srmr_output, r.srmr_delta, r.mse_reverb, r.mse_output
    )
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Evaluates every manifest pair. Writes `metrics.tsv` (one row per pair),
/// `summary.tsv` (column means) and, under `grids/`, magnitude grids of the
/// clean, reverberant and output audio.
pub fn cmd_eval(dataset_dir: &Path, out_dir: &Path, mode: &MaskMode, cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let manifest = read_manifest(dataset_dir)?;
    let weights = load_source(mode)?;
    let stft_cfg = cfg.stft_config()?;
    let grid_dir = out_dir.join("grids");
    fs::create_dir_all(&grid_dir).map_err(|e| Error::io(&grid_dir, e))?;

    let mut rows = Vec::with_capacity(manifest.len());
    for m in &manifest {
        let pair = read_pair(dataset_dir, m)?;
        let (out, _) = dereverberate(&pair.reverberant, source(&weights, mode, Some(&pair.clean))?, cfg)?;
        let clean_spec = stft(&pair.clean, &stft_cfg)?;
        let reverb_spec = stft(&pair.reverberant, &stft_cfg)?;
        let out_spec = stft(&out, &stft_cfg)?;
        let srmr_reverb = srmr(&pair.reverberant, &cfg.srmr)?;
        let srmr_output = srmr(&out, &cfg.srmr)?;
        for (tag, spec) in [("clean", &clean_spec), ("reverb", &reverb_spec), ("output", &out_spec)] {
            write_text(
                &grid_dir.join(format!("{}_{tag}.txt", m.id)),
                &magnitude_grid(&spec.magnitude()),
            )?;
        }
        rows.push(EvalRow {
            id: m.id.clone(),
            rir_label: m.rir_label.clone(),
            srmr_reverb,
            srmr_output,
            srmr_delta: srmr_output - srmr_reverb,
            mse_reverb: spectral_mse(&reverb_spec, &clean_spec)?,
            mse_output: spectral_mse(&out_spec, &clean_spec)?,
        });
    }
    let n = rows.len().max(1) as f64;
    let avg = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean = EvalRow {
        id: "mean".into(),
        rir_label: "-".into(),
        srmr_reverb: avg(|r| r.srmr_reverb),
        srmr_output: avg(|r| r.srmr_output),
        srmr_delta: avg(|r| r.srmr_delta),
        mse_reverb: avg(|r| r.mse_reverb),
        mse_output: avg(|r| r.mse_output),
    };
    let header = EVAL_COLUMNS.join("\t") + "\n";
    let table: String = rows.iter().map(tsv_row).collect();
    write_text(&out_dir.join("metrics.tsv"), &(header.clone() + &table))?;
    write_text(&out_dir.join("summary.tsv"), &(header + &tsv_row(&mean)))?;
    Ok(EvalReport { rows, mean })
}
