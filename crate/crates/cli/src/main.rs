use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dereverb_core::pipeline::{self, MaskMode, PipelineConfig};

/// Residual-reverb-mask speech dereverberation.
#[derive(Debug, Parser)]
#[command(name = "dereverb", version)]
struct Cli {
    /// TOML configuration file; unspecified fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the training and synthesis seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct MaskArgs {
    /// Weight file (defaults to `weights_path` from the configuration).
    #[arg(long)]
    weights: Option<PathBuf>,

    /// Use ground-truth masks computed against a clean reference.
    #[arg(long, conflicts_with = "identity")]
    oracle: bool,

    /// Use an all-zero mask (pass-through control).
    #[arg(long)]
    identity: bool,
}

impl MaskArgs {
    fn mode(&self, cfg: &PipelineConfig) -> MaskMode {
        if self.oracle {
            MaskMode::Oracle
        } else if self.identity {
            MaskMode::Identity
        } else {
            MaskMode::Network(self.weights.clone().unwrap_or_else(|| cfg.weights_path.clone()))
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a reverberant/clean dataset from a directory of clean WAVs.
    Synth {
        clean_dir: PathBuf,
        out_dir: PathBuf,
        /// Number of synthetic rooms.
        #[arg(long)]
        n_rirs: Option<usize>,
    },
    /// Train the mask network; writes the best checkpoint and `<out>.log`.
    Train {
        dataset_dir: PathBuf,
        /// Output weight file (defaults to `weights_path`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also moves the end of the time-domain loss ramp to the last epoch.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Dereverberate one WAV file.
    Infer {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        mask: MaskArgs,
        /// Clean reference for --oracle.
        #[arg(long, required_if_eq("oracle", "true"))]
        clean: Option<PathBuf>,
    },
    /// Score a dataset: SRMR before/after, spectral error, magnitude grids.
    Eval {
        dataset_dir: PathBuf,
        out_dir: PathBuf,
        #[command(flatten)]
        mask: MaskArgs,
    },
    /// Time repeated inference on one file.
    Bench {
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[command(flatten)]
        mask: MaskArgs,
        #[arg(long, required_if_eq("oracle", "true"))]
        clean: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Synth {
            clean_dir,
            out_dir,
            n_rirs,
        } => {
            if let Some(n) = n_rirs {
                cfg.synth.n_rirs = n;
            }
            let report = pipeline::cmd_synth(&clean_dir, &out_dir, &cfg, cli.seed.unwrap_or(0))?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {} pairs to {}", report.rows.len(), out_dir.display());
        }
        Command::Train {
            dataset_dir,
            out,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.loss.td_ramp_epochs = e.saturating_sub(1);
            }
            let out = out.unwrap_or_else(|| cfg.weights_path.clone());
            let outcome = pipeline::cmd_train(&dataset_dir, &out, &cfg)?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "final epoch {}: train {:.6} val {:.6}",
                    last.epoch, last.total, last.val_total
                );
            }
            println!(
                "best epoch {} (val {:.6}) saved to {}",
                outcome.best_epoch,
                outcome.best_val,
                out.display()
            );
        }
        Command::Infer {
            input,
            output,
            mask,
            clean,
        } => {
            let report = pipeline::cmd_infer(&input, &output, &mask.mode(&cfg), clean.as_deref(), &cfg)?;
            println!("chunk\tstft_ms\tforward_ms\tpost_ms\ttotal_ms");
            for (i, c) in report.chunks.iter().enumerate() {
                println!(
                    "{i}\t{:.3}\t{:.3}\t{:.3}\t{:.3}",
                    ms(c.stft),
                    ms(c.forward),
                    ms(c.post),
                    ms(c.total())
                );
            }
            println!(
                "wrote {} ({} samples) in {:.3} ms, real-time factor {:.4}",
                output.display(),
                report.output_len,
                ms(report.wall),
                report.real_time_factor()
            );
        }
        Command::Eval {
            dataset_dir,
            out_dir,
            mask,
        } => {
            let report = pipeline::cmd_eval(&dataset_dir, &out_dir, &mask.mode(&cfg), &cfg)?;
            let m = &report.mean;
            println!(
                "{} pairs: SRMR {:.4} -> {:.4} (delta {:+.4}), spectral MSE {:.4e} -> {:.4e}",
                report.rows.len(),
                m.srmr_reverb,
                m.srmr_output,
                m.srmr_delta,
                m.mse_reverb,
                m.mse_output
            );
            println!("tables in {}", out_dir.display());
        }
        Command::Bench {
            input,
            repeats,
            mask,
            clean,
        } => {
            if repeats == 0 {
                bail!("--repeats must be at least 1");
            }
            let r = pipeline::cmd_bench(&input, &mask.mode(&cfg), clean.as_deref(), &cfg, repeats)?;
            println!("repeats\t{}", r.repeats);
            println!("chunks\t{}", r.chunks);
            println!("audio_s\t{:.4}", r.audio_seconds);
            println!("median_total_ms\t{:.3}", r.median_total * 1e3);
            println!("median_chunk_ms\t{:.3}", r.median_chunk * 1e3);
            println!("real_time_factor\t{:.5}", r.real_time_factor);
            println!("stft_ms\t{:.3}", r.stft * 1e3);
            println!("forward_ms\t{:.3}", r.forward * 1e3);
            println!("post_ms\t{:.3}", r.post * 1e3);
        }
    }
    Ok(())
}

/// The context chain down to the first library error, whose message
/// already includes its own cause.
fn describe(err: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in err.chain() {
        parts.push(cause.to_string());
        if cause.is::<dereverb_core::Error>() {
            break;
        }
    }
    parts.join(": ")
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<dereverb_core::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli).context("dereverb failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
