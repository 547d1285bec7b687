mod common;

use std::fs;
use std::path::Path;

use common::{speech_like, FS};
use dereverb_core::dataset::{load_dataset, read_manifest, wav_read, wav_write};
use dereverb_core::network::UNetWeights;
use dereverb_core::pipeline::{
    cmd_bench, cmd_eval, cmd_infer, cmd_synth, cmd_train, dereverberate, train_log_path, MaskMode, MaskSource,
    PipelineConfig, EVAL_COLUMNS,
};
use dereverb_core::Error;
use tempfile::TempDir;

/// Small geometry so the whole chain trains and evaluates in seconds.
fn small_config() -> PipelineConfig {
    PipelineConfig::from_toml(
        r#"
        chunk_len = 8192

        [stft]
        fft_size = 64
        hop = 32

        [network]
        widths = [2, 4, 8]

        [train]
        epochs = 3
        batch_size = 1
        learning_rate = 0.003
        seed = 5

        [loss]
        td_ramp_epochs = 2
        "#,
    )
    .unwrap()
}

/// Two 20000-sample clips: three 8192-sample chunks each.
fn clean_dir(root: &Path) -> std::path::PathBuf {
    let dir = root.join("clean");
    fs::create_dir_all(&dir).unwrap();
    for (name, seed) in [("alpha", 1), ("beta", 2)] {
        let clip = speech_like(seed, 1.25);
        assert_eq!(clip.len(), 20000);
        wav_write(dir.join(format!("{name}.wav")), &clip).unwrap();
    }
    dir
}

#[test]
fn synth_writes_chunked_pairs_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config();
    let out = tmp.path().join("data");
    let report = cmd_synth(&clean_dir(tmp.path()), &out, &cfg, 3).unwrap();
    assert!(report.warnings.is_empty());
    assert_eq!(report.rows.len(), 6);
    let ids: Vec<&str> = report.rows.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(
        ids,
        [
            "alpha_000",
            "alpha_001",
            "alpha_002",
            "beta_000",
            "beta_001",
            "beta_002"
        ]
    );
    assert_eq!(read_manifest(&out).unwrap(), report.rows);
    let (_, pairs) = load_dataset(&out).unwrap();
    for p in &pairs {
        assert_eq!(p.clean.len(), cfg.chunk_len);
        assert_eq!(p.reverberant.len(), cfg.chunk_len);
        assert!((p.clean.peak() - 1.0).abs() < 1e-3);
    }
    for row in &report.rows {
        assert!(cfg.synth.t60s().contains(&row.t60));
    }
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config();
    let clean = clean_dir(tmp.path());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    cmd_synth(&clean, &a, &cfg, 9).unwrap();
    cmd_synth(&clean, &b, &cfg, 9).unwrap();
    cmd_synth(&clean, &c, &cfg, 10).unwrap();
    let bytes = |d: &Path| fs::read(d.join("alpha_001_reverb.wav")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(
        fs::read(a.join("manifest.tsv")).unwrap(),
        fs::read(b.join("manifest.tsv")).unwrap()
    );
    let labels = |d: &Path| {
        read_manifest(d)
            .unwrap()
            .into_iter()
            .map(|r| r.rir_label)
            .collect::<Vec<_>>()
    };
    assert_ne!(labels(&a), labels(&c));
}

#[test]
fn default_room_set_has_distinct_labels() {
    let cfg = PipelineConfig::default();
    let t60s = cfg.synth.t60s();
    assert_eq!(t60s.len(), 13);
    let mut labels: Vec<String> = t60s
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            dereverb_core::dataset::synth_rir(t, 16, k as u64, FS)
                .unwrap()
                .label()
                .to_string()
        })
        .collect();
    labels.sort();
    labels.dedup();
    assert_eq!(labels.len(), 13);
}

#[test]
fn synth_rejects_directory_without_wavs() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    fs::write(empty.join("notes.txt"), "not audio").unwrap();
    let err = cmd_synth(&empty, &tmp.path().join("out"), &small_config(), 0).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn train_eval_infer_round() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config();
    let data = tmp.path().join("data");
    cmd_synth(&clean_dir(tmp.path()), &data, &cfg, 3).unwrap();

    let weights = tmp.path().join("model.bin");
    let outcome = cmd_train(&data, &weights, &cfg).unwrap();
    assert_eq!(outcome.log.len(), 3);
    assert_eq!(outcome.train_ids.len() + outcome.val_ids.len(), 6);
    let log = fs::read_to_string(train_log_path(&weights)).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["epochs"], 3);
    assert_eq!(
        lines[0]["train_pairs"].as_u64().unwrap() + lines[0]["val_pairs"].as_u64().unwrap(),
        6
    );
    assert_eq!(lines[3]["epoch"], 2);

    // The checkpoint stores f32 values.
    let loaded = UNetWeights::load(&weights).unwrap();
    for (a, b) in loaded.params().iter().zip(outcome.weights.params()) {
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }

    let again = tmp.path().join("again.bin");
    cmd_train(&data, &again, &cfg).unwrap();
    assert_eq!(fs::read(&weights).unwrap(), fs::read(&again).unwrap());

    let eval_dir = tmp.path().join("eval");
    let report = cmd_eval(&data, &eval_dir, &MaskMode::Network(weights.clone()), &cfg).unwrap();
    assert_eq!(report.rows.len(), 6);
    let table = fs::read_to_string(eval_dir.join("metrics.tsv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), EVAL_COLUMNS.join("\t"));
    assert_eq!(table.lines().count(), 7);
    assert_eq!(
        fs::read_to_string(eval_dir.join("summary.tsv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    for tag in ["clean", "reverb", "output"] {
        assert!(eval_dir.join("grids").join(format!("alpha_000_{tag}.txt")).is_file());
    }

    let input = data.join("beta_001_reverb.wav");
    let output = tmp.path().join("out.wav");
    let infer = cmd_infer(&input, &output, &MaskMode::Network(weights.clone()), None, &cfg).unwrap();
    let written = wav_read(&output).unwrap();
    assert_eq!(written.len(), wav_read(&input).unwrap().len());
    assert_eq!(infer.output_len, written.len());

    let bench = cmd_bench(&input, &MaskMode::Network(weights), None, &cfg, 3).unwrap();
    assert_eq!(bench.runs.len(), 3);
    assert!(bench.real_time_factor > 0.0);
}

#[test]
fn oracle_eval_improves_spectral_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config();
    let data = tmp.path().join("data");
    cmd_synth(&clean_dir(tmp.path()), &data, &cfg, 4).unwrap();
    let report = cmd_eval(&data, &tmp.path().join("eval"), &MaskMode::Oracle, &cfg).unwrap();
    for row in &report.rows {
        assert!(
            row.mse_output < row.mse_reverb,
            "{}: {} >= {}",
            row.id,
            row.mse_output,
            row.mse_reverb
        );
    }
}

#[test]
fn missing_weights_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let input = tmp.path().join("in.wav");
    wav_write(&input, &speech_like(3, 1.0)).unwrap();
    let mode = MaskMode::Network(tmp.path().join("absent.bin"));
    let err = cmd_infer(&input, &tmp.path().join("o.wav"), &mode, None, &small_config()).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn weights_for_other_geometry_are_rejected() {
    let cfg = small_config();
    let other = UNetWeights::init(dereverb_core::network::UNetConfig::new(257, cfg.network), 0);
    let audio = speech_like(4, 1.0);
    let err = dereverberate(&audio, MaskSource::Network(&other), &cfg).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
}

#[test]
fn dereverberation_is_deterministic_and_length_preserving() {
    let cfg = small_config();
    let audio = speech_like(6, 2.3);
    let w = UNetWeights::init(dereverb_core::network::UNetConfig::new(33, cfg.network), 2);
    let (a, _) = dereverberate(&audio, MaskSource::Network(&w), &cfg).unwrap();
    let (b, report) = dereverberate(&audio, MaskSource::Network(&w), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), audio.len());
    assert_eq!(report.input_len, audio.len());
    assert!(a.samples().iter().all(|v| v.is_finite()));
}
