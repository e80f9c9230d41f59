//! End-to-end checks of the `lam` binary: the full pipeline on a tiny
//! scene set, the exit-code contract, and byte-identical reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lam() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lam"))
}

fn run(args: &[&str]) -> Output {
    lam().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, want: i32, what: &str) {
    let got = out.status.code().expect("exit code");
    assert_eq!(
        got,
        want,
        "{what}: expected exit {want}, got {got}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small config: 4 channels, coarse grid, short windows, 2 bands.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        r#"
geometry = "tetra"
tessellation_points = 42
tessellation_neighbors = 5
sample_rate = 16000.0
window_len = 256
hop = 128
frames_per_csm = 8
f_lo_hz = 1500.0
f_hi_hz = 4500.0
n_bands = 2
az_bins = 24
el_bins = 12
seed = 7

[train]
learning_rate = 0.001
batch_size = 8
max_epochs = 3
patience = 5
"#,
    )
    .unwrap();
    path
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let data = tmp.path().join("data");
    let data_s = data.to_str().unwrap().to_owned();

    let out = run(&[
        "--config", cfg, "--out", &data_s, "simulate", "--scenes", "5", "--duration", "1.0",
    ]);
    assert_code(&out, 0, "simulate");
    assert!(stdout(&out).contains("5 scenes (4 train / 1 val)"), "{}", stdout(&out));
    assert!(data.join("manifest.toml").exists());
    assert!(data.join("scene_0000.wav").exists());
    assert!(data.join("scene_0000.lamc").exists());
    assert!(data.join("scene_0000_gt.csv").exists());

    let outdir = tmp.path().join("run");
    let outdir_s = outdir.to_str().unwrap().to_owned();
    let manifest = data.join("manifest.toml");
    let manifest_s = manifest.to_str().unwrap().to_owned();
    let out = run(&[
        "--config", cfg, "--out", &outdir_s, "train", "--manifest", &manifest_s,
    ]);
    assert_code(&out, 0, "train");
    let text = stdout(&out);
    assert!(text.contains("epoch    0"), "per-epoch losses printed:\n{text}");
    assert!(outdir.join("model.ckpt").exists());
    assert!(outdir.join("train_report.csv").exists());
    assert!(outdir.join("run.log").exists(), "sidecar log exists");

    let store = data.join("scene_0000.lamc");
    let store_s = store.to_str().unwrap().to_owned();
    let ckpt_s = outdir.join("model.ckpt").to_str().unwrap().to_owned();
    for method in ["das", "music", "lam"] {
        let mut args = vec![
            "--config", cfg, "--out", &outdir_s, "map", "--store", &store_s,
            "--method", method, "--prefix", method,
        ];
        if method == "music" {
            args.extend_from_slice(&["--sources", "1"]);
        }
        if method == "lam" {
            args.extend_from_slice(&["--checkpoint", &ckpt_s]);
        }
        let out = run(&args);
        assert_code(&out, 0, &format!("map --method {method}"));
        assert!(outdir.join(format!("{method}_intensities.csv")).exists());
        assert!(outdir.join(format!("{method}_sum.ppm")).exists());
    }
    let csv = std::fs::read_to_string(outdir.join("das_intensities.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("node,azimuth_deg,elevation_deg,band_"), "{header}");
    assert!(header.ends_with(",sum"), "{header}");
    assert_eq!(csv.lines().count(), 1 + 42, "one row per node");

    let est = outdir.join("est.csv");
    let est_s = est.to_str().unwrap().to_owned();
    let out = run(&[
        "--config", cfg, "--out", &outdir_s, "doae", "--store", &store_s,
        "--method", "das", "--frames", "10", "--estimates", &est_s,
    ]);
    assert_code(&out, 0, "doae");
    assert!(est.exists());

    let gt = data.join("scene_0000_gt.csv");
    let gt_s = gt.to_str().unwrap().to_owned();
    let out = run(&[
        "--config", cfg, "--out", &outdir_s, "eval", "--estimates", &est_s,
        "--truth", &gt_s, "--frames", "10",
    ]);
    assert_code(&out, 0, "eval");
    let text = stdout(&out);
    let line = text.lines().next().unwrap();
    // "LE <2 decimals> LR <1 decimal>"
    let parts: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(parts[0], "LE", "{line}");
    assert_eq!(parts[2], "LR", "{line}");
    assert_eq!(parts[1].split('.').nth(1).map(str::len), Some(2), "{line}");
    assert_eq!(parts[3].split('.').nth(1).map(str::len), Some(1), "{line}");
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();

    let mut artifacts: Vec<Vec<u8>> = Vec::new();
    for round in 0..2 {
        let data = tmp.path().join(format!("data{round}"));
        let data_s = data.to_str().unwrap().to_owned();
        let out = run(&["--config", cfg, "--out", &data_s, "simulate", "--scenes", "5"]);
        assert_code(&out, 0, "simulate");
        let manifest_s = data.join("manifest.toml").to_str().unwrap().to_owned();
        let out = run(&["--config", cfg, "--out", &data_s, "train", "--manifest", &manifest_s]);
        assert_code(&out, 0, "train");
        let store_s = data.join("scene_0001.lamc").to_str().unwrap().to_owned();
        let out = run(&[
            "--config", cfg, "--out", &data_s, "doae", "--store", &store_s, "--frames", "10",
        ]);
        assert_code(&out, 0, "doae");
        for name in [
            "manifest.toml",
            "scene_0001.lamc",
            "model.ckpt",
            "train_report.csv",
            "estimates.csv",
        ] {
            artifacts.push(std::fs::read(data.join(name)).unwrap());
        }
    }
    let half = artifacts.len() / 2;
    for i in 0..half {
        assert_eq!(artifacts[i], artifacts[half + i], "artifact {i} differs between reruns");
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let outdir = tmp.path().join("o");
    let outdir_s = outdir.to_str().unwrap().to_owned();

    // Unknown config key: 2.
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "banana = 1\n").unwrap();
    let out = run(&["--config", bad.to_str().unwrap(), "--out", &outdir_s, "simulate"]);
    assert_code(&out, 2, "unknown config key");

    // Invalid geometry name: 2, message names the field.
    let geo = tmp.path().join("geo.toml");
    std::fs::write(&geo, "geometry = \"octo\"\n").unwrap();
    let out = run(&[
        "--config", geo.to_str().unwrap(), "--out", &outdir_s, "simulate", "--scenes", "1",
    ]);
    assert_code(&out, 2, "bad geometry");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("geometry"),
        "stderr names the field"
    );

    // Missing config file: 3.
    let out = run(&["--config", "/nonexistent/cfg.toml", "--out", &outdir_s, "simulate"]);
    assert_code(&out, 3, "missing config file");

    // Missing input store: 3.
    let out = run(&["--out", &outdir_s, "map", "--store", "/nonexistent/x.lamc"]);
    assert_code(&out, 3, "missing store");

    // Corrupt store: 3.
    let junk = tmp.path().join("junk.lamc");
    std::fs::write(&junk, b"not a store").unwrap();
    let out = run(&["--out", &outdir_s, "map", "--store", junk.to_str().unwrap()]);
    assert_code(&out, 3, "corrupt store");

    // Unknown subcommand / bad usage: 2 (clap's default).
    let out = run(&["frobnicate"]);
    assert_code(&out, 2, "unknown subcommand");
}

#[test]
fn train_divergence_exits_numeric() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let data = tmp.path().join("data");
    let data_s = data.to_str().unwrap().to_owned();
    let out = run(&["--config", cfg, "--out", &data_s, "simulate", "--scenes", "5"]);
    assert_code(&out, 0, "simulate");
    let manifest_s = data.join("manifest.toml").to_str().unwrap().to_owned();
    let out = run(&[
        "--config", cfg, "--out", &data_s, "train", "--manifest", &manifest_s,
        "--lr", "1e9", "--max-epochs", "50",
    ]);
    assert_code(&out, 4, "diverging train run");
}

#[test]
fn check_grads_passes_on_small_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let outdir_s = tmp.path().join("o").to_str().unwrap().to_owned();
    let out = run(&[
        "--config", cfg.to_str().unwrap(), "--out", &outdir_s,
        "check-grads", "--pairs", "2", "--params", "40",
    ]);
    assert_code(&out, 0, "check-grads");
    assert!(stdout(&out).contains("all 2 gradient checks passed"), "{}", stdout(&out));
}

#[test]
fn upsample_train_fits_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let cfg_s = cfg.to_str().unwrap();
    let data = tmp.path().join("data");
    let data_s = data.to_str().unwrap().to_owned();
    // 4-channel scenes; "high" stores are the full 4 channels, "low" ones a
    // 2-channel subset of the same WAVs.
    let out = run(&[
        "--config", cfg_s, "--out", &data_s, "simulate", "--scenes", "6", "--duration", "2.0",
    ]);
    assert_code(&out, 0, "simulate");
    let lo = tmp.path().join("lo");
    let hi = tmp.path().join("hi");
    for id in 0..6 {
        let wav = data.join(format!("scene_{id:04}.wav"));
        let wav_s = wav.to_str().unwrap().to_owned();
        for (dir, channels) in [(&hi, None), (&lo, Some("0,2"))] {
            let dir_s = dir.to_str().unwrap().to_owned();
            let mut args = vec!["--config", cfg_s, "--out", &dir_s, "csm", "--wav", &wav_s];
            if let Some(ch) = channels {
                args.extend_from_slice(&["--channels", ch]);
            }
            let out = run(&args);
            assert_code(&out, 0, "csm");
        }
    }
    let outdir_s = tmp.path().join("o").to_str().unwrap().to_owned();
    let out = run(&[
        "--config", cfg_s, "--out", &outdir_s, "upsample-train",
        "--lo-dir", lo.to_str().unwrap(), "--hi-dir", hi.to_str().unwrap(),
    ]);
    assert_code(&out, 0, "upsample-train");
    let text = stdout(&out);
    assert!(text.contains("fitted 2 -> 4 channel upsampler"), "{text}");
    assert!(text.contains("held-out mean relative Frobenius error"), "{text}");
    assert!(Path::new(&outdir_s).join("upsampler.lamu").exists());
}
