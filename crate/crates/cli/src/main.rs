//! `lam`: command-line pipeline for spherical acoustic mapping.
//!
//! Subcommands cover the whole loop: render synthetic scenes, turn audio
//! into cross-spectral stores, train the autoencoder, audit its gradients,
//! export acoustic maps, extract DoA estimates, score them, and fit the
//! channel upsampler. Every command is deterministic given its config and
//! seeds; re-runs produce byte-identical artifacts. Wall-clock timestamps
//! never enter output files, they go to `<out>/run.log`.
//!
//! Exit codes: 0 success, 2 bad config or usage, 3 missing or corrupt
//! input file, 4 numeric failure (divergence, non-finite values).

mod config;
mod heatmap;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lam_core::beamform::{das_map, music_spectrum, SphericalAcousticMap};
use lam_core::doae::{
    estimates_to_frames, evaluate, kmeans_doae, rasterize, read_estimates_csv,
    write_estimates_csv, DoaEstimate,
};
use lam_core::dsp::{
    csm_sequence, read_csm_store, read_wav, train_upsampler, upsample_sequence, write_csm_store,
    write_upsampler, CsmSequence, DspError,
};
use lam_core::geometry::{angles_from_direction, steering_matrix, SteeringMatrix, Tessellation};
use lam_core::lam::{forward, read_checkpoint, write_checkpoint, LamBandModel, LamModel};
use lam_core::nalgebra::Vector3;
use lam_core::ndarray::{Array2, Axis};
use lam_core::simulator::{
    make_dataset, speech_shaped_noise, white_noise, am_tone, DatasetConfig, DatasetManifest,
    GroundTruth, SceneSpec, SimError, SourceTrajectory,
};
use lam_core::train::{
    check_gradients, random_psd_csm, train, write_atomic, TrainError,
};
use lam_core::{mix_seed, SPEED_OF_SOUND};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use config::ExperimentConfig;

const EXIT_CONFIG: i32 = 2;
const EXIT_IO: i32 = 3;
const EXIT_NUMERIC: i32 = 4;

#[derive(Parser)]
#[command(
    name = "lam",
    version,
    about = "Spherical acoustic mapping: simulate, train, map, locate, score"
)]
struct Cli {
    /// Experiment config TOML; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread count; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for output artifacts and the run log.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset: WAV, CSM store, and ground truth per scene.
    Simulate(SimulateArgs),
    /// Compute a CSM store from a multichannel WAV file.
    Csm(CsmArgs),
    /// Train the acoustic-map autoencoder on a dataset manifest.
    Train(TrainArgs),
    /// Audit analytic gradients against finite differences on random inputs.
    CheckGrads(CheckGradsArgs),
    /// Export acoustic maps for one CSM window as CSV and heatmap images.
    Map(MapArgs),
    /// Extract per-frame DoA estimates from a CSM store.
    Doae(DoaeArgs),
    /// Score estimate CSVs against ground truth; prints LE and LR.
    Eval(EvalArgs),
    /// Fit the low-to-high channel CSM upsampler from paired stores.
    UpsampleTrain(UpsampleArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of scenes to render.
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    /// Scene length in seconds.
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    /// SNR in dB of sensor noise relative to mean summed source power.
    #[arg(long, default_value_t = 30.0)]
    snr_db: f64,
    /// Sources per scene are drawn uniformly from min..=max.
    #[arg(long, default_value_t = 1)]
    min_sources: usize,
    #[arg(long, default_value_t = 1)]
    max_sources: usize,
    /// Probability that a source moves (two-leg trajectory).
    #[arg(long, default_value_t = 0.0)]
    moving: f64,
    /// Source waveform family.
    #[arg(long, value_enum, default_value_t = Waveform::Speech)]
    waveform: Waveform,
}

#[derive(Copy, Clone, ValueEnum)]
enum Waveform {
    /// Low-pass filtered noise with a speech-like spectral tilt.
    Speech,
    /// White Gaussian noise.
    Noise,
    /// Amplitude-modulated tone with a random carrier inside the band range.
    AmTone,
}

#[derive(Args)]
struct CsmArgs {
    /// Input multichannel WAV.
    #[arg(long)]
    wav: PathBuf,
    /// Output store path; defaults to <out>/<wav stem>.lamc.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Optional channel subset, comma-separated indices like "0,8,16,24".
    #[arg(long)]
    channels: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest written by `simulate`.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint output; defaults to <out>/model.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Per-epoch loss CSV; defaults to <out>/train_report.csv.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Override train.learning_rate from the config.
    #[arg(long)]
    lr: Option<f64>,
    /// Override train.gamma from the config.
    #[arg(long)]
    gamma: Option<f64>,
    /// Override train.batch_size from the config.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override train.max_epochs from the config.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Override train.patience from the config.
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct CheckGradsArgs {
    /// Number of random model/CSM pairs to audit.
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    /// Parameters sampled per pair.
    #[arg(long, default_value_t = 200)]
    params: usize,
    /// Maximum allowed relative error against central differences.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Copy, Clone, PartialEq, ValueEnum)]
enum Method {
    Das,
    Music,
    Lam,
}

#[derive(Args)]
struct MapArgs {
    /// Input CSM store.
    #[arg(long)]
    store: PathBuf,
    /// Window index inside the store.
    #[arg(long, default_value_t = 0)]
    window: usize,
    #[arg(long, value_enum, default_value_t = Method::Das)]
    method: Method,
    /// Trained checkpoint; required with --method lam.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Source count assumed by MUSIC.
    #[arg(long, default_value_t = 2)]
    sources: usize,
    /// Filename prefix for artifacts inside <out>.
    #[arg(long, default_value = "map")]
    prefix: String,
}

#[derive(Args)]
struct DoaeArgs {
    /// Input CSM store.
    #[arg(long)]
    store: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Das)]
    method: Method,
    /// Trained checkpoint; required with --method lam.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Source count assumed by MUSIC.
    #[arg(long, default_value_t = 2)]
    sources: usize,
    /// Label-frame duration used to regroup window estimates, seconds.
    #[arg(long, default_value_t = 0.1)]
    frame_s: f64,
    /// Label frame count; inferred from the last window time when omitted.
    #[arg(long)]
    frames: Option<usize>,
    /// Output CSV; defaults to <out>/estimates.csv.
    #[arg(long)]
    estimates: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimate CSV (frame_index,azimuth_deg,elevation_deg,weight).
    #[arg(long)]
    estimates: PathBuf,
    /// Ground-truth CSV (frame_index,source_id,azimuth_deg,elevation_deg).
    #[arg(long)]
    truth: PathBuf,
    /// Drop matched pairs farther apart than this many degrees.
    #[arg(long)]
    gate_deg: Option<f64>,
    /// Label-frame duration of the ground truth, seconds.
    #[arg(long, default_value_t = 0.1)]
    frame_s: f64,
    /// Frame count; inferred from the largest frame index when omitted.
    #[arg(long)]
    frames: Option<usize>,
    /// Optional per-frame detail CSV.
    #[arg(long)]
    detail: Option<PathBuf>,
}

#[derive(Args)]
struct UpsampleArgs {
    /// Directory of low-channel CSM stores.
    #[arg(long)]
    lo_dir: PathBuf,
    /// Directory of high-channel CSM stores with matching filenames.
    #[arg(long)]
    hi_dir: PathBuf,
    /// Ridge strength relative to the mean input power.
    #[arg(long, default_value_t = 1e-3)]
    ridge: f64,
    /// Fraction of pairs (by sorted filename, from the end) held out.
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    /// Output model path; defaults to <out>/upsampler.lamu.
    #[arg(long)]
    model: Option<PathBuf>,
}

/// Failure with a process exit code. Subcommands map library errors onto
/// the exit contract at the call site, where the context (reading input vs
/// computing) is known.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::BadConfig(_) | TrainError::EmptyDataset { .. } | TrainError::NodeMismatch { .. } => {
            Failure::config(e.to_string())
        }
        TrainError::Io(_) => Failure::io(e.to_string()),
        _ => Failure::numeric(e.to_string()),
    }
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::Io(_) | SimError::Manifest(_) => Failure::io(e.to_string()),
        SimError::Dsp(inner) => dsp_failure(inner),
        _ => Failure::config(e.to_string()),
    }
}

fn dsp_failure(e: DspError) -> Failure {
    match e {
        DspError::Io(_) | DspError::Wav(_) | DspError::Format(_) => Failure::io(e.to_string()),
        DspError::NonFiniteSample { .. } => Failure::numeric(e.to_string()),
        _ => Failure::config(e.to_string()),
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let started = SystemTime::now();
    let timer = Instant::now();
    let out = cli.out.clone();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    };
    // Timestamps live only here so artifact files stay byte-identical
    // across reruns.
    let _ = append_run_log(&out, started, timer.elapsed().as_secs_f64(), code);
    std::process::exit(code);
}

fn append_run_log(out: &Path, started: SystemTime, elapsed: f64, code: i32) -> std::io::Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(out)?;
    let secs = started
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let argv: Vec<String> = std::env::args().collect();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("run.log"))?;
    writeln!(f, "{secs} {elapsed:.3}s exit={code} {}", argv.join(" "))
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::config("threads: must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(format!("threads: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::io(format!("cannot read config {}: {e}", p.display())))?;
            ExperimentConfig::parse(&text).map_err(Failure::config)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| Failure::io(format!("cannot create {}: {e}", cli.out.display())))?;
    let ctx = Ctx { cfg, out: cli.out };
    match &cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(&ctx, a),
        Cmd::Csm(a) => cmd_csm(&ctx, a),
        Cmd::Train(a) => cmd_train(&ctx, a),
        Cmd::CheckGrads(a) => cmd_check_grads(&ctx, a),
        Cmd::Map(a) => cmd_map(&ctx, a),
        Cmd::Doae(a) => cmd_doae(&ctx, a),
        Cmd::Eval(a) => cmd_eval(&ctx, a),
        Cmd::UpsampleTrain(a) => cmd_upsample_train(&ctx, a),
    }
}

/// Uniform direction on the unit sphere by rejection from the cube.
fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn cmd_simulate(ctx: &Ctx, args: &SimulateArgs) -> CmdResult {
    if args.min_sources == 0 || args.min_sources > args.max_sources || args.max_sources > 8 {
        return Err(Failure::config(format!(
            "source count range {}..={} must sit inside 1..=8",
            args.min_sources, args.max_sources
        )));
    }
    if !(args.duration > 0.0 && args.duration.is_finite()) {
        return Err(Failure::config("duration: must be positive"));
    }
    if !(0.0..=1.0).contains(&args.moving) {
        return Err(Failure::config("moving: must be in 0..=1"));
    }
    let cfg = &ctx.cfg;
    let geometry = cfg.resolve_geometry().map_err(Failure::config)?;
    let dataset_cfg = DatasetConfig {
        n_scenes: args.scenes,
        seed: cfg.seed,
        window_len: cfg.window_len,
        hop: cfg.hop,
        frames_per_csm: cfg.frames_per_csm,
        f_lo: cfg.f_lo_hz,
        f_hi: cfg.f_hi_hz,
        n_bands: cfg.n_bands,
    };
    let fs = cfg.sample_rate;
    let n_samples = (args.duration * fs).round() as usize;
    let manifest = make_dataset(
        &dataset_cfg,
        |_, scene_seed| {
            // Stream 1 for content; render_scene consumes the raw scene
            // seed for sensor noise, so the two never share a stream.
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene_seed, 1));
            let n_sources = rng.gen_range(args.min_sources..=args.max_sources);
            let mut sources = Vec::with_capacity(n_sources);
            for _ in 0..n_sources {
                let wave = match args.waveform {
                    Waveform::Speech => speech_shaped_noise(n_samples, fs, 0.15, &mut rng),
                    Waveform::Noise => white_noise(n_samples, 0.15, &mut rng),
                    Waveform::AmTone => {
                        let carrier = rng.gen_range(cfg.f_lo_hz..cfg.f_hi_hz);
                        am_tone(n_samples, fs, carrier, 4.0, 0.2)
                    }
                };
                let d0 = random_unit(&mut rng);
                let moves = rng.gen::<f64>() < args.moving;
                let source = if moves {
                    let d1 = random_unit(&mut rng);
                    SourceTrajectory::new(
                        wave,
                        fs,
                        vec![(0.0, d0), (args.duration / 2.0, d1)],
                        1.0,
                    )
                } else {
                    SourceTrajectory::static_source(wave, fs, d0, 1.0)
                }
                .expect("generated source parameters are valid");
                sources.push(source);
            }
            SceneSpec {
                sources,
                duration: args.duration,
                snr_db: args.snr_db,
                sample_rate: fs,
                geometry: geometry.clone(),
                seed: scene_seed,
            }
        },
        &ctx.out,
    )
    .map_err(sim_failure)?;
    let n_train = manifest.scenes_for("train").count();
    let n_val = manifest.scenes_for("validation").count();
    println!(
        "wrote {} scenes ({n_train} train / {n_val} val) to {}",
        manifest.scenes.len(),
        ctx.out.display()
    );
    for w in &manifest.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn parse_channel_list(spec: &str, available: usize) -> Result<Vec<usize>, Failure> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let idx: usize = part
            .trim()
            .parse()
            .map_err(|_| Failure::config(format!("channels: \"{part}\" is not an index")))?;
        if idx >= available {
            return Err(Failure::config(format!(
                "channels: index {idx} out of range for {available} channels"
            )));
        }
        if out.contains(&idx) {
            return Err(Failure::config(format!("channels: duplicate index {idx}")));
        }
        out.push(idx);
    }
    if out.is_empty() {
        return Err(Failure::config("channels: empty list"));
    }
    Ok(out)
}

fn cmd_csm(ctx: &Ctx, args: &CsmArgs) -> CmdResult {
    let audio = read_wav(&args.wav).map_err(dsp_failure)?;
    let audio = match &args.channels {
        Some(spec) => {
            let idx = parse_channel_list(spec, audio.channels())?;
            let sel = audio.samples().select(Axis(0), &idx);
            lam_core::dsp::MultichannelAudio::new(sel, audio.sample_rate())
                .map_err(dsp_failure)?
        }
        None => audio,
    };
    if (audio.sample_rate() - ctx.cfg.sample_rate).abs() > 1e-6 {
        return Err(Failure::config(format!(
            "wav sample rate {} does not match config sample_rate {}",
            audio.sample_rate(),
            ctx.cfg.sample_rate
        )));
    }
    let seq = csm_sequence(
        &audio,
        ctx.cfg.window_len,
        ctx.cfg.hop,
        ctx.cfg.frames_per_csm,
        &ctx.cfg.band_config(),
    )
    .map_err(dsp_failure)?;
    let store = args.store.clone().unwrap_or_else(|| {
        let stem = args
            .wav
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "store".into());
        ctx.out.join(format!("{stem}.lamc"))
    });
    write_csm_store(&store, &seq).map_err(dsp_failure)?;
    println!(
        "{} windows x {} bands, {} channels -> {}",
        seq.n_windows(),
        seq.n_bands(),
        seq.channels(),
        store.display()
    );
    Ok(())
}

fn load_split(
    manifest: &DatasetManifest,
    dir: &Path,
    split: &str,
) -> Result<Vec<CsmSequence>, Failure> {
    manifest
        .scenes_for(split)
        .map(|rec| read_csm_store(&dir.join(&rec.store)).map_err(dsp_failure))
        .collect()
}

fn cmd_train(ctx: &Ctx, args: &TrainArgs) -> CmdResult {
    let manifest = DatasetManifest::load(&args.manifest).map_err(sim_failure)?;
    let dir = args.manifest.parent().unwrap_or_else(|| Path::new("."));
    let train_set = load_split(&manifest, dir, "train")?;
    let val_set = load_split(&manifest, dir, "validation")?;
    if train_set.is_empty() {
        return Err(Failure::config("manifest has no train scenes"));
    }
    // Band centers are bin-snapped by the front end, so take them from the
    // data rather than recomputing from the config.
    let band_freqs = train_set[0].band_freqs().to_vec();
    let geometry = ctx.cfg.resolve_geometry().map_err(Failure::config)?;
    let tess = ctx.cfg.tessellation().map_err(Failure::config)?;
    if geometry.channels() != train_set[0].channels() {
        return Err(Failure::config(format!(
            "geometry {} has {} channels but stores have {}",
            geometry.name(),
            geometry.channels(),
            train_set[0].channels()
        )));
    }
    let steerings: Vec<SteeringMatrix> = band_freqs
        .iter()
        .map(|&hz| steering_matrix(&geometry, &tess, hz, SPEED_OF_SOUND))
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::config(e.to_string()))?;
    // The checkpoint carries the exact config used, so `map`/`doae` can
    // rebuild identical steering matrices later.
    let model = LamModel::init(steerings, ctx.cfg.to_toml(), ctx.cfg.seed)
        .map_err(|e| Failure::numeric(e.to_string()))?;
    let mut tc = ctx.cfg.train_config();
    if let Some(v) = args.lr {
        tc.learning_rate = v;
    }
    if let Some(v) = args.gamma {
        tc.gamma = v;
    }
    if let Some(v) = args.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = args.max_epochs {
        tc.max_epochs = v;
    }
    if let Some(v) = args.patience {
        tc.patience = v;
    }
    println!(
        "training {} bands on {} train / {} val scenes ({} parameters)",
        band_freqs.len(),
        train_set.len(),
        val_set.len(),
        model.parameter_count()
    );
    let (model, report) = train(model, &train_set, &val_set, &tess, &tc).map_err(train_failure)?;
    for band in &report.bands {
        for rec in &band.records {
            println!(
                "band {:8.1} Hz epoch {:4} train {:.6e} val {:.6e}",
                band.band_hz, rec.epoch, rec.train_loss, rec.val_loss
            );
        }
    }
    for band in &report.bands {
        println!(
            "band {:8.1} Hz best epoch {} val {:.6e}",
            band.band_hz, band.best_epoch, band.best_val_loss
        );
    }
    let ckpt_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| ctx.out.join("model.ckpt"));
    let tmp = ckpt_path.with_extension("ckpt.tmp");
    write_checkpoint(&tmp, &model).map_err(|e| Failure::io(e.to_string()))?;
    std::fs::rename(&tmp, &ckpt_path).map_err(|e| Failure::io(e.to_string()))?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| ctx.out.join("train_report.csv"));
    report
        .write_csv(&report_path)
        .map_err(|e| Failure::io(e.to_string()))?;
    println!(
        "checkpoint -> {} report -> {} ({:.1}s)",
        ckpt_path.display(),
        report_path.display(),
        report.wall_seconds
    );
    Ok(())
}

fn cmd_check_grads(ctx: &Ctx, args: &CheckGradsArgs) -> CmdResult {
    if args.pairs == 0 || args.params == 0 {
        return Err(Failure::config("pairs/params: must be at least 1"));
    }
    let cfg = &ctx.cfg;
    let geometry = cfg.resolve_geometry().map_err(Failure::config)?;
    let tess = cfg.tessellation().map_err(Failure::config)?;
    let width = (cfg.f_hi_hz - cfg.f_lo_hz) / cfg.n_bands as f64;
    let centers: Vec<f64> = (0..cfg.n_bands)
        .map(|i| cfg.f_lo_hz + (i as f64 + 0.5) * width)
        .collect();
    let mut failures = 0usize;
    for i in 0..args.pairs {
        let band_hz = centers[i % centers.len()];
        let steering = steering_matrix(&geometry, &tess, band_hz, SPEED_OF_SOUND)
            .map_err(|e| Failure::config(e.to_string()))?;
        let pair_seed = mix_seed(cfg.seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
        let init = LamBandModel::init(&steering, &mut rng);
        // Positive biases keep most ReLUs active so the audit exercises
        // real gradient paths instead of skipping everything as kinks.
        let band = LamBandModel::from_parts(
            init.b().clone(),
            init.kernels().clone(),
            [0.3; 4],
            band_hz,
        )
        .map_err(|e| Failure::numeric(e.to_string()))?;
        let csm = random_psd_csm(geometry.channels(), band_hz, &mut rng);
        let report = check_gradients(
            &band,
            &steering,
            &csm,
            tess.neighbor_lists(),
            cfg.train.gamma,
            args.params,
            args.tolerance,
            pair_seed,
        )
        .map_err(train_failure)?;
        println!(
            "pair {i:3} band {band_hz:8.1} Hz checked {:4} skipped {:4} max_rel {:.3e} {}",
            report.checked,
            report.skipped_kinks,
            report.max_rel_error,
            if report.passed { "pass" } else { "FAIL" }
        );
        if !report.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Failure::numeric(format!(
            "{failures} of {} gradient checks failed (tolerance {:.1e})",
            args.pairs, args.tolerance
        )));
    }
    println!(
        "all {} gradient checks passed (tolerance {:.1e})",
        args.pairs, args.tolerance
    );
    Ok(())
}

/// Everything needed to turn CSM windows into per-band acoustic maps.
enum MapEngine {
    Das {
        steerings: Vec<SteeringMatrix>,
    },
    Music {
        steerings: Vec<SteeringMatrix>,
        sources: usize,
    },
    Lam {
        model: LamModel,
    },
}

impl MapEngine {
    fn window_maps(
        &self,
        seq: &CsmSequence,
        w: usize,
    ) -> Result<Vec<SphericalAcousticMap>, Failure> {
        match self {
            MapEngine::Das { steerings } => (0..seq.n_bands())
                .map(|b| {
                    das_map(seq.get(w, b), &steerings[b])
                        .map_err(|e| Failure::numeric(e.to_string()))
                })
                .collect(),
            MapEngine::Music { steerings, sources } => (0..seq.n_bands())
                .map(|b| {
                    music_spectrum(seq.get(w, b), &steerings[b], *sources)
                        .map_err(|e| Failure::numeric(e.to_string()))
                })
                .collect(),
            MapEngine::Lam { model } => {
                let sub = CsmSequence::new(
                    vec![seq.window(w).to_vec()],
                    seq.band_freqs().to_vec(),
                    seq.channels(),
                    seq.sample_rate(),
                )
                .map_err(dsp_failure)?;
                let mut maps = forward(&sub, model).map_err(|e| Failure::numeric(e.to_string()))?;
                Ok(maps.remove(0))
            }
        }
    }

    fn all_maps(&self, seq: &CsmSequence) -> Result<Vec<Vec<SphericalAcousticMap>>, Failure> {
        if let MapEngine::Lam { model } = self {
            return forward(seq, model).map_err(|e| Failure::numeric(e.to_string()));
        }
        use rayon::prelude::*;
        (0..seq.n_windows())
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&w| self.window_maps(seq, w))
            .collect()
    }
}

/// Builds the engine plus the tessellation its maps live on. Baselines use
/// the command config; the trained model rebuilds geometry and grid from
/// the config blob embedded in its checkpoint so they always match.
fn build_engine(
    ctx: &Ctx,
    method: Method,
    checkpoint: Option<&PathBuf>,
    sources: usize,
    seq: &CsmSequence,
) -> Result<(MapEngine, Tessellation), Failure> {
    match method {
        Method::Das | Method::Music => {
            let geometry = ctx.cfg.resolve_geometry().map_err(Failure::config)?;
            if geometry.channels() != seq.channels() {
                return Err(Failure::config(format!(
                    "geometry {} has {} channels but store has {}",
                    geometry.name(),
                    geometry.channels(),
                    seq.channels()
                )));
            }
            let tess = ctx.cfg.tessellation().map_err(Failure::config)?;
            let steerings: Vec<SteeringMatrix> = seq
                .band_freqs()
                .iter()
                .map(|&hz| steering_matrix(&geometry, &tess, hz, SPEED_OF_SOUND))
                .collect::<Result<_, _>>()
                .map_err(|e| Failure::config(e.to_string()))?;
            let engine = match method {
                Method::Das => MapEngine::Das { steerings },
                _ => {
                    if sources == 0 || sources >= seq.channels() {
                        return Err(Failure::config(format!(
                            "sources: must be in 1..{} for MUSIC, got {sources}",
                            seq.channels()
                        )));
                    }
                    MapEngine::Music { steerings, sources }
                }
            };
            Ok((engine, tess))
        }
        Method::Lam => {
            let path = checkpoint.ok_or_else(|| {
                Failure::config("--checkpoint is required with --method lam")
            })?;
            let ckpt = read_checkpoint(path).map_err(|e| Failure::io(e.to_string()))?;
            let blob_cfg = ExperimentConfig::parse(&ckpt.config).map_err(|e| {
                Failure::config(format!("checkpoint has no usable embedded config: {e}"))
            })?;
            let geometry = blob_cfg.resolve_geometry().map_err(Failure::config)?;
            let tess = blob_cfg.tessellation().map_err(Failure::config)?;
            if geometry.channels() != ckpt.channels || tess.len() != ckpt.n_points {
                return Err(Failure::config(format!(
                    "checkpoint trained on {} channels x {} nodes, embedded config rebuilds {} x {}",
                    ckpt.channels,
                    ckpt.n_points,
                    geometry.channels(),
                    tess.len()
                )));
            }
            let steerings: Vec<SteeringMatrix> = ckpt
                .band_freqs
                .iter()
                .map(|&hz| steering_matrix(&geometry, &tess, hz, SPEED_OF_SOUND))
                .collect::<Result<_, _>>()
                .map_err(|e| Failure::config(e.to_string()))?;
            let model = LamModel::new(ckpt.bands, steerings, ckpt.config)
                .map_err(|e| Failure::config(e.to_string()))?;
            Ok((MapEngine::Lam { model }, tess))
        }
    }
}

fn cmd_map(ctx: &Ctx, args: &MapArgs) -> CmdResult {
    let seq = read_csm_store(&args.store).map_err(dsp_failure)?;
    if args.window >= seq.n_windows() {
        return Err(Failure::config(format!(
            "window {} out of range, store has {} windows",
            args.window,
            seq.n_windows()
        )));
    }
    let (engine, tess) = build_engine(ctx, args.method, args.checkpoint.as_ref(), args.sources, &seq)?;
    let maps = engine.window_maps(&seq, args.window)?;

    // One CSV with raw intensities: a column per band plus their sum.
    let mut csv = String::from("node,azimuth_deg,elevation_deg");
    for map in &maps {
        write!(csv, ",band_{:.0}hz", map.band_hz()).unwrap();
    }
    csv.push_str(",sum\n");
    let mut sums = vec![0.0; tess.len()];
    for node in 0..tess.len() {
        let (az, el) = angles_from_direction(&tess.points()[node]);
        write!(csv, "{node},{az},{el}").unwrap();
        let mut total = 0.0;
        for map in &maps {
            let v = map.intensities()[node];
            total += v;
            write!(csv, ",{v}").unwrap();
        }
        sums[node] = total;
        writeln!(csv, ",{total}").unwrap();
    }
    let csv_path = ctx.out.join(format!("{}_intensities.csv", args.prefix));
    write_atomic(&csv_path, csv.as_bytes()).map_err(|e| Failure::io(e.to_string()))?;

    let raster = rasterize(&maps, &tess, ctx.cfg.az_bins, ctx.cfg.el_bins)
        .map_err(|e| Failure::numeric(e.to_string()))?;
    for (b, map) in maps.iter().enumerate() {
        let grid = raster.values().index_axis(Axis(0), b).to_owned();
        let img_path = ctx
            .out
            .join(format!("{}_band{b:02}_{:.0}hz.ppm", args.prefix, map.band_hz()));
        heatmap::write_gray_ppm(&img_path, &grid).map_err(|e| Failure::io(e.to_string()))?;
    }
    let sum_map = SphericalAcousticMap::new(sums, maps[0].band_hz());
    let sum_raster = rasterize(
        std::slice::from_ref(&sum_map),
        &tess,
        ctx.cfg.az_bins,
        ctx.cfg.el_bins,
    )
    .map_err(|e| Failure::numeric(e.to_string()))?;
    let sum_grid: Array2<f64> = sum_raster.values().index_axis(Axis(0), 0).to_owned();
    let sum_path = ctx.out.join(format!("{}_sum.ppm", args.prefix));
    heatmap::write_gray_ppm(&sum_path, &sum_grid).map_err(|e| Failure::io(e.to_string()))?;

    for map in &maps {
        let (node, peak) = map.argmax();
        let (az, el) = angles_from_direction(&tess.points()[node]);
        println!(
            "band {:8.1} Hz peak node {node} az {az:7.2} el {el:6.2} intensity {peak:.4e}",
            map.band_hz()
        );
    }
    println!(
        "window {} -> {} and {} heatmaps in {}",
        args.window,
        csv_path.display(),
        maps.len() + 1,
        ctx.out.display()
    );
    Ok(())
}

fn cmd_doae(ctx: &Ctx, args: &DoaeArgs) -> CmdResult {
    if !(args.frame_s > 0.0 && args.frame_s.is_finite()) {
        return Err(Failure::config("frame-s: must be positive"));
    }
    let seq = read_csm_store(&args.store).map_err(dsp_failure)?;
    let (engine, tess) = build_engine(ctx, args.method, args.checkpoint.as_ref(), args.sources, &seq)?;
    let all_maps = engine.all_maps(&seq)?;
    let mut per_window: Vec<Vec<DoaEstimate>> = Vec::with_capacity(seq.n_windows());
    for (w, maps) in all_maps.iter().enumerate() {
        let raster = rasterize(maps, &tess, ctx.cfg.az_bins, ctx.cfg.el_bins)
            .map_err(|e| Failure::numeric(e.to_string()))?;
        per_window.push(kmeans_doae(&raster, w));
    }
    let times: Vec<f64> = (0..seq.n_windows())
        .map(|w| seq.get(w, 0).timestamp())
        .collect();
    let n_frames = args.frames.unwrap_or_else(|| {
        times
            .last()
            .map(|&t| ((t / args.frame_s - 0.5).round() as i64 + 1).max(1) as usize)
            .unwrap_or(1)
    });
    let frames = estimates_to_frames(&per_window, &times, n_frames, args.frame_s);
    let path = args
        .estimates
        .clone()
        .unwrap_or_else(|| ctx.out.join("estimates.csv"));
    write_estimates_csv(&path, &frames).map_err(|e| Failure::io(e.to_string()))?;
    let total: usize = frames.iter().map(|f| f.len()).sum();
    println!(
        "{total} estimates across {n_frames} frames -> {}",
        path.display()
    );
    Ok(())
}

/// Largest frame index in the first CSV column, None for a header-only file.
fn max_frame_index(path: &Path) -> Result<Option<usize>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::io(format!("cannot read {}: {e}", path.display())))?;
    let mut max = None;
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let first = line.split(',').next().unwrap_or("").trim();
        let idx: usize = first.parse().map_err(|_| {
            Failure::io(format!(
                "{}:{}: bad frame index \"{first}\"",
                path.display(),
                lineno + 1
            ))
        })?;
        max = Some(max.map_or(idx, |m: usize| m.max(idx)));
    }
    Ok(max)
}

fn cmd_eval(ctx: &Ctx, args: &EvalArgs) -> CmdResult {
    if let Some(g) = args.gate_deg {
        if !(g > 0.0 && g.is_finite()) {
            return Err(Failure::config("gate-deg: must be positive"));
        }
    }
    if !(args.frame_s > 0.0 && args.frame_s.is_finite()) {
        return Err(Failure::config("frame-s: must be positive"));
    }
    let n_frames = match args.frames {
        Some(n) if n > 0 => n,
        Some(_) => return Err(Failure::config("frames: must be at least 1")),
        None => {
            let a = max_frame_index(&args.estimates)?;
            let b = max_frame_index(&args.truth)?;
            a.into_iter().chain(b).max().map(|m| m + 1).unwrap_or(1)
        }
    };
    let estimates = read_estimates_csv(&args.estimates, n_frames)
        .map_err(|e| Failure::io(e.to_string()))?;
    let truth = GroundTruth::read_csv(&args.truth, n_frames, args.frame_s)
        .map_err(|e| Failure::io(e.to_string()))?;
    let references: Vec<Vec<Vector3<f64>>> = truth
        .frames
        .iter()
        .map(|f| f.iter().map(|(_, d)| *d).collect())
        .collect();
    let result = evaluate(&estimates, &references, args.gate_deg)
        .map_err(|e| Failure::config(e.to_string()))?;
    println!("LE {:.2} LR {:.1}", result.le_deg, result.lr_percent);
    println!(
        "matched {} of {} references with {} estimates over {n_frames} frames",
        result.matched, result.total_references, result.total_estimates
    );
    if let Some(detail) = &args.detail {
        write_atomic(detail, result.detail_csv().as_bytes())
            .map_err(|e| Failure::io(e.to_string()))?;
    }
    let _ = ctx;
    Ok(())
}

fn cmd_upsample_train(ctx: &Ctx, args: &UpsampleArgs) -> CmdResult {
    if !(args.ridge >= 0.0 && args.ridge.is_finite()) {
        return Err(Failure::config("ridge: must be nonnegative"));
    }
    if !(0.0..1.0).contains(&args.holdout) {
        return Err(Failure::config("holdout: must be in 0..1"));
    }
    let list_stores = |dir: &Path| -> Result<Vec<String>, Failure> {
        let mut names = Vec::new();
        let entries = std::fs::read_dir(dir)
            .map_err(|e| Failure::io(format!("cannot read {}: {e}", dir.display())))?;
        for entry in entries {
            let entry = entry.map_err(|e| Failure::io(e.to_string()))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(".lamc") {
                names.push(name);
            }
        }
        names.sort();
        Ok(names)
    };
    let lo_names = list_stores(&args.lo_dir)?;
    let hi_names: std::collections::BTreeSet<String> =
        list_stores(&args.hi_dir)?.into_iter().collect();
    let shared: Vec<&String> = lo_names.iter().filter(|n| hi_names.contains(*n)).collect();
    if shared.is_empty() {
        return Err(Failure::config(format!(
            "no matching .lamc store filenames between {} and {}",
            args.lo_dir.display(),
            args.hi_dir.display()
        )));
    }
    let mut pairs = Vec::with_capacity(shared.len());
    for name in &shared {
        let lo = read_csm_store(&args.lo_dir.join(name.as_str())).map_err(dsp_failure)?;
        let hi = read_csm_store(&args.hi_dir.join(name.as_str())).map_err(dsp_failure)?;
        pairs.push((lo, hi));
    }
    let n_hold = ((pairs.len() as f64) * args.holdout).round() as usize;
    let n_train = pairs.len() - n_hold;
    if n_train == 0 {
        return Err(Failure::config("holdout leaves no training pairs"));
    }
    let train_refs: Vec<(&CsmSequence, &CsmSequence)> =
        pairs[..n_train].iter().map(|(a, b)| (a, b)).collect();
    let ups = train_upsampler(&train_refs, args.ridge).map_err(dsp_failure)?;
    println!(
        "fitted {} -> {} channel upsampler over {} bands from {} pairs",
        ups.m_lo(),
        ups.m_hi(),
        ups.band_freqs().len(),
        n_train
    );
    if n_hold > 0 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (lo, hi) in &pairs[n_train..] {
            let up = upsample_sequence(&ups, lo).map_err(dsp_failure)?;
            for w in 0..hi.n_windows() {
                for b in 0..hi.n_bands() {
                    let target = hi.get(w, b).entries();
                    let diff = (up.get(w, b).entries() - target).norm();
                    let denom = target.norm().max(1e-30);
                    total += diff / denom;
                    count += 1;
                }
            }
        }
        println!(
            "held-out mean relative Frobenius error {:.4} over {} windows x bands ({} pairs)",
            total / count as f64,
            count,
            n_hold
        );
    }
    let path = args
        .model
        .clone()
        .unwrap_or_else(|| ctx.out.join("upsampler.lamu"));
    write_upsampler(&path, &ups).map_err(dsp_failure)?;
    println!("upsampler -> {}", path.display());
    Ok(())
}
