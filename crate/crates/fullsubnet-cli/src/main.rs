//! `fsn` — command-line front end: enhancement, training, data synthesis,
//! evaluation, gradient checking, and latency benchmarking.
//!
//! Exit codes: 0 on success, 1 for usage mistakes (bad flags, malformed or
//! unknown config keys), 2 for runtime failures (missing files, undecodable
//! audio, a failed gradient check). Every command logs the root seed in its
//! output header, and all randomness flows from that seed, so single-threaded
//! runs are reproducible end to end.

mod config;

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use config::RunConfig;
use fullsubnet::data::{
    draw_item, dynamic_mix_epoch, load_manifest, render_mixture, synth_noise, synth_voice,
};
use fullsubnet::dsp::{magnitude, stft, StftConfig};
use fullsubnet::mask::CrmConfig;
use fullsubnet::metrics::{evaluate_set, EvalClip};
use fullsubnet::model::{
    enhance_waveform, flatten_grads, load_flat_params, FullBandBaseline, FullSubNet,
    MaskEstimator, ModelConfig, NormKind, SubBandBaseline,
};
use fullsubnet::nncore::gradcheck::{finite_diff_gradients, max_relative_error};
use fullsubnet::stream::{bench_latency, enhance_stream, NormMode};
use fullsubnet::train::{
    fit, load_checkpoint, masked_mse, masked_mse_grad, save_checkpoint, valid_mask, ModelVariant,
    TrainConfig,
};
use fullsubnet::wav::{read_wav, write_wav, WavFormat};

/// Errors split by whose fault they are, which decides the exit code.
enum AppError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<fullsubnet::Error> for AppError {
    fn from(e: fullsubnet::Error) -> Self {
        AppError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for AppError {
    fn from(e: anyhow::Error) -> Self {
        AppError::Runtime(e)
    }
}

fn usage(msg: impl fmt::Display) -> AppError {
    AppError::Usage(msg.to_string())
}

type CmdResult = Result<(), AppError>;

#[derive(Parser)]
#[command(name = "fsn", version, about = "Real-time speech enhancement toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Denoise a 16 kHz mono WAV file.
    Enhance(EnhanceArgs),
    /// Train a mask estimator on dynamically mixed data.
    Train(TrainArgs),
    /// Synthesize a seeded corpus of noisy/reference clip pairs.
    MakeData(MakeDataArgs),
    /// Score enhanced output against references; CSV + JSON report.
    Eval(EvalArgs),
    /// Compare backpropagation against finite differences at toy size.
    Gradcheck(GradcheckArgs),
    /// Measure per-frame streaming latency.
    Bench(BenchArgs),
}

/// Flags shared by every subcommand.
#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.lr=0.002 (repeatable).
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads; falls back to FSN_THREADS, then 1.
    #[arg(long)]
    threads: Option<usize>,
    /// Root seed; overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormChoice {
    /// Whole-clip means (two passes over the input).
    Offline,
    /// Running means over frames seen so far (single pass).
    Cumulative,
}

impl NormChoice {
    fn kind(self) -> NormKind {
        match self {
            NormChoice::Offline => NormKind::Offline,
            NormChoice::Cumulative => NormKind::Cumulative,
        }
    }

    fn name(self) -> &'static str {
        match self {
            NormChoice::Offline => "offline",
            NormChoice::Cumulative => "cumulative",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatChoice {
    Pcm16,
    Float32,
}

impl FormatChoice {
    fn format(self) -> WavFormat {
        match self {
            FormatChoice::Pcm16 => WavFormat::Pcm16,
            FormatChoice::Float32 => WavFormat::Float32,
        }
    }
}

#[derive(Args)]
struct EnhanceArgs {
    #[command(flatten)]
    common: Common,
    /// Input WAV (16 kHz mono).
    #[arg(long = "in", value_name = "WAV")]
    input: Option<PathBuf>,
    /// Output WAV path.
    #[arg(long = "out", value_name = "WAV")]
    output: Option<PathBuf>,
    /// Weight file to load.
    #[arg(long, value_name = "FILE")]
    weights: Option<PathBuf>,
    /// Normalization mode.
    #[arg(long, value_enum, default_value_t = NormChoice::Cumulative)]
    norm: NormChoice,
    /// Output delay in frames; overrides stream.tau.
    #[arg(long)]
    tau: Option<usize>,
    /// Model variant: fullsub, fullband, or subband.
    #[arg(long)]
    variant: Option<String>,
    /// Run the frame-by-frame streaming engine instead of the batch path.
    #[arg(long)]
    streaming: bool,
    /// Output sample format.
    #[arg(long, value_enum, default_value_t = FormatChoice::Pcm16)]
    format: FormatChoice,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Manifest of clean speech WAVs, one path per line.
    #[arg(long, value_name = "FILE")]
    clean: Option<PathBuf>,
    /// Manifest of noise WAVs, one path per line.
    #[arg(long, value_name = "FILE")]
    noise: Option<PathBuf>,
    /// Where to write the trained weights (and the `.txt` sidecar).
    #[arg(long, value_name = "FILE")]
    weights: Option<PathBuf>,
    /// Epochs; overrides train.epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Mixtures per epoch; overrides train.items.
    #[arg(long)]
    items: Option<usize>,
    /// Model variant: fullsub, fullband, or subband.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct MakeDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for the corpus.
    #[arg(long = "out", value_name = "DIR")]
    out_dir: PathBuf,
    /// Mixtures to render; overrides train.items.
    #[arg(long)]
    count: Option<usize>,
    /// Synthetic voices in the clean pool.
    #[arg(long, default_value_t = 20)]
    voices: usize,
    /// Synthetic noises in the noise pool.
    #[arg(long, default_value_t = 10)]
    noises: usize,
    /// Clip duration in seconds.
    #[arg(long, default_value_t = 3.0)]
    duration: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory produced by make-data.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Weight file to load.
    #[arg(long, value_name = "FILE")]
    weights: Option<PathBuf>,
    /// Where to write the per-clip CSV report.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Where to write the JSON aggregate (stdout if omitted).
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
    /// Normalization mode.
    #[arg(long, value_enum, default_value_t = NormChoice::Cumulative)]
    norm: NormChoice,
    /// Model variant: fullsub, fullband, or subband.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Frequency bins of the toy model.
    #[arg(long, default_value_t = 9)]
    bins: usize,
    /// Neighbor bins per side.
    #[arg(long, default_value_t = 2)]
    neighbors: usize,
    /// Full-band hidden width.
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    /// Sub-band hidden width.
    #[arg(long, default_value_t = 6)]
    sub_hidden: usize,
    /// Sequence length in frames.
    #[arg(long, default_value_t = 7)]
    seq: usize,
    /// Independent random restarts.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Model variant: fullsub, fullband, or subband.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Weight file to load (random weights if omitted; timing is identical).
    #[arg(long, value_name = "FILE")]
    weights: Option<PathBuf>,
    /// Audio duration per repetition.
    #[arg(long, default_value_t = 30.0)]
    seconds: f64,
    /// Repetitions, each with a fresh stream.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Where to write the JSON report (stdout if omitted).
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let result = match cli.cmd {
        Cmd::Enhance(a) => cmd_enhance(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::MakeData(a) => cmd_make_data(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(AppError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Defaults, then the config file, then `--set` pairs, then dedicated flags.
fn resolve(common: &Common) -> Result<(RunConfig, usize), AppError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path).map_err(usage)?;
    }
    cfg.apply_sets(&common.set).map_err(usage)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let threads = match common.threads {
        Some(0) => return Err(usage("--threads must be at least 1")),
        Some(t) => t,
        None => match std::env::var("FSN_THREADS") {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&t| t >= 1)
                .ok_or_else(|| usage(format!("FSN_THREADS={v:?} is not a positive integer")))?,
            Err(_) => 1,
        },
    };
    Ok((cfg, threads))
}

fn parse_variant(flag: &Option<String>, cfg: &mut RunConfig) -> Result<(), AppError> {
    if let Some(v) = flag {
        cfg.variant = v.parse().map_err(usage)?;
    }
    Ok(())
}

fn banner(cmd: &str, cfg: &RunConfig, threads: usize, extra: &[(&str, String)]) {
    let mut line = format!("# fsn {cmd} | seed {} | threads {threads}", cfg.seed);
    for (k, v) in extra {
        line.push_str(&format!(" | {k} {v}"));
    }
    println!("{line}");
}

fn require(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf, AppError> {
    path.clone().ok_or_else(|| usage(format!("missing {flag}")))
}

/// One of the three trainable estimators, dispatched at runtime.
enum AnyModel {
    FullSub(FullSubNet<f64>),
    FullBand(FullBandBaseline<f64>),
    SubBand(SubBandBaseline<f64>),
}

impl AnyModel {
    fn zeros(variant: ModelVariant, cfg: ModelConfig, crm: CrmConfig) -> fullsubnet::Result<Self> {
        Ok(match variant {
            ModelVariant::FullSub => AnyModel::FullSub(FullSubNet::zeros(cfg, crm)?),
            ModelVariant::FullBand => AnyModel::FullBand(FullBandBaseline::zeros(cfg, crm)?),
            ModelVariant::SubBand => AnyModel::SubBand(SubBandBaseline::zeros(cfg, crm)?),
        })
    }

    fn init(
        variant: ModelVariant,
        cfg: ModelConfig,
        crm: CrmConfig,
        rng: &mut ChaCha8Rng,
    ) -> fullsubnet::Result<Self> {
        Ok(match variant {
            ModelVariant::FullSub => AnyModel::FullSub(FullSubNet::init(cfg, crm, rng)?),
            ModelVariant::FullBand => AnyModel::FullBand(FullBandBaseline::init(cfg, crm, rng)?),
            ModelVariant::SubBand => AnyModel::SubBand(SubBandBaseline::init(cfg, crm, rng)?),
        })
    }

    fn load(&mut self, path: &Path) -> fullsubnet::Result<()> {
        match self {
            AnyModel::FullSub(m) => load_checkpoint(m, path),
            AnyModel::FullBand(m) => load_checkpoint(m, path),
            AnyModel::SubBand(m) => load_checkpoint(m, path),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            AnyModel::FullSub(m) => m.param_count(),
            AnyModel::FullBand(m) => m.param_count(),
            AnyModel::SubBand(m) => m.param_count(),
        }
    }

    fn enhance(
        &self,
        cfg: &StftConfig,
        norm: NormKind,
        samples: &[f64],
    ) -> fullsubnet::Result<Vec<f64>> {
        match self {
            AnyModel::FullSub(m) => enhance_waveform(m, cfg, norm, samples),
            AnyModel::FullBand(m) => enhance_waveform(m, cfg, norm, samples),
            AnyModel::SubBand(m) => enhance_waveform(m, cfg, norm, samples),
        }
    }
}

/// Builds the variant named by the config and loads weights when given.
fn load_model(
    cfg: &RunConfig,
    weights: &Option<PathBuf>,
) -> Result<AnyModel, AppError> {
    let mut model = AnyModel::zeros(cfg.variant, cfg.model().map_err(usage)?, CrmConfig::default())?;
    if let Some(path) = weights.clone().or_else(|| cfg.weights.clone()) {
        model.load(&path)?;
    }
    Ok(model)
}

fn cmd_enhance(args: EnhanceArgs) -> CmdResult {
    let (mut cfg, threads) = resolve(&args.common)?;
    parse_variant(&args.variant, &mut cfg)?;
    if let Some(tau) = args.tau {
        cfg.tau = tau;
    }
    let input = require(&args.input.clone().or_else(|| cfg.input.clone()), "--in")?;
    let output = require(&args.output.clone().or_else(|| cfg.output.clone()), "--out")?;
    let stft_cfg = cfg.stft().map_err(usage)?;
    let model = load_model(&cfg, &args.weights)?;
    banner(
        "enhance",
        &cfg,
        threads,
        &[
            ("norm", args.norm.name().into()),
            ("tau", cfg.tau.to_string()),
            ("in", input.display().to_string()),
            ("out", output.display().to_string()),
        ],
    );
    let samples = read_wav(&input)?;
    let enhanced = if args.streaming {
        let AnyModel::FullSub(m) = &model else {
            return Err(usage("--streaming supports only the fullsub variant"));
        };
        let mode = match args.norm {
            NormChoice::Cumulative => NormMode::Cumulative,
            NormChoice::Offline => {
                let mag = magnitude(&stft(&samples, &stft_cfg)?);
                NormMode::Offline(m.offline_stats(&mag)?)
            }
        };
        enhance_stream(m, &stft_cfg, mode, &samples, stft_cfg.hop)?
    } else {
        model.enhance(&stft_cfg, args.norm.kind(), &samples)?
    };
    write_wav(&output, &enhanced, args.format.format())?;
    println!(
        "wrote {} samples ({:.2} s) to {}",
        enhanced.len(),
        enhanced.len() as f64 / stft_cfg.sample_rate as f64,
        output.display()
    );
    Ok(())
}

/// Loads a manifest's WAVs, or synthesizes a pool when no manifest is given.
fn load_pool(
    manifest: &Option<PathBuf>,
    synth: impl Fn(&mut ChaCha8Rng) -> Vec<f64>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, String), AppError> {
    match manifest {
        Some(path) => {
            let mut out = Vec::new();
            for p in load_manifest(path)? {
                out.push(read_wav(&p)?);
            }
            if out.is_empty() {
                return Err(usage(format!("{} lists no files", path.display())));
            }
            Ok((out, path.display().to_string()))
        }
        None => {
            let pool = (0..count).map(|_| synth(rng)).collect();
            Ok((pool, format!("synthetic x{count}")))
        }
    }
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let (mut cfg, threads) = resolve(&args.common)?;
    parse_variant(&args.variant, &mut cfg)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(i) = args.items {
        cfg.items = i;
    }
    let weights = require(&args.weights.clone().or_else(|| cfg.weights.clone()), "--weights")?;
    let stft_cfg = cfg.stft().map_err(usage)?;
    let model_cfg = cfg.model().map_err(usage)?;
    let train_cfg = cfg.train().map_err(usage)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fs = cfg.sample_rate;
    let clip = (3.0 * fs as f64) as usize;
    let (clean, clean_src) =
        load_pool(&args.clean.clone().or_else(|| cfg.clean.clone()), |r| synth_voice(clip, fs, r), 20, &mut rng)?;
    let (noise, noise_src) =
        load_pool(&args.noise.clone().or_else(|| cfg.noise.clone()), |r| synth_noise(clip, r), 10, &mut rng)?;
    banner(
        "train",
        &cfg,
        threads,
        &[
            ("variant", cfg.variant.to_string()),
            ("epochs", cfg.epochs.to_string()),
            ("items", cfg.items.to_string()),
            ("clean", clean_src),
            ("noise", noise_src),
        ],
    );

    let crm = CrmConfig::default();
    let items = cfg.items;
    let seq_len = cfg.seq_len;
    let mut model = AnyModel::init(cfg.variant, model_cfg, crm, &mut rng)?;
    println!("parameters: {}", model.param_count());
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut data = move |_epoch: usize| {
        dynamic_mix_epoch(&clean, &noise, items, &stft_cfg, &crm, seq_len, &mut data_rng)
    };
    let log = |e: usize, s: &fullsubnet::train::EpochStats| {
        println!(
            "epoch {}/{}: batches {}, mean loss {:.6}",
            e + 1,
            train_cfg.epochs,
            s.batches,
            s.mean_loss
        );
    };
    let steps = match &mut model {
        AnyModel::FullSub(m) => run_fit(m, &train_cfg, &mut data, log)?,
        AnyModel::FullBand(m) => run_fit(m, &train_cfg, &mut data, log)?,
        AnyModel::SubBand(m) => run_fit(m, &train_cfg, &mut data, log)?,
    };
    match &model {
        AnyModel::FullSub(m) => save_checkpoint(m, &weights, &train_cfg, steps)?,
        AnyModel::FullBand(m) => save_checkpoint(m, &weights, &train_cfg, steps)?,
        AnyModel::SubBand(m) => save_checkpoint(m, &weights, &train_cfg, steps)?,
    }
    println!("saved {} after {steps} steps", weights.display());
    Ok(())
}

fn run_fit<M: MaskEstimator<f64>>(
    model: &mut M,
    cfg: &TrainConfig,
    data: &mut impl FnMut(usize) -> fullsubnet::Result<Vec<fullsubnet::data::TrainingPair>>,
    log: impl FnMut(usize, &fullsubnet::train::EpochStats),
) -> Result<u64, AppError> {
    let mut opt = cfg.optimizer();
    fit(model, &mut opt, cfg, data, log)?;
    Ok(opt.steps())
}

fn cmd_make_data(args: MakeDataArgs) -> CmdResult {
    let (mut cfg, threads) = resolve(&args.common)?;
    if let Some(c) = args.count {
        cfg.items = c;
    }
    if args.voices == 0 || args.noises == 0 || !(args.duration > 0.0) {
        return Err(usage("pool sizes and duration must be positive"));
    }
    banner(
        "make-data",
        &cfg,
        threads,
        &[("count", cfg.items.to_string()), ("out", args.out_dir.display().to_string())],
    );
    std::fs::create_dir_all(&args.out_dir).map_err(|e| AppError::Runtime(e.into()))?;
    let fs = cfg.sample_rate;
    let clip = (args.duration * fs as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let voices: Vec<Vec<f64>> = (0..args.voices).map(|_| synth_voice(clip, fs, &mut rng)).collect();
    let noises: Vec<Vec<f64>> = (0..args.noises).map(|_| synth_noise(clip, &mut rng)).collect();

    let manifest_path = args.out_dir.join("manifest.csv");
    let mut manifest = std::io::BufWriter::new(
        std::fs::File::create(&manifest_path).map_err(|e| AppError::Runtime(e.into()))?,
    );
    writeln!(manifest, "item,mixture,reference,reverberant,t60,snr_db,seed")
        .map_err(|e| AppError::Runtime(e.into()))?;
    for i in 0..cfg.items {
        let (ci, ni, spec) = draw_item(&mut rng, voices.len(), noises.len())?;
        let rendered = render_mixture(&voices[ci], &noises[ni], &spec, fs)?;
        let mix_name = format!("mix_{i:04}.wav");
        let ref_name = format!("ref_{i:04}.wav");
        write_wav(&args.out_dir.join(&mix_name), &rendered.mixture, WavFormat::Float32)?;
        write_wav(&args.out_dir.join(&ref_name), &rendered.image, WavFormat::Float32)?;
        writeln!(
            manifest,
            "{i},{mix_name},{ref_name},{},{},{},{}",
            spec.reverberant,
            spec.rir_t60.map_or(String::from(""), |t| t.to_string()),
            spec.snr_db,
            spec.seed
        )
        .map_err(|e| AppError::Runtime(e.into()))?;
    }
    manifest.flush().map_err(|e| AppError::Runtime(e.into()))?;
    println!("wrote {} mixtures to {}", cfg.items, args.out_dir.display());
    Ok(())
}

/// Reads a make-data corpus back as evaluation clips.
fn load_corpus(dir: &Path) -> Result<Vec<EvalClip>, AppError> {
    let manifest = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest)
        .map_err(|e| AppError::Runtime(anyhow::anyhow!("{}: {e}", manifest.display())))?;
    let mut clips = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(AppError::Runtime(anyhow::anyhow!(
                "{}: malformed row {line:?}",
                manifest.display()
            )));
        }
        let reverberant = cols[3]
            .parse::<bool>()
            .map_err(|_| AppError::Runtime(anyhow::anyhow!("bad reverberant flag in {line:?}")))?;
        clips.push(EvalClip {
            clip_id: cols[1].to_string(),
            reverberant,
            noisy: read_wav(&dir.join(cols[1]))?,
            reference: read_wav(&dir.join(cols[2]))?,
        });
    }
    if clips.is_empty() {
        return Err(AppError::Runtime(anyhow::anyhow!(
            "{} lists no clips",
            manifest.display()
        )));
    }
    Ok(clips)
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let (mut cfg, threads) = resolve(&args.common)?;
    parse_variant(&args.variant, &mut cfg)?;
    let stft_cfg = cfg.stft().map_err(usage)?;
    let model = load_model(&cfg, &args.weights)?;
    let report_path = args
        .report
        .clone()
        .or_else(|| cfg.report.clone())
        .unwrap_or_else(|| args.data.join("report.csv"));
    banner(
        "eval",
        &cfg,
        threads,
        &[
            ("norm", args.norm.name().into()),
            ("data", args.data.display().to_string()),
            ("report", report_path.display().to_string()),
        ],
    );
    let clips = load_corpus(&args.data)?;
    let norm = args.norm.kind();

    // Enhancement is per-clip independent; spread clips across the workers
    // and stitch results back in manifest order.
    let enhanced: Vec<Vec<f64>> = if threads <= 1 {
        clips
            .iter()
            .map(|c| model.enhance(&stft_cfg, norm, &c.noisy))
            .collect::<fullsubnet::Result<_>>()?
    } else {
        let chunk = clips.len().div_ceil(threads);
        let mut parts: Vec<fullsubnet::Result<Vec<Vec<f64>>>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = clips
                .chunks(chunk)
                .map(|batch| {
                    let model = &model;
                    let stft_cfg = &stft_cfg;
                    scope.spawn(move || {
                        batch
                            .iter()
                            .map(|c| model.enhance(stft_cfg, norm, &c.noisy))
                            .collect::<fullsubnet::Result<Vec<_>>>()
                    })
                })
                .collect();
            for h in handles {
                parts.push(h.join().expect("worker panicked"));
            }
        });
        let mut all = Vec::with_capacity(clips.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };

    let mut iter = enhanced.into_iter();
    let report = evaluate_set(|_| Ok(iter.next().expect("one result per clip")), &clips, &stft_cfg)?;
    let file = std::fs::File::create(&report_path).map_err(|e| AppError::Runtime(e.into()))?;
    report.write_csv(std::io::BufWriter::new(file))?;
    let json = report.aggregate_json();
    match &args.json {
        Some(path) => std::fs::write(path, &json).map_err(|e| AppError::Runtime(e.into()))?,
        None => println!("{json}"),
    }
    println!(
        "clips {}: mean SI-SDR {:.2} dB (noisy {:.2} dB)",
        report.overall.count, report.overall.si_sdr, report.overall.noisy_si_sdr
    );
    Ok(())
}

/// Analytic-vs-numeric gradient comparison through forward, loss, and BPTT.
fn gradcheck_variant<M: MaskEstimator<f64>>(
    model: &mut M,
    grid: &fullsubnet::dsp::Grid,
    target: &fullsubnet::mask::Crm,
    tau: usize,
) -> fullsubnet::Result<f64> {
    let mask = valid_mask(target.frames, target.frames);
    let (preds, tape) = model.forward_taped(grid)?;
    let (_, d_preds) = masked_mse_grad(&preds, target, &mask, tau, 1.0)?;
    let analytic = flatten_grads(&model.backward(&tape, &d_preds)?);

    let base = fullsubnet::model::flatten_params(model);
    let numeric = finite_diff_gradients(&base, |p| {
        load_flat_params(model, p).expect("param vector length is fixed");
        let preds = model.forward(grid).expect("forward at perturbed params");
        masked_mse(&preds, target, &mask, tau).expect("loss at perturbed params")
    }, 1e-5);
    load_flat_params(model, &base)?;
    Ok(max_relative_error(&analytic, &numeric))
}

fn cmd_gradcheck(args: GradcheckArgs) -> CmdResult {
    let (mut cfg, threads) = resolve(&args.common)?;
    parse_variant(&args.variant, &mut cfg)?;
    if args.seq <= cfg.tau {
        return Err(usage(format!("--seq {} must exceed the delay {}", args.seq, cfg.tau)));
    }
    let model_cfg = ModelConfig {
        bins: args.bins,
        neighbors: args.neighbors,
        full_hidden: args.hidden,
        sub_hidden: args.sub_hidden,
        tau: cfg.tau,
    };
    model_cfg.validate().map_err(usage)?;
    banner(
        "gradcheck",
        &cfg,
        threads,
        &[
            ("variant", cfg.variant.to_string()),
            ("bins", args.bins.to_string()),
            ("hidden", format!("{}/{}", args.hidden, args.sub_hidden)),
            ("seq", args.seq.to_string()),
            ("seeds", args.seeds.to_string()),
        ],
    );
    let crm = CrmConfig::default();
    let mut worst = 0.0f64;
    for s in 0..args.seeds.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(s as u64));
        let mut grid = fullsubnet::dsp::Grid::zeros(args.seq, args.bins);
        for v in &mut grid.data {
            *v = rng.gen_range(0.05..1.5);
        }
        let mut target = fullsubnet::mask::Crm::zeros(args.seq, args.bins);
        for v in target.re.iter_mut().chain(target.im.iter_mut()) {
            *v = rng.gen_range(-1.5..1.5);
        }
        let err = match cfg.variant {
            ModelVariant::FullSub => {
                let mut m = FullSubNet::<f64>::init(model_cfg, crm, &mut rng)?;
                gradcheck_variant(&mut m, &grid, &target, cfg.tau)?
            }
            ModelVariant::FullBand => {
                let mut m = FullBandBaseline::<f64>::init(model_cfg, crm, &mut rng)?;
                gradcheck_variant(&mut m, &grid, &target, cfg.tau)?
            }
            ModelVariant::SubBand => {
                let mut m = SubBandBaseline::<f64>::init(model_cfg, crm, &mut rng)?;
                gradcheck_variant(&mut m, &grid, &target, cfg.tau)?
            }
        };
        println!("seed {}: max relative gradient error {err:.3e}", cfg.seed.wrapping_add(s as u64));
        worst = worst.max(err);
    }
    println!("max relative gradient error: {worst:.3e}");
    if worst > 1e-3 {
        return Err(AppError::Runtime(anyhow::anyhow!(
            "gradient check failed: {worst:.3e} exceeds 1e-3"
        )));
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> CmdResult {
    let (cfg, threads) = resolve(&args.common)?;
    if cfg.variant != ModelVariant::FullSub {
        return Err(usage("bench runs the streaming engine, which is fullsub-only"));
    }
    let stft_cfg = cfg.stft().map_err(usage)?;
    let model_cfg = cfg.model().map_err(usage)?;
    banner(
        "bench",
        &cfg,
        threads,
        &[
            ("seconds", args.seconds.to_string()),
            ("reps", args.reps.to_string()),
            ("hidden", format!("{}/{}", cfg.full_hidden, cfg.sub_hidden)),
        ],
    );
    // 32-bit inference, matching the deployment arithmetic the budget is for.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = FullSubNet::<f32>::init(model_cfg, CrmConfig::default(), &mut rng)?;
    if let Some(path) = args.weights.clone().or_else(|| cfg.weights.clone()) {
        load_checkpoint(&mut model, &path)?;
    }
    println!("parameters: {}", model.param_count());
    let report = bench_latency(&model, &stft_cfg, args.seconds, args.reps, cfg.seed)?;
    println!("{report}");
    let json = report.to_json();
    match &args.json {
        Some(path) => std::fs::write(path, &json).map_err(|e| AppError::Runtime(e.into()))?,
        None => println!("{json}"),
    }
    if report.mean_ms >= report.hop_ms {
        println!("note: mean frame time exceeds the {:.2} ms hop; not real-time here", report.hop_ms);
    }
    Ok(())
}
