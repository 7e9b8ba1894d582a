//! Subcommands of the `qsep` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qsep::checkpoint;
use qsep::data::{default_classes, load_stem_dir, manifest, write_pool, StemPool};
use qsep::dsp::{read_wav, write_wav, WavFormat, Waveform};
use qsep::eval::{evaluate, summary_table, EvalLibrary, EvalMode, TestSet};
use qsep::latent::{iterative_separate, latents_csv, retrieve_nearest, slerp, LatentLibrary, PoolEncodings};
use qsep::model::{parse_kv, LatentVec, Model, ModelConfig, Preset};
use qsep::train::{smooth, train_loop, Hyper, TrainOptions, Trainer};

/// Dataset seed of the built-in synthetic training stems.
pub const DATA_SEED: u64 = 1;
/// Dataset seed of the built-in held-out stems used by `eval`.
pub const HELDOUT_SEED: u64 = 2;

#[derive(Debug, Parser)]
#[command(name = "qsep", version, about = "Audio query-based music source separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write deterministic synthetic class stems plus a manifest.
    GenData(GenDataArgs),
    /// Train the Query-net and Separator.
    Train(TrainArgs),
    /// Separate a mixture with a query, a class mean or a retrieved vector.
    Separate(SeparateArgs),
    /// Encode an audio file into one latent CSV row.
    Encode(EncodeArgs),
    /// Separate with latent vectors interpolated between two queries.
    Interpolate(InterpolateArgs),
    /// Median-SDR evaluation on held-out mixtures.
    Eval(EvalArgs),
    /// Encode every stem segment and write the latents as CSV.
    ExportLatents(ExportArgs),
}

/// Stem source shared by commands that need training data.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Stem directory laid out as <root>/<class>/<track>.wav; the built-in
    /// synthetic set is used when omitted.
    #[arg(long, visible_alias = "stems")]
    pub data_dir: Option<PathBuf>,
    /// Number of synthetic classes when no directory is given.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Synthetic tracks per class.
    #[arg(long, default_value_t = 8)]
    pub tracks: usize,
    /// Synthetic track length in segments.
    #[arg(long, default_value_t = 4)]
    pub track_segments: usize,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_parser = parse_preset, default_value = "desk")]
    pub preset: Preset,
    #[arg(long, default_value_t = DATA_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub tracks: usize,
    #[arg(long, default_value_t = 4)]
    pub track_segments: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// paper | desk | mini [default: desk]
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    /// key=value file with model and training overrides (flags win).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed for initialization, batches and noise [default: 7]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total iterations to reach [default: 5000]
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Checkpoint interval, 0 for only the final one [default: 1000]
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Run directory for checkpoints and loss.tsv.
    #[arg(long)]
    pub out: PathBuf,
    /// Print a progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub mixture: PathBuf,
    /// Query audio describing the target.
    #[arg(long, required_unless_present = "class")]
    pub query: Option<PathBuf>,
    /// Condition on the mean vector of this class.
    #[arg(long, conflicts_with = "query")]
    pub class: Option<String>,
    /// Use the training track whose mean vector is closest to the query.
    #[arg(long, requires = "query")]
    pub retrieve: bool,
    /// Re-encode the estimate and separate again, this many rounds in total.
    #[arg(long, default_value_t = 1)]
    pub rounds: usize,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output WAV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, visible_alias = "query")]
    pub audio: PathBuf,
    /// Row label [default: file stem]
    #[arg(long)]
    pub label: Option<String>,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub mixture: PathBuf,
    #[arg(long)]
    pub query_a: PathBuf,
    #[arg(long)]
    pub query_b: PathBuf,
    /// Number of outputs, α evenly spaced over [0, 1].
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated: mean, gt, retrieved, iterativeN.
    #[arg(long, value_delimiter = ',', default_value = "mean,gt")]
    pub mode: Vec<EvalMode>,
    /// Held-out stem directory; built-in held-out synthetic stems otherwise.
    #[arg(long)]
    pub test_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    pub mixtures: usize,
    /// Seed of the test mixture draw.
    #[arg(long, default_value_t = 99)]
    pub seed: u64,
    #[command(flatten)]
    pub data: DataArgs,
    /// Per-mixture TSV report (one file per mode, suffixed by the mode).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Export per-track means instead of every segment.
    #[arg(long)]
    pub track_means: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: qsep::Error| e.to_string())
}

/// Applies `QSEP_THREADS` to the global worker pool.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("QSEP_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow!("QSEP_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            bail!("QSEP_THREADS must be a positive integer, got '{v}'");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Separate(a) => cmd_separate(&a),
        Command::Encode(a) => cmd_encode(&a),
        Command::Interpolate(a) => cmd_interpolate(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::ExportLatents(a) => cmd_export(&a),
    }
}

/// Built-in synthetic stems for `cfg`'s sample rate and segment length.
pub fn synthetic_pool(cfg: &ModelConfig, classes: usize, tracks: usize, track_segments: usize, seed: u64) -> Result<StemPool> {
    let specs = default_classes(classes)?;
    Ok(StemPool::synthetic(
        &specs,
        tracks,
        track_segments * cfg.segment_samples,
        cfg.sample_rate,
        cfg.segment_samples,
        seed,
    )?)
}

fn load_pool(data: &DataArgs, cfg: &ModelConfig, seed: u64) -> Result<StemPool> {
    match &data.data_dir {
        Some(dir) => load_stem_dir(dir, cfg.sample_rate, cfg.segment_samples)
            .with_context(|| format!("loading stems from {}", dir.display())),
        None => synthetic_pool(cfg, data.classes, data.tracks, data.track_segments, seed),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let ck = checkpoint::load(path)?;
    Ok(Model::new(ck.config, ck.params)?)
}

fn read_audio(path: &Path, cfg: &ModelConfig) -> Result<Waveform> {
    read_wav(path, cfg.sample_rate).with_context(|| format!("reading {}", path.display()))
}

fn write_audio(path: &Path, w: &Waveform) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_wav(path, w, WavFormat::Float32).with_context(|| format!("writing {}", path.display()))
}

fn encode_query(model: &Model, path: &Path) -> Result<LatentVec> {
    let w = read_audio(path, &model.config)?;
    Ok(LatentVec(model.encode_waveform(&w)?.mu))
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = ModelConfig::for_preset(a.preset);
    let specs = default_classes(a.classes)?;
    let track_len = a.track_segments * cfg.segment_samples;
    let pool = StemPool::synthetic(&specs, a.tracks, track_len, cfg.sample_rate, cfg.segment_samples, a.seed)?;
    write_pool(&pool, &a.out, &manifest(&specs, a.seed, a.tracks, track_len, cfg.sample_rate))?;
    println!("wrote {} classes × {} tracks to {}", a.classes, a.tracks, a.out.display());
    Ok(())
}

/// Model config, hyperparameters, seed, iterations and checkpoint interval
/// resolved from preset, config file and flags (in increasing precedence).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub config: ModelConfig,
    pub hyper: Hyper,
    pub seed: u64,
    pub iterations: u64,
    pub checkpoint_every: u64,
}

pub fn resolve_train_setup(a: &TrainArgs) -> Result<TrainSetup> {
    let pairs = match &a.config {
        Some(p) => parse_kv(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => Vec::new(),
    };
    let file_preset = pairs.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.parse()).transpose()?;
    let preset = a.preset.or(file_preset).unwrap_or(Preset::Desk);
    let mut s = TrainSetup {
        config: ModelConfig::for_preset(preset),
        hyper: Hyper::for_preset(preset),
        seed: 7,
        iterations: 5000,
        checkpoint_every: 1000,
    };
    let int = |k: &str, v: &str| v.parse::<u64>().map_err(|_| anyhow!("{k}: bad integer '{v}'"));
    for (k, v) in &pairs {
        match k.as_str() {
            "preset" => {}
            "seed" => s.seed = int(k, v)?,
            "iterations" => s.iterations = int(k, v)?,
            "checkpoint_every" => s.checkpoint_every = int(k, v)?,
            _ => {
                if !s.hyper.set(k, v)? {
                    s.config.set(k, v)?;
                }
            }
        }
    }
    s.seed = a.seed.unwrap_or(s.seed);
    s.iterations = a.iterations.unwrap_or(s.iterations);
    s.checkpoint_every = a.checkpoint_every.unwrap_or(s.checkpoint_every);
    s.config.validate()?;
    s.hyper.validate()?;
    Ok(s)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (mut trainer, iterations, checkpoint_every) = match &a.checkpoint {
        Some(p) => {
            if a.config.is_some() || a.preset.is_some() || a.seed.is_some() {
                bail!("--config, --preset and --seed come from the checkpoint when resuming");
            }
            let t = Trainer::from_checkpoint(checkpoint::load(p)?)?;
            (t, a.iterations.unwrap_or(5000), a.checkpoint_every.unwrap_or(1000))
        }
        None => {
            let s = resolve_train_setup(a)?;
            (Trainer::new(s.config, s.hyper, s.seed)?, s.iterations, s.checkpoint_every)
        }
    };
    let pool = load_pool(&a.data, &trainer.model.config, DATA_SEED)?;
    let opts = TrainOptions {
        iterations,
        checkpoint_every,
        seed: trainer.seed,
        out_dir: a.out.clone(),
    };
    eprintln!(
        "training preset {} ({} parameters) from iteration {} to {}",
        trainer.model.config.preset,
        trainer.model.params.element_count(),
        trainer.iteration(),
        opts.iterations
    );
    let log_every = a.log_every;
    let reports = train_loop(&mut trainer, &pool, &opts, |r| {
        if log_every > 0 && (r.iteration + 1) % log_every == 0 {
            eprintln!(
                "iter {:>7}  L_R {:.4}  L_KL {:.3}  L_latent {:.4}  total {:.4}",
                r.iteration + 1,
                r.l_r,
                r.l_kl,
                r.l_latent,
                r.l_total
            );
        }
    })?;
    if let (Some(first), Some(last)) = (reports.first(), smooth(&reports.iter().map(|r| r.l_r).collect::<Vec<_>>(), 0.01).last()) {
        eprintln!("L_R first {:.4}, smoothed final {:.4}", first.l_r, last);
    }
    println!("{}", a.out.join("final.qsep").display());
    Ok(())
}

pub fn cmd_separate(a: &SeparateArgs) -> Result<()> {
    if a.rounds == 0 {
        bail!("--rounds must be at least 1");
    }
    let model = load_model(&a.checkpoint)?;
    let mixture = read_audio(&a.mixture, &model.config)?;
    let need_pool = a.class.is_some() || a.retrieve;
    let enc = if need_pool {
        Some(PoolEncodings::compute(&model, &load_pool(&a.data, &model.config, DATA_SEED)?)?)
    } else {
        None
    };
    let z = match (&a.query, &a.class) {
        (Some(q), _) => {
            let zq = encode_query(&model, q)?;
            if a.retrieve {
                let tracks = enc.as_ref().expect("pool encoded").track_means()?;
                let (label, z) = retrieve_nearest(&zq, &tracks)?;
                eprintln!("retrieved {label}");
                z.clone()
            } else {
                zq
            }
        }
        (None, Some(c)) => enc.as_ref().expect("pool encoded").class_means()?.get(c)?.clone(),
        (None, None) => bail!("one of --query or --class is required"),
    };
    let out = iterative_separate(&model, &mixture, &z, a.rounds)?;
    write_audio(&a.out, &out.audio)?;
    if out.stopped_early {
        eprintln!("estimate went silent after {} round(s)", out.trace.len());
    }
    Ok(())
}

pub fn cmd_encode(a: &EncodeArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let z = encode_query(&model, &a.audio)?;
    let label = match &a.label {
        Some(l) => l.clone(),
        None => a.audio.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let csv = latents_csv(&[(label, z)], model.config.latent_dim)?;
    match &a.out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// `steps` values of α evenly spaced over `[0, 1]`.
pub fn alpha_grid(steps: usize) -> Result<Vec<f64>> {
    match steps {
        0 => bail!("--steps must be positive"),
        1 => Ok(vec![0.0]),
        n => Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect()),
    }
}

pub fn cmd_interpolate(a: &InterpolateArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let mixture = read_audio(&a.mixture, &model.config)?;
    let za = encode_query(&model, &a.query_a)?;
    let zb = encode_query(&model, &a.query_b)?;
    std::fs::create_dir_all(&a.out)?;
    for (i, alpha) in alpha_grid(a.steps)?.into_iter().enumerate() {
        let z = slerp(&za, &zb, alpha)?;
        let audio = model.separate_waveform(&mixture, &z)?.audio;
        let path = a.out.join(format!("interp_{i:02}.wav"));
        write_audio(&path, &audio)?;
        println!("{alpha:.4}\t{}", path.display());
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let cfg = &model.config;
    let train_pool = load_pool(&a.data, cfg, DATA_SEED)?;
    let test_pool = match &a.test_dir {
        Some(dir) => load_stem_dir(dir, cfg.sample_rate, cfg.segment_samples)?,
        None => synthetic_pool(cfg, a.data.classes, (a.data.tracks / 2).max(1), a.data.track_segments, HELDOUT_SEED)?,
    };
    if test_pool.names() != train_pool.names() {
        bail!("test classes {:?} differ from training classes {:?}", test_pool.names(), train_pool.names());
    }
    let enc = PoolEncodings::compute(&model, &train_pool)?;
    let lib = EvalLibrary {
        class_means: enc.class_means()?,
        tracks: enc.track_means()?,
    };
    let test = TestSet::from_pool(&test_pool, a.mixtures, a.seed)?;
    let id = a.checkpoint.display().to_string();
    let mut reports = Vec::with_capacity(a.mode.len());
    for &mode in &a.mode {
        let r = evaluate(&model, &test, &lib, mode, &id)?;
        if let Some(out) = &a.out {
            let path = if a.mode.len() == 1 { out.clone() } else { suffixed(out, &mode.to_string()) };
            std::fs::write(&path, r.to_tsv())?;
        }
        reports.push(r);
    }
    print!("{}", summary_table(&reports));
    Ok(())
}

fn suffixed(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut name = format!("{stem}_{tag}");
    if let Some(ext) = path.extension() {
        let _ = write!(name, ".{}", ext.to_string_lossy());
    }
    path.with_file_name(name)
}

pub fn cmd_export(a: &ExportArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let pool = load_pool(&a.data, &model.config, DATA_SEED)?;
    let enc = PoolEncodings::compute(&model, &pool)?;
    let rows = if a.track_means {
        library_rows(&enc.track_means()?)
    } else {
        enc.labelled()
    };
    std::fs::write(&a.out, latents_csv(&rows, model.config.latent_dim)?)?;
    println!("{} rows", rows.len());
    Ok(())
}

fn library_rows(lib: &LatentLibrary) -> Vec<(String, LatentVec)> {
    lib.entries().iter().map(|e| (e.label.clone(), e.z.clone())).collect()
}
