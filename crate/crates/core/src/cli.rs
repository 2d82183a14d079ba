//! Command-line entry point.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng as _;
use rayon::prelude::*;

use crate::audio::augment::{random_offline, OfflineOp};
use crate::audio::features::LmfbTensor;
use crate::data::{
    feature_cache_name, generate_synthetic, load_clip_audio, load_samples, split_clips, EmbeddingStore,
    Manifest, ManifestRow, Sample, Split, VideoLoad, VideoSource,
};
use crate::error::{Error, Result};
use crate::image_ops::{ImageOp, SEARCH_SPACE};
use crate::models::{Checkpoint, ModelSpec, VideoSpec};
use crate::rng::{derive_seed, rng_from, stream};
use crate::train::{evaluate, fit, init_model, EvalReport, EpochLog, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "avsc", version, about = "Audio-visual scene classification toolkit")]
pub struct Cli {
    /// Master seed; overrides the seed in a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-sample stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Debug-level logging on standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a separable synthetic audio-visual corpus.
    Synth(SynthArgs),
    /// Compute LMF1 feature caches for every manifest row.
    Extract(ExtractArgs),
    /// Train a model and write AVSC1 checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Train one model per image op plus a baseline and report accuracies.
    AblateRandaugment(AblateArgs),
    /// Write offline waveform augmentations of the training clips.
    AugmentAudio(AugmentAudioArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_per_class: usize,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Data options shared by training and evaluation.
#[derive(Clone, Debug, Default, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// AVEM store for the file-backed video provider.
    #[arg(long, conflicts_with = "trainable_video")]
    pub embeddings: Option<PathBuf>,
    /// Train the video CNN on frames instead of reading embeddings.
    #[arg(long)]
    pub trainable_video: bool,
    /// Directory of LMF1 caches written by `extract`.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

/// Flags that override config file values.
#[derive(Clone, Debug, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub freeze_audio: bool,
    #[arg(long)]
    pub freeze_video: bool,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Checkpoint path, rewritten after every epoch.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Restrict to one split; all rows by default.
    #[arg(long)]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Ops to evaluate (repeatable or comma separated); all 15 by default.
    #[arg(long = "op", value_delimiter = ',')]
    pub ops: Vec<String>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct AugmentAudioArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for WAVs, `manifest.tsv` and `augment_log.tsv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Ops to apply (comma separated); all four by default.
    #[arg(long = "op", value_delimiter = ',')]
    pub ops: Vec<String>,
    /// Outputs per (clip, op).
    #[arg(long, default_value_t = 1)]
    pub copies: usize,
    /// Train config whose `augment.audio` ranges are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Process exit code for an error: 2 usage or config, 3 numerical, 1 other.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownOp(_) => 2,
        Error::Numerical(_) | Error::NonFinite(_) | Error::NonFiniteGradient(_) => 3,
        _ => 1,
    }
}

fn require_file(path: &Path, flag: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("--{flag}: no such file {}", path.display())))
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

pub fn cmd_synth(args: &SynthArgs, seed: u64) -> Result<PathBuf> {
    if args.n_per_class == 0 {
        return Err(Error::InvalidArgument("--n-per-class must be positive".into()));
    }
    generate_synthetic(args.n_per_class, seed, &args.out)?;
    Ok(args.out.join("manifest.tsv"))
}

/// Writes one cache per (split) row; returns the number written. Every row
/// is attempted and failures are reported together.
pub fn cmd_extract(args: &ExtractArgs) -> Result<usize> {
    require_file(&args.manifest, "manifest")?;
    let manifest = split_clips(&Manifest::load(&args.manifest)?);
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let results: Vec<(String, Result<()>)> = manifest
        .rows
        .par_iter()
        .map(|row| {
            let r = load_clip_audio(&manifest, row)
                .and_then(|w| crate::audio::features::build_lmfb(&w))
                .and_then(|f: LmfbTensor| f.save(&args.out.join(feature_cache_name(&row.clip_id))));
            (row.clip_id.clone(), r)
        })
        .collect();
    let failures: Vec<String> = results
        .iter()
        .filter_map(|(id, r)| r.as_ref().err().map(|e| format!("  {id}: {e}")))
        .collect();
    if failures.is_empty() {
        Ok(results.len())
    } else {
        Err(Error::Manifest(format!(
            "{} of {} clips failed:\n{}",
            failures.len(),
            results.len(),
            failures.join("\n")
        )))
    }
}

fn train_config(o: &TrainOverrides, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(path) => {
            require_file(path, "config")?;
            TrainConfig::load(path)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = o.lr {
        cfg.adam.lr = lr;
    }
    if let Some(b) = o.batch_size {
        cfg.batch_size = b;
    }
    cfg.freeze.audio |= o.freeze_audio;
    cfg.freeze.video |= o.freeze_video;
    cfg.validate()?;
    Ok(cfg)
}

/// Loaded training and held-out samples plus the model spec they imply.
struct Dataset {
    spec: ModelSpec,
    train: Vec<Sample>,
    test: Vec<Sample>,
}

fn load_dataset(data: &DataArgs, cfg: &TrainConfig) -> Result<Dataset> {
    require_file(&data.manifest, "manifest")?;
    let store = match &data.embeddings {
        Some(path) => {
            require_file(path, "embeddings")?;
            Some(EmbeddingStore::load(path)?)
        }
        None if data.trainable_video => None,
        None => {
            return Err(Error::InvalidArgument(
                "one of --embeddings or --trainable-video is required".into(),
            ))
        }
    };
    let spec = cfg
        .model
        .spec(data.trainable_video, store.as_ref().map_or(0, EmbeddingStore::dim));
    spec.validate()?;
    let how = match (&store, &spec.video) {
        (Some(s), _) => VideoLoad::Embeddings(s),
        (None, VideoSpec::TrainableCnn { cnn, .. }) => VideoLoad::Frames { size: cnn.input_size },
        (None, VideoSpec::FileBacked { .. }) => unreachable!("file-backed spec always has a store"),
    };
    let manifest = split_clips(&Manifest::load(&data.manifest)?);
    let cache = data.cache.as_deref();
    let train = load_samples(&manifest.filter_split(Split::Train), how, cache)?;
    let test = load_samples(&manifest.filter_split(Split::Test), how, cache)?;
    if train.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "manifest has {} training clips; at least 2 are needed",
            train.len()
        )));
    }
    Ok(Dataset { spec, train, test })
}

pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(args: &TrainArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<TrainOutcome> {
    let cfg = train_config(&args.overrides, seed)?;
    let ds = load_dataset(&args.data, &cfg)?;
    let mut params = init_model(&ds.spec, &cfg)?;
    write_out(
        out,
        &format!(
            "{}\n# train_clips={} test_clips={} video={}\n",
            cfg.log_header(),
            ds.train.len(),
            ds.test.len(),
            if args.data.trainable_video { "trainable_cnn" } else { "file_backed" }
        ),
    )?;
    let eval = (!ds.test.is_empty()).then_some(ds.test.as_slice());
    let save = |p: &crate::nn::ParamStore<f32>| {
        Checkpoint::new(ds.spec.clone(), p.clone(), cfg.adam).save(&args.out)
    };
    let logs = fit(&ds.spec, &mut params, &ds.train, eval, &cfg, |log, p| {
        write_out(out, &format!("{}\n", log.line()))?;
        save(p)?;
        Ok(true)
    })?;
    save(&params)?;
    Ok(TrainOutcome {
        logs,
        checkpoint: args.out.clone(),
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.manifest, "manifest")?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let store = match (&ckpt.spec.video, &args.embeddings) {
        (VideoSpec::FileBacked { dim }, Some(path)) => {
            require_file(path, "embeddings")?;
            let s = EmbeddingStore::load(path)?;
            if s.dim() != *dim {
                return Err(Error::InvalidArgument(format!(
                    "--embeddings has dimension {}, the checkpoint expects {dim}",
                    s.dim()
                )));
            }
            Some(s)
        }
        (VideoSpec::FileBacked { .. }, None) => {
            return Err(Error::InvalidArgument(
                "checkpoint uses file-backed video embeddings; pass --embeddings".into(),
            ))
        }
        (VideoSpec::TrainableCnn { .. }, _) => None,
    };
    let how = match (&store, &ckpt.spec.video) {
        (Some(s), _) => VideoLoad::Embeddings(s),
        (None, VideoSpec::TrainableCnn { cnn, .. }) => VideoLoad::Frames { size: cnn.input_size },
        (None, VideoSpec::FileBacked { .. }) => unreachable!("checked above"),
    };
    let mut manifest = split_clips(&Manifest::load(&args.manifest)?);
    if let Some(split) = args.split {
        manifest = manifest.filter_split(split);
    }
    let samples = load_samples(&manifest, how, args.cache.as_deref())?;
    evaluate(&ckpt.spec, &ckpt.params, &samples)
}

/// Accuracy per video perturbation policy.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    /// `(policy, held-out accuracy)`; the first row is the baseline.
    pub rows: Vec<(String, f64)>,
}

pub const BASELINE_ROW: &str = "None";

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<14} {:>8}", "policy", "acc(%)").unwrap();
        for (name, acc) in &self.rows {
            writeln!(s, "{name:<14} {:>8.2}", 100.0 * acc).unwrap();
        }
        s
    }

    pub fn accuracy(&self, policy: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == policy).map(|(_, a)| *a)
    }
}

fn parse_ops<T: std::str::FromStr<Err = Error> + Copy>(names: &[String], all: &[T]) -> Result<Vec<T>> {
    if names.is_empty() {
        return Ok(all.to_vec());
    }
    names.iter().map(|n| n.trim().parse()).collect()
}

/// Trains a baseline without video perturbation and one model per op with
/// only that op in the RandAugment policy, all from the same seed, and
/// reports held-out accuracy (training accuracy when there is no test split).
pub fn cmd_ablate_randaugment(args: &AblateArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<AblationReport> {
    let ops: Vec<ImageOp> = parse_ops(&args.ops, &SEARCH_SPACE)?;
    let cfg = train_config(&args.overrides, seed)?;
    let data = DataArgs {
        manifest: args.manifest.clone(),
        embeddings: None,
        trainable_video: true,
        cache: args.cache.clone(),
    };
    let ds = load_dataset(&data, &cfg)?;
    let held_out = if ds.test.is_empty() { &ds.train } else { &ds.test };
    write_out(out, &format!("{}\n", cfg.log_header()))?;

    let run = |policy: Option<ImageOp>| -> Result<f64> {
        let mut c = cfg.clone();
        match policy {
            Some(op) => {
                c.augment.rand_augment = true;
                c.augment.image.policy = vec![op];
            }
            None => c.augment.rand_augment = false,
        }
        let mut params = init_model(&ds.spec, &c)?;
        fit(&ds.spec, &mut params, &ds.train, None, &c, |_, _| Ok(true))?;
        Ok(evaluate(&ds.spec, &params, held_out)?.overall_accuracy)
    };
    let mut rows = Vec::with_capacity(ops.len() + 1);
    for policy in std::iter::once(None).chain(ops.into_iter().map(Some)) {
        let name = policy.map_or(BASELINE_ROW.to_string(), |op| op.to_string());
        let acc = run(policy)?;
        write_out(out, &format!("# {name} acc={acc:.4}\n"))?;
        rows.push((name, acc));
    }
    let report = AblationReport { rows };
    if let Some(path) = &args.out {
        std::fs::write(path, report.to_text()).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

pub const AUGMENT_LOG_HEADER: &str = "source_id\top\tparam";

/// Augments every training clip with each op `copies` times. Returns the
/// manifest of generated clips, which is also written to `out/manifest.tsv`
/// with `(source_id, op, param)` lines in `out/augment_log.tsv`.
pub fn cmd_augment_audio(args: &AugmentAudioArgs, seed: Option<u64>) -> Result<Manifest> {
    require_file(&args.manifest, "manifest")?;
    let ops: Vec<OfflineOp> = parse_ops(&args.ops, &OfflineOp::ALL)?;
    let cfg = train_config(
        &TrainOverrides {
            config: args.config.clone(),
            ..TrainOverrides::default()
        },
        seed,
    )?;
    let aug = &cfg.augment.audio;
    let source = split_clips(&Manifest::load(&args.manifest)?).filter_split(Split::Train);
    let audio_dir = args.out.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;

    let mut jobs = Vec::new();
    for (si, row) in source.rows.iter().enumerate() {
        for op in &ops {
            for k in 0..args.copies {
                jobs.push((si, row, *op, k));
            }
        }
    }
    let outputs: Vec<Option<(ManifestRow, String)>> = jobs
        .par_iter()
        .map(|&(si, row, op, k)| {
            let job_seed = derive_seed(&[cfg.seed, aug.seed, si as u64, op as u64, k as u64, stream::OFFLINE_AUDIO]);
            let wave = load_clip_audio(&source, row)?;
            let partner = if op == OfflineOp::MixSameClass {
                let peers: Vec<&ManifestRow> = source
                    .rows
                    .iter()
                    .filter(|r| r.label == row.label && r.clip_id != row.clip_id)
                    .collect();
                if peers.is_empty() {
                    log::warn!("{}: no other clip of class {} to mix with, skipped", row.clip_id, row.label.name());
                    return Ok(None);
                }
                let pick = rng_from(&[job_seed, 1]).random_range(0..peers.len());
                Some(load_clip_audio(&source, peers[pick])?)
            } else {
                None
            };
            let (out_wave, param) = random_offline(op, &wave, partner.as_ref(), aug, job_seed)?;
            let clip_id = format!("{}+{}_{k}", row.clip_id, op.name());
            let file = format!("audio/{}.wav", clip_id.replace(['#', '/'], "_"));
            out_wave.write_wav(&args.out.join(&file))?;
            let video = match &row.video {
                VideoSource::Frames(dir) => {
                    let abs = source.resolve(dir);
                    let abs = std::fs::canonicalize(&abs).unwrap_or(abs);
                    VideoSource::Frames(abs.to_string_lossy().into_owned())
                }
                VideoSource::Embedding(key) => VideoSource::Embedding(key.clone()),
            };
            let new_row = ManifestRow {
                clip_id,
                audio_path: file,
                audio_offset: 0,
                num_samples: out_wave.len(),
                video,
                frames: row.frames,
                label: row.label,
                split: Split::Train,
            };
            Ok(Some((new_row, format!("{}\t{}\t{param}", row.clip_id, op.name()))))
        })
        .collect::<Result<_>>()?;
    let (rows, log_lines): (Vec<ManifestRow>, Vec<String>) = outputs.into_iter().flatten().unzip();
    let manifest = Manifest::new(rows, args.out.clone())?;
    manifest.save(&args.out.join("manifest.tsv"))?;
    let mut log_text = format!("{AUGMENT_LOG_HEADER}\n");
    for line in log_lines {
        log_text.push_str(&line);
        log_text.push('\n');
    }
    let log_path = args.out.join("augment_log.tsv");
    std::fs::write(&log_path, log_text).map_err(|e| Error::io(&log_path, e))?;
    Ok(manifest)
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => {
            let path = cmd_synth(a, cli.seed.unwrap_or(0))?;
            write_out(out, &format!("{}\n", path.display()))
        }
        Command::Extract(a) => {
            let n = cmd_extract(a)?;
            write_out(out, &format!("wrote {n} feature caches to {}\n", a.out.display()))
        }
        Command::Train(a) => cmd_train(a, cli.seed, out).map(|_| ()),
        Command::Eval(a) => write_out(out, &cmd_eval(a)?.to_text()),
        Command::AblateRandaugment(a) => {
            let report = cmd_ablate_randaugment(a, cli.seed, out)?;
            write_out(out, &report.to_text())
        }
        Command::AugmentAudio(a) => {
            let m = cmd_augment_audio(a, cli.seed)?;
            write_out(out, &format!("wrote {} clips to {}\n", m.len(), a.out.display()))
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = if cli.verbose { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return 2;
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("thread pool already initialized; --threads ignored");
        }
    }
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
