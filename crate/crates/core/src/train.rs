//! Joint audio-video mixup, the training loop and evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::augment::{channel_confusion, spec_augment, AudioAugConfig};
use crate::data::{Sample, SampleVideo};
use crate::error::{Error, Result};
use crate::image_ops::{rand_augment_with, RandAugmentConfig};
use crate::models::{
    init_params, model_forward, model_forward_loss, update_running_stats, FcnnSpec, FreezeConfig,
    ModelInput, ModelSpec, VideoCnnSpec, VideoInput, VideoSpec, N_CLASSES,
};
use crate::nn::{AdamConfig, Mode, ParamStore};
use crate::rng::{derive_seed, rng_from, stream, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixupMode {
    /// `lambda = alpha` for every pair.
    FixedRatio,
    /// `lambda ~ Beta(alpha, alpha)`.
    BetaSampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixupConfig {
    pub alpha: f64,
    pub fraction: f64,
    pub mode: MixupMode,
    pub seed: u64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            fraction: 0.2,
            mode: MixupMode::FixedRatio,
            seed: 0,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("mixup alpha {} outside (0, 1)", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::Config(format!(
                "mixup fraction {} outside [0, 1]",
                self.fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixPair {
    pub i: usize,
    pub j: usize,
    pub lambda: f64,
}

/// Selects each batch position with probability `cfg.fraction` and pairs it
/// with a uniformly drawn different position.
pub fn select_mixup_pairs(batch_size: usize, cfg: &MixupConfig, rng: &mut Rng) -> Result<Vec<MixPair>> {
    cfg.validate()?;
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "mixup needs a batch of at least 2, got {batch_size}"
        )));
    }
    let beta = Beta::new(cfg.alpha, cfg.alpha)
        .map_err(|e| Error::Config(format!("mixup beta distribution: {e}")))?;
    let mut pairs = Vec::new();
    for i in 0..batch_size {
        if rng.random::<f64>() >= cfg.fraction {
            continue;
        }
        let mut j = rng.random_range(0..batch_size - 1);
        if j >= i {
            j += 1;
        }
        let lambda = match cfg.mode {
            MixupMode::FixedRatio => cfg.alpha,
            MixupMode::BetaSampled => beta.sample(rng),
        };
        pairs.push(MixPair { i, j, lambda });
    }
    Ok(pairs)
}

/// One modality pair plus soft target.
#[derive(Clone, Debug, PartialEq)]
pub struct MixSample<T> {
    pub audio: Vec<T>,
    pub video: Vec<T>,
    pub target: Vec<T>,
}

/// Mixing weights `(w_i, w_j)` with `w_i + w_j = 1`. The weight on the side
/// with the larger share is formed first and the other is its exact
/// complement, so swapping the arguments and using `1 - lambda` yields the
/// same pair of weights.
fn mix_weights(lambda: f64) -> (f64, f64) {
    if lambda >= 0.5 {
        (lambda, 1.0 - lambda)
    } else {
        let wj = 1.0 - lambda;
        (1.0 - wj, wj)
    }
}

fn mix_vec(a: &[f32], b: &[f32], wa: f32, wb: f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| wa * x + wb * y).collect()
}

fn mix_vec64(a: &[f64], b: &[f64], wa: f64, wb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| wa * x + wb * y).collect()
}

fn check_mix_shapes<T>(a: &MixSample<T>, b: &MixSample<T>, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    if a.audio.len() != b.audio.len() || a.video.len() != b.video.len() || a.target.len() != b.target.len() {
        return Err(Error::shape(
            "joint_mixup",
            format!(
                "audio {}/{}, video {}/{}, target {}/{}",
                a.audio.len(),
                b.audio.len(),
                a.video.len(),
                b.video.len(),
                a.target.len(),
                b.target.len()
            ),
        ));
    }
    Ok(())
}

/// `lambda * x_i + (1 - lambda) * x_j` applied with one shared ratio to the
/// audio input, the video input and the target.
pub fn joint_mixup(a: &MixSample<f64>, b: &MixSample<f64>, lambda: f64) -> Result<MixSample<f64>> {
    check_mix_shapes(a, b, lambda)?;
    let (wa, wb) = mix_weights(lambda);
    Ok(MixSample {
        audio: mix_vec64(&a.audio, &b.audio, wa, wb),
        video: mix_vec64(&a.video, &b.video, wa, wb),
        target: mix_vec64(&a.target, &b.target, wa, wb),
    })
}

/// [`joint_mixup`] on the 32-bit training representation.
pub fn joint_mixup_f32(a: &MixSample<f32>, b: &MixSample<f32>, lambda: f64) -> Result<MixSample<f32>> {
    check_mix_shapes(a, b, lambda)?;
    let (wa, wb) = mix_weights(lambda);
    let (wa, wb) = (wa as f32, wb as f32);
    Ok(MixSample {
        audio: mix_vec(&a.audio, &b.audio, wa, wb),
        video: mix_vec(&a.video, &b.video, wa, wb),
        target: mix_vec(&a.target, &b.target, wa, wb),
    })
}

/// Which on-the-fly perturbations run during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub spec_augment: bool,
    pub channel_confusion: bool,
    pub rand_augment: bool,
    pub audio: AudioAugConfig,
    pub image: RandAugmentConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            spec_augment: true,
            channel_confusion: true,
            rand_augment: true,
            audio: AudioAugConfig::default(),
            image: RandAugmentConfig::default(),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            spec_augment: false,
            channel_confusion: false,
            rand_augment: false,
            ..Self::default()
        }
    }
}

/// Architecture settings that are not implied by the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub fcnn: FcnnSpec,
    /// `D_V` of the trainable video CNN; file-backed stores set their own.
    pub video_dim: usize,
    pub video_cnn: VideoCnnSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fcnn: FcnnSpec::default(),
            video_dim: 64,
            video_cnn: VideoCnnSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, trainable_video: bool, file_dim: usize) -> ModelSpec {
        let video = if trainable_video {
            VideoSpec::TrainableCnn {
                dim: self.video_dim,
                cnn: self.video_cnn.clone(),
            }
        } else {
            VideoSpec::FileBacked { dim: file_dim }
        };
        ModelSpec::new(self.fcnn.clone(), video)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub mixup: MixupConfig,
    pub freeze: FreezeConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 32,
            epochs: 50,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            mixup: MixupConfig::default(),
            freeze: FreezeConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} must be at least 2 for batch norm",
                self.batch_size
            )));
        }
        self.adam.validate()?;
        self.augment.audio.validate()?;
        self.augment.image.validate()?;
        self.mixup.validate()?;
        self.model.fcnn.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Header line echoing the optimization and augmentation settings.
    pub fn log_header(&self) -> String {
        let ra = &self.augment.image;
        format!(
            "# lr={:e} wd={:e} batch={} alpha={} mixup={}% N={} M={} epochs={} seed={}",
            self.adam.lr,
            self.adam.weight_decay,
            self.batch_size,
            self.mixup.alpha,
            self.mixup.fraction * 100.0,
            ra.n_ops,
            ra.magnitude,
            self.epochs,
            self.seed
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Splits a permutation into batches, folding a trailing singleton into the
/// previous batch so every batch has at least two samples.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Model-ready representation of one sample.
struct Prepared {
    audio: Vec<f32>,
    /// Either the embedding, or both frames concatenated.
    video: Vec<f32>,
}

fn sample_seed(cfg: &TrainConfig, component: u64, epoch: usize, index: usize, tag: u64) -> u64 {
    derive_seed(&[cfg.seed, component, epoch as u64, index as u64, tag])
}

fn prepare(sample: &Sample, index: usize, epoch: usize, cfg: &TrainConfig, augment: bool) -> Result<Prepared> {
    let aug = &cfg.augment;
    let mut feat = sample.features.clone();
    if augment && aug.spec_augment {
        let seed = sample_seed(cfg, aug.audio.seed, epoch, index, stream::SPEC_AUGMENT);
        feat = spec_augment(&feat, aug.audio.specaug_fraction, seed).0;
    }
    if augment && aug.channel_confusion {
        let seed = sample_seed(cfg, aug.audio.seed, epoch, index, stream::CHANNEL_CONFUSION);
        feat = channel_confusion(&feat, aug.audio.channel_confusion_prob, seed).0;
    }
    let video = match &sample.video {
        SampleVideo::Embedding(e) => e.clone(),
        SampleVideo::Frames(frames) => {
            let mut out = Vec::new();
            for (k, img) in frames.iter().enumerate() {
                let t = if augment && aug.rand_augment {
                    let seed = sample_seed(cfg, aug.image.seed, epoch, index, stream::RAND_AUGMENT);
                    let mut rng = rng_from(&[seed, k as u64]);
                    rand_augment_with(img, &aug.image, &mut rng)?.to_tensor::<f32>()
                } else {
                    img.to_tensor::<f32>()
                };
                out.extend_from_slice(t.data());
            }
            out
        }
    };
    Ok(Prepared {
        audio: feat.to_tensor::<f32>().into_data(),
        video,
    })
}

fn assemble(spec: &ModelSpec, audio: Vec<f32>, video: Vec<f32>, n: usize) -> Result<ModelInput<f32>> {
    let audio_t = Tensor::new(vec![n, 6, 39, 128], audio)?;
    let video = match &spec.video {
        VideoSpec::FileBacked { dim } => {
            VideoInput::Embeddings(Tensor::new(vec![n, *dim], video)?)
        }
        VideoSpec::TrainableCnn { cnn, .. } => {
            let plane = 3 * cnn.input_size * cnn.input_size;
            if video.len() != n * 2 * plane {
                return Err(Error::shape(
                    "assemble",
                    format!("frames do not match the {0}x{0} video input", cnn.input_size),
                ));
            }
            let (mut first, mut second) = (Vec::with_capacity(n * plane), Vec::with_capacity(n * plane));
            for pair in video.chunks(2 * plane) {
                first.extend_from_slice(&pair[..plane]);
                second.extend_from_slice(&pair[plane..]);
            }
            let shape = vec![n, 3, cnn.input_size, cnn.input_size];
            VideoInput::Frames {
                first: Tensor::new(shape.clone(), first)?,
                second: Tensor::new(shape, second)?,
            }
        }
    };
    Ok(ModelInput { audio: audio_t, video })
}

/// One pass over `samples`: seeded shuffle, per-sample augmentation, joint
/// mixup on selected pairs, then forward, backward and an Adam step per
/// batch.
pub fn train_epoch(
    spec: &ModelSpec,
    params: &mut ParamStore<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least 2 samples".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng_from(&[cfg.seed, epoch as u64, stream::SHUFFLE]));

    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
        let n = idx.len();
        let prepared: Vec<Prepared> = idx
            .par_iter()
            .map(|&i| prepare(&samples[i], i, epoch, cfg, true))
            .collect::<Result<_>>()?;
        let mut mixed: Vec<MixSample<f32>> = prepared
            .into_iter()
            .zip(idx)
            .map(|(p, &i)| MixSample {
                audio: p.audio,
                video: p.video,
                target: samples[i].label.one_hot(),
            })
            .collect();

        let mut mix_rng = rng_from(&[cfg.seed, cfg.mixup.seed, epoch as u64, b as u64, stream::MIXUP]);
        let pairs = select_mixup_pairs(n, &cfg.mixup, &mut mix_rng)?;
        if !pairs.is_empty() {
            let originals = mixed.clone();
            for p in pairs {
                mixed[p.i] = joint_mixup_f32(&originals[p.i], &originals[p.j], p.lambda)?;
            }
        }

        let mut audio = Vec::with_capacity(n * mixed[0].audio.len());
        let mut video = Vec::with_capacity(n * mixed[0].video.len());
        let mut target = Vec::with_capacity(n * N_CLASSES);
        for m in mixed {
            audio.extend(m.audio);
            video.extend(m.video);
            target.extend(m.target);
        }
        let input = assemble(spec, audio, video, n)?;
        let targets = Tensor::new(vec![n, N_CLASSES], target)?;

        let numeric = |e: Error| match e {
            Error::NonFinite(what) | Error::NonFiniteGradient(what) => Error::Numerical(format!(
                "non-finite {what} at epoch {epoch} batch {b}"
            )),
            other => other,
        };
        let dropout_seed = derive_seed(&[cfg.seed, epoch as u64, b as u64]);
        let (pass, loss) =
            model_forward_loss(spec, params, &input, &targets, Mode::Train, dropout_seed).map_err(numeric)?;
        let probs = pass.probs();
        let (graph, updates) = pass.finish();
        let loss_value = graph.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!("loss is {loss_value} at epoch {epoch} batch {b}")));
        }
        let grads = graph.backward(loss).map_err(numeric)?;
        params.accumulate_grads(&graph, &grads)?;
        drop(graph);
        update_running_stats(params, &updates)?;
        params.adam_step(&cfg.adam).map_err(numeric)?;

        loss_sum += loss_value * n as f64;
        correct += probs
            .chunks(N_CLASSES)
            .zip(targets.data().chunks(N_CLASSES))
            .filter(|(p, t)| argmax(p) == argmax(t))
            .count();
    }
    Ok(EpochStats {
        epoch,
        mean_loss: loss_sum / samples.len() as f64,
        train_accuracy: correct as f64 / samples.len() as f64,
    })
}

/// Accuracy summary over a labelled set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    /// Per-class accuracy; 0 for classes without samples.
    pub per_class_accuracy: [f64; N_CLASSES],
    /// `confusion[true][predicted]` counts.
    pub confusion: [[usize; N_CLASSES]; N_CLASSES],
}

impl EvalReport {
    pub fn from_predictions(labels: &[usize], predictions: &[usize]) -> Result<Self> {
        if labels.is_empty() || labels.len() != predictions.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels vs {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut confusion = [[0usize; N_CLASSES]; N_CLASSES];
        for (&t, &p) in labels.iter().zip(predictions) {
            confusion[t][p] += 1;
        }
        let mut per_class_accuracy = [0.0; N_CLASSES];
        for (c, row) in confusion.iter().enumerate() {
            let n: usize = row.iter().sum();
            if n > 0 {
                per_class_accuracy[c] = row[c] as f64 / n as f64;
            }
        }
        let trace: usize = (0..N_CLASSES).map(|c| confusion[c][c]).sum();
        Ok(Self {
            overall_accuracy: trace as f64 / labels.len() as f64,
            per_class_accuracy,
            confusion,
        })
    }

    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        std::array::from_fn(|c| self.confusion[c].iter().sum())
    }

    pub fn total(&self) -> usize {
        self.class_counts().iter().sum()
    }

    /// Per-class accuracy table followed by the confusion matrix.
    pub fn to_text(&self) -> String {
        let counts = self.class_counts();
        let mut s = String::new();
        writeln!(s, "{:<20} {:>6} {:>8}", "class", "n", "acc(%)").unwrap();
        for (c, name) in crate::models::SCENE_CLASSES.iter().enumerate() {
            let acc = if counts[c] > 0 {
                format!("{:.1}", 100.0 * self.per_class_accuracy[c])
            } else {
                "-".into()
            };
            writeln!(s, "{name:<20} {:>6} {acc:>8}", counts[c]).unwrap();
        }
        writeln!(s, "{:<20} {:>6} {:>8.1}", "overall", self.total(), 100.0 * self.overall_accuracy).unwrap();
        writeln!(s, "confusion (rows true, columns predicted):").unwrap();
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>4}")).collect();
            writeln!(s, "{}", cells.join("")).unwrap();
        }
        s
    }
}

/// Predicted class per sample in eval mode (no augmentation, no mixup).
pub fn predict(
    spec: &ModelSpec,
    params: &ParamStore<f32>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<usize>> {
    let cfg = TrainConfig::default();
    let chunks: Vec<&[Sample]> = samples.chunks(batch_size.max(1)).collect();
    let per_chunk: Vec<Vec<usize>> = chunks
        .par_iter()
        .map(|chunk| {
            let n = chunk.len();
            let mut audio = Vec::new();
            let mut video = Vec::new();
            for (i, s) in chunk.iter().enumerate() {
                let p = prepare(s, i, 0, &cfg, false)?;
                audio.extend(p.audio);
                video.extend(p.video);
            }
            let input = assemble(spec, audio, video, n)?;
            let pass = model_forward(spec, params, &input, Mode::Eval, 0)?;
            Ok(pass.probs().chunks(N_CLASSES).map(argmax).collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_chunk.concat())
}

pub fn evaluate(spec: &ModelSpec, params: &ParamStore<f32>, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let predictions = predict(spec, params, samples, 32)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
    EvalReport::from_predictions(&labels, &predictions)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub stats: EpochStats,
    pub eval_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let eval = self
            .eval_accuracy
            .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        format!(
            "epoch={} loss={:.6} train_acc={:.4} eval_acc={eval} wall_seconds={:.2}",
            self.stats.epoch, self.stats.mean_loss, self.stats.train_accuracy, self.wall_seconds
        )
    }
}

/// Fresh parameters for `spec` with the freeze mask applied.
pub fn init_model(spec: &ModelSpec, cfg: &TrainConfig) -> Result<ParamStore<f32>> {
    let mut params = init_params(spec, cfg.seed)?;
    cfg.freeze.apply(&mut params);
    Ok(params)
}

/// Runs `cfg.epochs` epochs, evaluating on `eval` after each one when given.
/// `on_epoch` sees every log entry with the current parameters and returns
/// `false` to stop early.
pub fn fit(
    spec: &ModelSpec,
    params: &mut ParamStore<f32>,
    train: &[Sample],
    eval: Option<&[Sample]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &ParamStore<f32>) -> Result<bool>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let start = Instant::now();
    let mut logs = Vec::new();
    for epoch in 0..cfg.epochs {
        let stats = train_epoch(spec, params, train, cfg, epoch)?;
        let eval_accuracy = match eval {
            Some(s) if !s.is_empty() => Some(evaluate(spec, params, s)?.overall_accuracy),
            _ => None,
        };
        let log = EpochLog {
            stats,
            eval_accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        let keep_going = on_epoch(&log, params)?;
        logs.push(log);
        if !keep_going {
            break;
        }
    }
    Ok(logs)
}
