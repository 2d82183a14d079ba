//! FCNN audio extractor, video embedding provider, fusion MLP and the
//! `AVSC1` checkpoint format.
//!
//! Parameter names are dotted paths rooted at `audio.`, `video.` and `mlp.`
//! so freezing a subtree is a prefix operation on the [`ParamStore`].

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::features::{N_FRAMES, N_MAPS, N_MELS};
use crate::data::EmbeddingStore;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, BatchStats, Graph, Mode, Padding, ParamStore, Var, BN_MOMENTUM};
use crate::rng::{rng_from, stream, Rng};
use crate::tensor::{Real, Tensor};

pub const N_CLASSES: usize = 10;

pub const SCENE_CLASSES: [&str; N_CLASSES] = [
    "airport",
    "shopping mall",
    "metro station",
    "pedestrian street",
    "public square",
    "street traffic",
    "tram",
    "bus",
    "metro",
    "urban park",
];

/// Index into [`SCENE_CLASSES`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SceneLabel(u8);

impl SceneLabel {
    pub fn new(index: usize) -> Result<Self> {
        if index < N_CLASSES {
            Ok(Self(index as u8))
        } else {
            Err(Error::InvalidArgument(format!("scene label {index} outside 0..{N_CLASSES}")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        SCENE_CLASSES[self.index()]
    }

    pub fn one_hot<T: Real>(self) -> Vec<T> {
        (0..N_CLASSES)
            .map(|k| if k == self.index() { T::one() } else { T::zero() })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FcnnSpec {
    pub block_layers: Vec<usize>,
    pub block_channels: Vec<usize>,
    pub kernel: usize,
    pub dropout_rates: Vec<f64>,
    pub se_reduction: usize,
}

impl Default for FcnnSpec {
    fn default() -> Self {
        Self {
            block_layers: vec![2, 2, 2, 3],
            block_channels: vec![64, 128, 256, 512],
            kernel: 3,
            dropout_rates: vec![0.3; 4],
            se_reduction: 8,
        }
    }
}

impl FcnnSpec {
    /// Same depth with narrower blocks.
    pub fn with_channels(channels: [usize; 4]) -> Self {
        Self {
            block_channels: channels.to_vec(),
            ..Self::default()
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.block_channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.block_layers.len();
        if blocks != 4 || self.block_channels.len() != 4 || self.dropout_rates.len() != 4 {
            return Err(Error::Config("FCNN needs exactly four blocks".into()));
        }
        if self.block_layers.iter().sum::<usize>() != 9 {
            return Err(Error::Config(format!(
                "FCNN needs 9 conv layers in total, got {:?}",
                self.block_layers
            )));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.block_channels.contains(&0) || self.se_reduction == 0 {
            return Err(Error::Config("zero channel count".into()));
        }
        if self.embedding_dim() < self.se_reduction {
            return Err(Error::Config("SE reduction exceeds channel count".into()));
        }
        if self.dropout_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoCnnSpec {
    pub channels: Vec<usize>,
    pub input_size: usize,
}

impl Default for VideoCnnSpec {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            input_size: 224,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum VideoSpec {
    /// Precomputed embeddings; `E_V` arrives as model input.
    FileBacked { dim: usize },
    TrainableCnn { dim: usize, cnn: VideoCnnSpec },
}

impl VideoSpec {
    pub fn dim(&self) -> usize {
        match self {
            VideoSpec::FileBacked { dim } | VideoSpec::TrainableCnn { dim, .. } => *dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub fcnn: FcnnSpec,
    pub video: VideoSpec,
    /// Output sizes of the fusion layers; the last one is the class count.
    pub mlp: Vec<usize>,
}

impl ModelSpec {
    pub fn new(fcnn: FcnnSpec, video: VideoSpec) -> Self {
        Self {
            fcnn,
            video,
            mlp: vec![512, 128, 64, N_CLASSES],
        }
    }

    pub fn fusion_dim(&self) -> usize {
        self.fcnn.embedding_dim() + self.video.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.fcnn.validate()?;
        if self.video.dim() == 0 {
            return Err(Error::Config("video embedding dim must be positive".into()));
        }
        if let VideoSpec::TrainableCnn { cnn, .. } = &self.video {
            if cnn.channels.is_empty() || cnn.channels.contains(&0) {
                return Err(Error::Config("video CNN needs non-zero channels".into()));
            }
            if cnn.input_size >> cnn.channels.len() == 0 {
                return Err(Error::Config("video input too small for pooling".into()));
            }
        }
        if self.mlp.last() != Some(&N_CLASSES) || self.mlp.contains(&0) {
            return Err(Error::Config(format!(
                "MLP sizes {:?} must end in {N_CLASSES}",
                self.mlp
            )));
        }
        Ok(())
    }
}

/// Which extractor subtrees receive no updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezeConfig {
    pub audio: bool,
    pub video: bool,
}

impl FreezeConfig {
    pub fn apply<T: Real>(&self, params: &mut ParamStore<T>) {
        params.set_trainable("audio.", !self.audio);
        params.set_trainable("video.", !self.video);
    }
}

fn conv_name(prefix: &str, block: usize, layer: usize) -> String {
    format!("{prefix}.b{block}.l{layer}")
}

fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn add_conv_bn<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<()> {
    store.insert(&format!("{name}.w"), he_normal(&[c_out, c_in, k, k], c_in * k * k, rng))?;
    store.insert(&format!("{name}.gamma"), Tensor::full(&[c_out], T::one()))?;
    store.insert(&format!("{name}.beta"), Tensor::zeros(&[c_out]))?;
    store.insert_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c_out]))?;
    store.insert_buffer(&format!("{name}.running_var"), Tensor::full(&[c_out], T::one()))?;
    Ok(())
}

fn add_dense<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut Rng,
) -> Result<()> {
    store.insert(&format!("{name}.w"), he_normal(&[d_out, d_in], d_in, rng))?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[d_out]))
}

/// Freshly initialized parameters and buffers for `spec`.
pub fn init_params<T: Real>(spec: &ModelSpec, seed: u64) -> Result<ParamStore<T>> {
    spec.validate()?;
    let mut rng = rng_from(&[seed, stream::INIT]);
    let mut store = ParamStore::new();
    let f = &spec.fcnn;
    let mut c_in = N_MAPS;
    for (b, (&layers, &c_out)) in f.block_layers.iter().zip(&f.block_channels).enumerate() {
        for l in 0..layers {
            add_conv_bn(&mut store, &conv_name("audio", b, l), c_in, c_out, f.kernel, &mut rng)?;
            c_in = c_out;
        }
    }
    let c = f.embedding_dim();
    let hidden = (c / f.se_reduction).max(1);
    add_dense(&mut store, "audio.se.fc1", c, hidden, &mut rng)?;
    add_dense(&mut store, "audio.se.fc2", hidden, c, &mut rng)?;

    if let VideoSpec::TrainableCnn { dim, cnn } = &spec.video {
        let mut c_in = 3;
        for (b, &c_out) in cnn.channels.iter().enumerate() {
            add_conv_bn(&mut store, &conv_name("video", b, 0), c_in, c_out, 3, &mut rng)?;
            c_in = c_out;
        }
        add_dense(&mut store, "video.proj", c_in, *dim, &mut rng)?;
    }

    let mut d_in = spec.fusion_dim();
    for (k, &d_out) in spec.mlp.iter().enumerate() {
        add_dense(&mut store, &format!("mlp.fc{k}"), d_in, d_out, &mut rng)?;
        d_in = d_out;
    }
    Ok(store)
}

/// Batch statistics gathered by a training-mode forward pass, keyed by the
/// batch-norm layer name.
pub type BnUpdates<T> = Vec<(String, BatchStats<T>)>;

/// Forward-pass context shared by the sub-networks.
pub struct Ctx<'a, T> {
    pub graph: Graph<T>,
    pub params: &'a ParamStore<T>,
    pub mode: Mode,
    pub rng: Rng,
    pub bn_updates: BnUpdates<T>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(params: &'a ParamStore<T>, mode: Mode, dropout_seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            params,
            mode,
            rng: rng_from(&[dropout_seed, stream::DROPOUT]),
            bn_updates: Vec::new(),
        }
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        self.graph.param(self.params, name)
    }

    fn dense(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.graph.dense(x, w, b)
    }

    /// Same-padded conv (no bias, batch norm follows) -> BN -> ReLU.
    fn conv_bn_relu(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let c_out = self.graph.value(w).shape()[0];
        let zero_bias = self.graph.input(Tensor::zeros(&[c_out]))?;
        let y = self.graph.conv2d(x, w, zero_bias, Padding::Same)?;
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        let y = match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm_train(y, gamma, beta)?;
                self.bn_updates.push((name.to_string(), stats));
                y
            }
            Mode::Eval => {
                let mean = self.params.buffer(&format!("{name}.running_mean"))?.data().to_vec();
                let var = self.params.buffer(&format!("{name}.running_var"))?.data().to_vec();
                self.graph.batch_norm_eval(y, gamma, beta, &mean, &var)?
            }
        };
        self.graph.relu(y)
    }

    fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match self.mode {
            Mode::Train if rate > 0.0 => self.graph.dropout(x, rate, &mut self.rng),
            _ => Ok(x),
        }
    }
}

/// Intermediate nodes of the audio extractor.
#[derive(Clone, Copy, Debug)]
pub struct AudioTrunk {
    /// Last block output, before channel attention.
    pub features: Var,
    /// Sigmoid gates `[N, C]`.
    pub attention: Var,
    /// `E_A`, `[N, C]`.
    pub embedding: Var,
}

/// FCNN on `x: [N, 6, 39, 128]`.
pub fn fcnn_forward<T: Real>(ctx: &mut Ctx<'_, T>, spec: &FcnnSpec, x: Var) -> Result<AudioTrunk> {
    let shape = ctx.graph.value(x).shape();
    if shape.len() != 4 || shape[1..] != [N_MAPS, N_FRAMES, N_MELS] {
        return Err(Error::shape(
            "fcnn_forward",
            format!("expected [N,{N_MAPS},{N_FRAMES},{N_MELS}], got {shape:?}"),
        ));
    }
    let mut h = x;
    for (b, &layers) in spec.block_layers.iter().enumerate() {
        for l in 0..layers {
            h = ctx.conv_bn_relu(h, &conv_name("audio", b, l))?;
        }
        h = ctx.graph.max_pool2x2(h)?;
        h = ctx.dropout(h, spec.dropout_rates[b])?;
    }
    let squeeze = ctx.graph.global_avg_pool(h)?;
    let z = ctx.dense(squeeze, "audio.se.fc1")?;
    let z = ctx.graph.relu(z)?;
    let z = ctx.dense(z, "audio.se.fc2")?;
    let attention = ctx.graph.sigmoid(z)?;
    let scaled = ctx.graph.scale_channels(h, attention)?;
    let embedding = ctx.graph.global_avg_pool(scaled)?;
    Ok(AudioTrunk {
        features: h,
        attention,
        embedding,
    })
}

/// Small conv net on `frames: [M, 3, S, S]`, returning `[M, D_V]`.
pub fn video_cnn_forward<T: Real>(ctx: &mut Ctx<'_, T>, cnn: &VideoCnnSpec, frames: Var) -> Result<Var> {
    let shape = ctx.graph.value(frames).shape();
    if shape.len() != 4 || shape[1..] != [3, cnn.input_size, cnn.input_size] {
        return Err(Error::shape(
            "video_cnn_forward",
            format!("expected [N,3,{0},{0}], got {shape:?}", cnn.input_size),
        ));
    }
    let mut h = frames;
    for b in 0..cnn.channels.len() {
        h = ctx.conv_bn_relu(h, &conv_name("video", b, 0))?;
        h = ctx.graph.max_pool2x2(h)?;
    }
    let pooled = ctx.graph.global_avg_pool(h)?;
    ctx.dense(pooled, "video.proj")
}

/// Video-side model input.
#[derive(Clone, Debug)]
pub enum VideoInput<T> {
    /// `E_V` rows `[N, D_V]`, already summed over the two frames.
    Embeddings(Tensor<T>),
    /// First and fifteenth frames, each `[N, 3, S, S]`.
    Frames { first: Tensor<T>, second: Tensor<T> },
}

/// `E_V = f_V(first) + f_V(second)`. The trainable CNN sees both frame sets
/// as one batch of `2N` images.
pub fn video_embed<T: Real>(ctx: &mut Ctx<'_, T>, spec: &VideoSpec, input: &VideoInput<T>) -> Result<Var> {
    match (spec, input) {
        (VideoSpec::FileBacked { dim }, VideoInput::Embeddings(e)) => {
            if e.shape().len() != 2 || e.shape()[1] != *dim {
                return Err(Error::shape(
                    "video_embed",
                    format!("embeddings {:?} for D_V = {dim}", e.shape()),
                ));
            }
            ctx.graph.input(e.clone())
        }
        (VideoSpec::TrainableCnn { cnn, .. }, VideoInput::Frames { first, second }) => {
            if first.shape() != second.shape() {
                return Err(Error::shape(
                    "video_embed",
                    format!("frame batches {:?} vs {:?}", first.shape(), second.shape()),
                ));
            }
            let n = first.shape()[0];
            let both = Tensor::stack(&[first.clone(), second.clone()])?;
            let mut shape = first.shape().to_vec();
            shape[0] = 2 * n;
            let x = ctx.graph.input(both.reshape(&shape)?)?;
            let f = video_cnn_forward(ctx, cnn, x)?;
            let a = ctx.graph.slice_rows(f, 0, n)?;
            let b = ctx.graph.slice_rows(f, n, 2 * n)?;
            ctx.graph.add(a, b)
        }
        _ => Err(Error::InvalidArgument(
            "video input kind does not match the model's video provider".into(),
        )),
    }
}

/// Concatenates `[E_A, E_V]` and runs the fusion MLP, returning logits.
pub fn fuse_classify<T: Real>(ctx: &mut Ctx<'_, T>, mlp: &[usize], ea: Var, ev: Var) -> Result<Var> {
    let fused = ctx.graph.concat(ea, ev)?;
    let d = ctx.graph.value(fused).shape()[1];
    let expect = ctx.params.value("mlp.fc0.w")?.shape()[1];
    if d != expect {
        return Err(Error::shape(
            "fuse_classify",
            format!("fusion embedding has {d} entries, first layer expects {expect}"),
        ));
    }
    let mut h = fused;
    for k in 0..mlp.len() {
        h = ctx.dense(h, &format!("mlp.fc{k}"))?;
        if k + 1 < mlp.len() {
            h = ctx.graph.relu(h)?;
        }
    }
    Ok(h)
}

/// One batch of model inputs.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    /// `[N, 6, 39, 128]`.
    pub audio: Tensor<T>,
    pub video: VideoInput<T>,
}

impl<T: Real> ModelInput<T> {
    pub fn batch_size(&self) -> usize {
        self.audio.shape()[0]
    }
}

pub struct ForwardPass<'a, T> {
    pub ctx: Ctx<'a, T>,
    pub audio: AudioTrunk,
    pub video: Var,
    pub logits: Var,
}

impl<T: Real> ForwardPass<'_, T> {
    /// Releases the parameter borrow, keeping the tape and batch statistics.
    pub fn finish(self) -> (Graph<T>, BnUpdates<T>) {
        (self.ctx.graph, self.ctx.bn_updates)
    }

    /// Row-wise class probabilities.
    pub fn probs(&self) -> Vec<T> {
        crate::nn::softmax_rows(self.ctx.graph.value(self.logits).data(), N_CLASSES)
    }
}

pub fn model_forward<'a, T: Real>(
    spec: &ModelSpec,
    params: &'a ParamStore<T>,
    input: &ModelInput<T>,
    mode: Mode,
    dropout_seed: u64,
) -> Result<ForwardPass<'a, T>> {
    let mut ctx = Ctx::new(params, mode, dropout_seed);
    let xa = ctx.graph.input(input.audio.clone())?;
    let audio = fcnn_forward(&mut ctx, &spec.fcnn, xa)?;
    let video = video_embed(&mut ctx, &spec.video, &input.video)?;
    if ctx.graph.value(video).shape()[0] != input.batch_size() {
        return Err(Error::shape("model_forward", "audio and video batch sizes differ"));
    }
    let logits = fuse_classify(&mut ctx, &spec.mlp, audio.embedding, video)?;
    Ok(ForwardPass {
        ctx,
        audio,
        video,
        logits,
    })
}

/// Forward pass plus mean cross entropy against `targets: [N, 10]`.
pub fn model_forward_loss<'a, T: Real>(
    spec: &ModelSpec,
    params: &'a ParamStore<T>,
    input: &ModelInput<T>,
    targets: &Tensor<T>,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(ForwardPass<'a, T>, Var)> {
    let mut pass = model_forward(spec, params, input, mode, dropout_seed)?;
    let loss = pass.ctx.graph.softmax_cross_entropy(pass.logits, targets)?;
    Ok((pass, loss))
}

/// Folds batch statistics into the running buffers,
/// `running = momentum * running + (1 - momentum) * batch`. Layers whose
/// parameters are frozen keep their statistics.
pub fn update_running_stats<T: Real>(params: &mut ParamStore<T>, updates: &BnUpdates<T>) -> Result<()> {
    let m = T::lit(BN_MOMENTUM);
    let one_m = T::lit(1.0 - BN_MOMENTUM);
    for (name, stats) in updates {
        if !params.is_trainable(&format!("{name}.gamma")) {
            continue;
        }
        for (key, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let buf = params.buffer_mut(&format!("{name}.{key}"))?;
            for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                *r = m * *r + one_m * b;
            }
        }
    }
    Ok(())
}

/// Sum of the two stored frame embeddings of one clip.
pub fn file_embedding(store: &EmbeddingStore, clip_id: &str, frames: [u32; 2]) -> Result<Vec<f32>> {
    let a = store.get(clip_id, frames[0])?;
    let b = store.get(clip_id, frames[1])?;
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 5] = b"AVSC1";
pub const CKPT_VERSION: u32 = 1;

/// Model spec, parameters with optimizer state, and the Adam settings.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamStore<f32>,
    pub adam: AdamConfig,
}

fn put_u32(w: &mut Vec<u8>, v: usize) {
    w.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn list(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        (0..n).map(|_| self.u32()).collect()
    }
}

fn put_list(w: &mut Vec<u8>, xs: &[usize]) {
    put_u32(w, xs.len());
    for &x in xs {
        put_u32(w, x);
    }
}

fn encode_spec(w: &mut Vec<u8>, spec: &ModelSpec) {
    let f = &spec.fcnn;
    put_list(w, &f.block_layers);
    put_list(w, &f.block_channels);
    put_u32(w, f.dropout_rates.len());
    for &r in &f.dropout_rates {
        put_f64(w, r);
    }
    put_u32(w, f.kernel);
    put_u32(w, f.se_reduction);
    match &spec.video {
        VideoSpec::FileBacked { dim } => {
            put_u32(w, 0);
            put_u32(w, *dim);
        }
        VideoSpec::TrainableCnn { dim, cnn } => {
            put_u32(w, 1);
            put_u32(w, *dim);
            put_list(w, &cnn.channels);
            put_u32(w, cnn.input_size);
        }
    }
    put_list(w, &spec.mlp);
}

fn decode_spec(c: &mut Cursor<'_>) -> Result<ModelSpec> {
    let block_layers = c.list()?;
    let block_channels = c.list()?;
    let n = c.u32()?;
    let dropout_rates = (0..n).map(|_| c.f64()).collect::<Result<_>>()?;
    let kernel = c.u32()?;
    let se_reduction = c.u32()?;
    let video = match c.u32()? {
        0 => VideoSpec::FileBacked { dim: c.u32()? },
        1 => {
            let dim = c.u32()?;
            let channels = c.list()?;
            let input_size = c.u32()?;
            VideoSpec::TrainableCnn {
                dim,
                cnn: VideoCnnSpec { channels, input_size },
            }
        }
        k => return Err(Error::format(c.path, format!("unknown video kind {k}"))),
    };
    let mlp = c.list()?;
    let spec = ModelSpec {
        fcnn: FcnnSpec {
            block_layers,
            block_channels,
            kernel,
            dropout_rates,
            se_reduction,
        },
        video,
        mlp,
    };
    spec.validate()
        .map_err(|e| Error::format(c.path, format!("invalid model spec: {e}")))?;
    Ok(spec)
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: ParamStore<f32>, adam: AdamConfig) -> Self {
        Self { spec, params, adam }
    }

    /// Serializes to the `AVSC1` layout: magic, version, spec block, sorted
    /// name-indexed records of little-endian `f32` values (parameters,
    /// buffers, and `#adam_m` / `#adam_v` moments), Adam settings as `f64`,
    /// and the step count.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut w, CKPT_VERSION as usize);
        encode_spec(&mut w, &self.spec);

        let mut records: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (name, e) in self.params.entries() {
            records.push((name.to_string(), &e.value));
            records.push((format!("{name}#adam_m"), &e.adam_m));
            records.push((format!("{name}#adam_v"), &e.adam_v));
        }
        for (name, t) in self.params.buffers() {
            records.push((name.to_string(), t));
        }
        records.sort_by(|a, b| a.0.cmp(&b.0));
        put_u32(&mut w, records.len());
        for (name, t) in records {
            put_u32(&mut w, name.len());
            w.extend_from_slice(name.as_bytes());
            put_list(&mut w, t.shape());
            for v in t.data() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        let a = &self.adam;
        for v in [a.lr, a.beta1, a.beta2, a.eps, a.weight_decay] {
            put_f64(&mut w, v);
        }
        w.extend_from_slice(&self.params.step_count.to_le_bytes());
        w
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0, path };
        if c.take(5)? != CKPT_MAGIC {
            return Err(Error::format(path, "missing AVSC1 magic"));
        }
        let version = c.u32()?;
        if version != CKPT_VERSION as usize {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let spec = decode_spec(&mut c)?;
        let mut params: ParamStore<f32> = init_params(&spec, 0)?;
        let expected = 3 * params.len() + params.buffers().count();
        let n = c.u32()?;
        if n != expected {
            return Err(Error::format(
                path,
                format!("{n} records, architecture needs {expected}"),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for i in 0..n {
            let len = c.u32()?;
            let name = std::str::from_utf8(c.take(len)?)
                .map_err(|_| Error::format(path, format!("record {i}: name is not UTF-8")))?
                .to_string();
            let shape = c.list()?;
            let count: usize = shape.iter().product();
            let raw = c.take(4 * count)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let bad = |d: &str| Error::format(path, format!("record {i} `{name}`: {d}"));
            let slot = if let Some(base) = name.strip_suffix("#adam_m") {
                params.entry_mut(base).ok().map(|e| &mut e.adam_m)
            } else if let Some(base) = name.strip_suffix("#adam_v") {
                params.entry_mut(base).ok().map(|e| &mut e.adam_v)
            } else if params.buffer(&name).is_ok() {
                params.buffer_mut(&name).ok()
            } else {
                params.entry_mut(&name).ok().map(|e| &mut e.value)
            };
            let slot = slot.ok_or_else(|| bad("unknown name"))?;
            if slot.shape() != shape.as_slice() {
                return Err(bad(&format!("shape {shape:?}, expected {:?}", slot.shape())));
            }
            slot.data_mut().copy_from_slice(&data);
            if !seen.insert(name.clone()) {
                return Err(bad("duplicate record"));
            }
        }
        let adam = AdamConfig {
            lr: c.f64()?,
            beta1: c.f64()?,
            beta2: c.f64()?,
            eps: c.f64()?,
            weight_decay: c.f64()?,
        };
        params.step_count = c.u64()?;
        if c.pos != buf.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(Self { spec, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}
