//! Python bindings for the `avsc` toolkit.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use avsc::audio::augment::{channel_confusion, spec_augment};
use avsc::audio::features::{build_lmfb, LmfbTensor, Waveform};
use avsc::cli::{cmd_train, DataArgs, TrainArgs, TrainOverrides};
use avsc::data::{generate_synthetic, load_samples, split_clips, EmbeddingStore, Manifest, VideoLoad};
use avsc::image_ops::{apply_op, rand_augment, ImageOp, RandAugmentConfig};
use avsc::models::{Checkpoint, VideoSpec, SCENE_CLASSES};
use avsc::rng::rng_from;
use avsc::train::{evaluate, joint_mixup, select_mixup_pairs, MixSample, MixupConfig, MixupMode, TrainConfig};
use avsc::Error;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::MissingEmbedding { .. } | Error::UnknownParameter(_) => PyKeyError::new_err(msg),
        Error::Numerical(_) | Error::NonFinite(_) | Error::NonFiniteGradient(_) => PyArithmeticError::new_err(msg),
        Error::Shape { .. }
        | Error::InvalidArgument(_)
        | Error::UnknownOp(_)
        | Error::Config(_)
        | Error::Manifest(_)
        | Error::Format { .. } => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for avsc::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// 6 x 39 x 128 log-Mel feature block, maps first.
#[pyclass(name = "Features", module = "avsc_py")]
struct PyFeatures {
    inner: LmfbTensor,
}

#[pymethods]
impl PyFeatures {
    #[new]
    fn new(values: Vec<f32>) -> PyResult<Self> {
        Ok(Self { inner: LmfbTensor::from_maps(values).py()? })
    }

    /// `(frames, mels, maps)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    fn get(&self, frame: usize, mel: usize, map: usize) -> PyResult<f32> {
        let (t, m, c) = self.inner.shape();
        if frame >= t || mel >= m || map >= c {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.get(frame, mel, map))
    }

    /// Flat values in `[map][frame][mel]` order.
    fn to_list(&self) -> Vec<f32> {
        self.inner.as_slice().to_vec()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: LmfbTensor::load(&path).py()? })
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Features(shape={:?})", self.inner.shape())
    }
}

/// Features of one stereo clip given as two channels of samples in [-1, 1].
#[pyfunction]
fn extract_features(left: Vec<f64>, right: Vec<f64>) -> PyResult<PyFeatures> {
    let wave = Waveform::new(left, right).py()?;
    Ok(PyFeatures { inner: build_lmfb(&wave).py()? })
}

/// Features of the first second of a WAV file.
#[pyfunction]
fn extract_wav(path: PathBuf) -> PyResult<PyFeatures> {
    let wave = Waveform::read_wav(&path).py()?;
    let clip = wave.segment(0, avsc::audio::features::CLIP_SAMPLES);
    Ok(PyFeatures { inner: build_lmfb(&clip).py()? })
}

/// Returns the masked features and the `(time, freq)` mask ranges.
#[pyfunction]
#[pyo3(signature = (features, seed, fraction = 0.1))]
#[pyo3(name = "spec_augment")]
fn py_spec_augment(
    features: &PyFeatures,
    seed: u64,
    fraction: f64,
) -> (PyFeatures, (usize, usize), (usize, usize)) {
    let (out, masks) = spec_augment(&features.inner, fraction, seed);
    (
        PyFeatures { inner: out },
        (masks.time.start, masks.time.end),
        (masks.freq.start, masks.freq.end),
    )
}

/// Returns the features and whether the stereo map groups were swapped.
#[pyfunction]
#[pyo3(signature = (features, seed, prob = 0.5))]
#[pyo3(name = "channel_confusion")]
fn py_channel_confusion(features: &PyFeatures, seed: u64, prob: f64) -> (PyFeatures, bool) {
    let (out, swapped) = channel_confusion(&features.inner, prob, seed);
    (PyFeatures { inner: out }, swapped)
}

/// RGB image with 8-bit channels.
#[pyclass(name = "Image", module = "avsc_py")]
struct PyImage {
    inner: avsc::image_ops::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, pixels: Vec<u8>) -> PyResult<Self> {
        Ok(Self { inner: avsc::image_ops::Image::new(height, width, pixels).py()? })
    }

    #[staticmethod]
    fn load_png(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: avsc::image_ops::Image::load_png(&path).py()? })
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(&path).py()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Row-major interleaved RGB bytes.
    fn pixels(&self) -> Vec<u8> {
        self.inner.pixels().to_vec()
    }

    /// Applies one named op at magnitude `m` (0..=30).
    #[pyo3(signature = (op, magnitude, seed = 0))]
    fn apply(&self, op: &str, magnitude: u32, seed: u64) -> PyResult<Self> {
        let op: ImageOp = op.parse().py()?;
        let out = apply_op(&self.inner, op, magnitude, &mut rng_from(&[seed])).py()?;
        Ok(Self { inner: out })
    }

    /// RandAugment with `n_ops` draws from `policy` at `magnitude`.
    #[pyo3(signature = (seed, n_ops = 2, magnitude = 14, policy = None))]
    fn rand_augment(&self, seed: u64, n_ops: usize, magnitude: u32, policy: Option<Vec<String>>) -> PyResult<Self> {
        let mut cfg = RandAugmentConfig { n_ops, magnitude, seed, ..RandAugmentConfig::default() };
        if let Some(names) = policy {
            cfg.policy = names.iter().map(|n| n.parse()).collect::<avsc::Result<_>>().py()?;
        }
        Ok(Self { inner: rand_augment(&self.inner, &cfg).py()? })
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

/// Mixes two `(audio, video, target)` triples with one shared ratio.
#[pyfunction]
#[pyo3(name = "joint_mixup")]
fn py_joint_mixup(
    a: (Vec<f64>, Vec<f64>, Vec<f64>),
    b: (Vec<f64>, Vec<f64>, Vec<f64>),
    lam: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let a = MixSample { audio: a.0, video: a.1, target: a.2 };
    let b = MixSample { audio: b.0, video: b.1, target: b.2 };
    let m = joint_mixup(&a, &b, lam).py()?;
    Ok((m.audio, m.video, m.target))
}

/// `(i, j, lambda)` triples for one batch.
#[pyfunction]
#[pyo3(signature = (batch_size, seed, alpha = 0.4, fraction = 0.2, beta = false))]
#[pyo3(name = "select_mixup_pairs")]
fn py_select_mixup_pairs(
    batch_size: usize,
    seed: u64,
    alpha: f64,
    fraction: f64,
    beta: bool,
) -> PyResult<Vec<(usize, usize, f64)>> {
    let mode = if beta { MixupMode::BetaSampled } else { MixupMode::FixedRatio };
    let cfg = MixupConfig { alpha, fraction, mode, seed };
    let pairs = select_mixup_pairs(batch_size, &cfg, &mut rng_from(&[seed])).py()?;
    Ok(pairs.into_iter().map(|p| (p.i, p.j, p.lambda)).collect())
}

/// Manifest of clips; rows are exposed as dictionaries.
#[pyclass(name = "Manifest", module = "avsc_py")]
struct PyManifest {
    inner: Manifest,
}

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Manifest::load(&path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    /// One-second rows derived from longer clips.
    fn split_clips(&self) -> Self {
        Self { inner: split_clips(&self.inner) }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn rows<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("clip_id", &r.clip_id)?;
                d.set_item("audio_path", &r.audio_path)?;
                d.set_item("audio_offset", r.audio_offset)?;
                d.set_item("num_samples", r.num_samples)?;
                d.set_item("video_source", r.video.to_string())?;
                d.set_item("frames", (r.frames[0], r.frames[1]))?;
                d.set_item("label", r.label.name())?;
                d.set_item("split", r.split.to_string())?;
                Ok(d)
            })
            .collect()
    }
}

/// File-backed video embeddings keyed by `(clip_id, frame_index)`.
#[pyclass(name = "EmbeddingStore", module = "avsc_py")]
struct PyEmbeddingStore {
    inner: EmbeddingStore,
}

#[pymethods]
impl PyEmbeddingStore {
    #[new]
    fn new(dim: usize) -> PyResult<Self> {
        Ok(Self { inner: EmbeddingStore::new(dim).py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: EmbeddingStore::load(&path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn insert(&mut self, clip_id: &str, frame: u32, values: Vec<f32>) -> PyResult<()> {
        self.inner.insert(clip_id, frame, values).py()
    }

    fn get(&self, clip_id: &str, frame: u32) -> PyResult<Vec<f32>> {
        Ok(self.inner.get(clip_id, frame).py()?.to_vec())
    }
}

/// Writes a synthetic corpus and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n_per_class, seed = 0))]
fn synthesize(out_dir: PathBuf, n_per_class: usize, seed: u64) -> PyResult<PathBuf> {
    generate_synthetic(n_per_class, seed, &out_dir).py()?;
    Ok(out_dir.join("manifest.tsv"))
}

/// Default training configuration as TOML text.
#[pyfunction]
fn default_config() -> String {
    TrainConfig::default().to_toml()
}

/// Trains from a manifest and returns the epoch log lines.
#[pyfunction]
#[pyo3(signature = (manifest, out, config = None, embeddings = None, trainable_video = false, epochs = None, seed = None))]
fn train(
    manifest: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    trainable_video: bool,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> PyResult<Vec<String>> {
    let args = TrainArgs {
        data: DataArgs { manifest, embeddings, trainable_video, cache: None },
        overrides: TrainOverrides { config, epochs, ..TrainOverrides::default() },
        out,
    };
    let outcome = cmd_train(&args, seed, &mut std::io::sink()).py()?;
    Ok(outcome.logs.iter().map(|l| l.line()).collect())
}

/// Evaluates a checkpoint; returns overall and per-class accuracy and the
/// confusion matrix.
#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, embeddings = None))]
#[pyo3(name = "evaluate")]
fn py_evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    manifest: PathBuf,
    embeddings: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let ckpt = Checkpoint::load(&checkpoint).py()?;
    let m = split_clips(&Manifest::load(&manifest).py()?);
    let store = embeddings.map(|p| EmbeddingStore::load(&p)).transpose().py()?;
    let how = match (&ckpt.spec.video, &store) {
        (VideoSpec::TrainableCnn { cnn, .. }, _) => VideoLoad::Frames { size: cnn.input_size },
        (VideoSpec::FileBacked { .. }, Some(s)) => VideoLoad::Embeddings(s),
        (VideoSpec::FileBacked { .. }, None) => {
            return Err(PyValueError::new_err("checkpoint uses file-backed embeddings; pass embeddings="))
        }
    };
    let samples = load_samples(&m, how, None).py()?;
    let report = evaluate(&ckpt.spec, &ckpt.params, &samples).py()?;
    let d = PyDict::new(py);
    d.set_item("overall", report.overall_accuracy)?;
    d.set_item("per_class", report.per_class_accuracy.to_vec())?;
    d.set_item("confusion", report.confusion.iter().map(|r| r.to_vec()).collect::<Vec<_>>())?;
    d.set_item("text", report.to_text())?;
    Ok(d)
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    avsc::cli::run(std::iter::once("avsc".to_string()).chain(args), &mut std::io::stdout())
}

#[pymodule]
fn avsc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SCENE_CLASSES", SCENE_CLASSES.to_vec())?;
    m.add(
        "IMAGE_OPS",
        avsc::image_ops::SEARCH_SPACE.iter().map(|op| op.name()).collect::<Vec<_>>(),
    )?;
    m.add_class::<PyFeatures>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyManifest>()?;
    m.add_class::<PyEmbeddingStore>()?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(extract_wav, m)?)?;
    m.add_function(wrap_pyfunction!(py_spec_augment, m)?)?;
    m.add_function(wrap_pyfunction!(py_channel_confusion, m)?)?;
    m.add_function(wrap_pyfunction!(py_joint_mixup, m)?)?;
    m.add_function(wrap_pyfunction!(py_select_mixup_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(py_evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
