//! Dataset manifests, 1-second clip splitting, the `AVEM` embedding store,
//! the synthetic corpus generator, and loading of training samples.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::augment::add_noise;
use crate::audio::features::{build_lmfb, LmfbTensor, Waveform, CLIP_SAMPLES, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::image_ops::{resize_bilinear, Image};
use crate::models::{SceneLabel, N_CLASSES, SCENE_CLASSES};
use crate::rng::{derive_seed, rng_from, stream};

/// Frames per second of the source video.
pub const VIDEO_FPS: u32 = 30;
/// Offsets of the two sampled frames within each second.
pub const FRAME_OFFSETS: [u32; 2] = [0, 14];
/// Allowed shortfall when counting whole seconds in a source clip.
pub const SPLIT_TOLERANCE: usize = 480;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Manifest(format!("unknown split `{s}`"))),
        }
    }
}

/// Where a clip's video comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VideoSource {
    /// Directory of `frame_NNNNN.png` files, relative to the manifest.
    Frames(String),
    /// Key into an embedding store.
    Embedding(String),
}

impl fmt::Display for VideoSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VideoSource::Frames(d) => write!(f, "frames:{d}"),
            VideoSource::Embedding(k) => write!(f, "embedding:{k}"),
        }
    }
}

impl FromStr for VideoSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("frames", d)) if !d.is_empty() => Ok(VideoSource::Frames(d.to_string())),
            Some(("embedding", k)) if !k.is_empty() => Ok(VideoSource::Embedding(k.to_string())),
            _ => Err(Error::Manifest(format!(
                "video_source `{s}` is not frames:DIR or embedding:KEY"
            ))),
        }
    }
}

pub fn frame_file_name(index: u32) -> String {
    format!("frame_{index:05}.png")
}

fn parse_label(s: &str) -> Result<SceneLabel> {
    if let Some(i) = SCENE_CLASSES.iter().position(|&n| n == s) {
        return SceneLabel::new(i);
    }
    s.parse::<usize>()
        .map_err(|_| Error::Manifest(format!("unknown scene label `{s}`")))
        .and_then(|i| SceneLabel::new(i).map_err(|e| Error::Manifest(e.to_string())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub clip_id: String,
    /// WAV path relative to the manifest directory.
    pub audio_path: String,
    pub audio_offset: usize,
    pub num_samples: usize,
    pub video: VideoSource,
    pub frames: [u32; 2],
    pub label: SceneLabel,
    pub split: Split,
}

impl ManifestRow {
    /// Lookup key for file-backed embeddings.
    pub fn embedding_key(&self) -> &str {
        match &self.video {
            VideoSource::Embedding(k) => k,
            VideoSource::Frames(_) => &self.clip_id,
        }
    }
}

pub const MANIFEST_HEADER: [&str; 9] = [
    "clip_id",
    "audio_path",
    "audio_offset",
    "num_samples",
    "video_source",
    "frame_a",
    "frame_b",
    "label",
    "split",
];

/// Tab-separated manifest with a fixed header row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, root: PathBuf) -> Result<Self> {
        let m = Self { rows, root };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.clip_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate clip_id `{}`", r.clip_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn filter_split(&self, split: Split) -> Manifest {
        Manifest {
            rows: self.rows.iter().filter(|r| r.split == split).cloned().collect(),
            root: self.root.clone(),
        }
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .has_headers(true)
            .quoting(false)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::Manifest(e.to_string()))?
            .clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Manifest(format!(
                "header {:?}, expected {MANIFEST_HEADER:?}",
                header.iter().collect::<Vec<_>>()
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Manifest(format!("row {}: {e}", i + 1)))?;
            let field = |k: usize| rec.get(k).unwrap_or("");
            let num = |k: usize| -> Result<usize> {
                field(k).parse().map_err(|_| {
                    Error::Manifest(format!(
                        "row {}: {} `{}` is not a non-negative integer",
                        i + 1,
                        MANIFEST_HEADER[k],
                        field(k)
                    ))
                })
            };
            if field(0).is_empty() {
                return Err(Error::Manifest(format!("row {}: empty clip_id", i + 1)));
            }
            rows.push(ManifestRow {
                clip_id: field(0).to_string(),
                audio_path: field(1).to_string(),
                audio_offset: num(2)?,
                num_samples: num(3)?,
                video: field(4).parse()?,
                frames: [num(5)? as u32, num(6)? as u32],
                label: parse_label(field(7))?,
                split: field(8).parse()?,
            });
        }
        Self::new(rows, root)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        let mut out = MANIFEST_HEADER.join("\t");
        out.push('\n');
        for r in &self.rows {
            let fields = [
                r.clip_id.clone(),
                r.audio_path.clone(),
                r.audio_offset.to_string(),
                r.num_samples.to_string(),
                r.video.to_string(),
                r.frames[0].to_string(),
                r.frames[1].to_string(),
                r.label.name().to_string(),
                r.split.to_string(),
            ];
            out.push_str(&fields.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Checks that every referenced audio file and frame exists.
    pub fn check_paths(&self) -> Result<()> {
        for r in &self.rows {
            let audio = self.resolve(&r.audio_path);
            if !audio.is_file() {
                return Err(Error::Manifest(format!(
                    "clip `{}`: audio {} not found",
                    r.clip_id,
                    audio.display()
                )));
            }
            if let VideoSource::Frames(dir) = &r.video {
                for f in r.frames {
                    let p = self.resolve(dir).join(frame_file_name(f));
                    if !p.is_file() {
                        return Err(Error::Manifest(format!(
                            "clip `{}`: frame {} not found",
                            r.clip_id,
                            p.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Splits long rows into non-overlapping 1-second children `id#k` with
/// frames `(frame_a + 30k, frame_a + 30k + 14)`. A source yields
/// `floor((len + 480) / 48000)` children, so a clip missing up to 480 samples
/// of a whole second still counts it. One-second rows pass through
/// unchanged; shorter rows are dropped with a warning.
pub fn split_clips(manifest: &Manifest) -> Manifest {
    let mut rows = Vec::new();
    for r in &manifest.rows {
        let count = (r.num_samples + SPLIT_TOLERANCE) / CLIP_SAMPLES;
        match count {
            0 => log::warn!(
                "skipping clip `{}`: {} samples is shorter than one second",
                r.clip_id,
                r.num_samples
            ),
            1 => rows.push(r.clone()),
            _ => {
                for k in 0..count {
                    let base = r.frames[0] + VIDEO_FPS * k as u32;
                    rows.push(ManifestRow {
                        clip_id: format!("{}#{k}", r.clip_id),
                        audio_offset: r.audio_offset + k * CLIP_SAMPLES,
                        num_samples: CLIP_SAMPLES,
                        frames: [base + FRAME_OFFSETS[0], base + FRAME_OFFSETS[1]],
                        ..r.clone()
                    });
                }
            }
        }
    }
    Manifest {
        rows,
        root: manifest.root.clone(),
    }
}

// ---------------------------------------------------------------------------
// Embedding store

const AVEM_MAGIC: &[u8; 4] = b"AVEM";
pub const AVEM_VERSION: u32 = 1;

/// `(clip_id, frame_index) -> f32` vectors sharing one dimension, kept in
/// insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    records: Vec<(String, u32, Vec<f32>)>,
    index: HashMap<(String, u32), usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be positive".into()));
        }
        Ok(Self {
            dim,
            records: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, clip_id: &str, frame: u32, values: Vec<f32>) -> Result<()> {
        let i = self.records.len();
        if values.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "record {i} (`{clip_id}`, {frame}) has {} values, store dim is {}",
                values.len(),
                self.dim
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding `{clip_id}` frame {frame}")));
        }
        let key = (clip_id.to_string(), frame);
        if self.index.contains_key(&key) {
            return Err(Error::InvalidArgument(format!(
                "record {i}: duplicate key (`{clip_id}`, {frame})"
            )));
        }
        self.index.insert(key, i);
        self.records.push((clip_id.to_string(), frame, values));
        Ok(())
    }

    pub fn get(&self, clip_id: &str, frame: u32) -> Result<&[f32]> {
        self.index
            .get(&(clip_id.to_string(), frame))
            .map(|&i| self.records[i].2.as_slice())
            .ok_or_else(|| Error::MissingEmbedding {
                clip_id: clip_id.to_string(),
                frame_index: frame,
            })
    }

    pub fn records(&self) -> impl Iterator<Item = (&str, u32, &[f32])> {
        self.records.iter().map(|(c, f, v)| (c.as_str(), *f, v.as_slice()))
    }

    /// `AVEM` | u32 version | u32 dim | u32 count | records of
    /// (u32 id length, id bytes, u32 frame, dim little-endian f32).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(AVEM_MAGIC);
        for v in [AVEM_VERSION, self.dim as u32, self.records.len() as u32] {
            w.extend_from_slice(&v.to_le_bytes());
        }
        for (id, frame, values) in &self.records {
            w.extend_from_slice(&(id.len() as u32).to_le_bytes());
            w.extend_from_slice(id.as_bytes());
            w.extend_from_slice(&frame.to_le_bytes());
            for v in values {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        w
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            let s = buf
                .get(pos..pos + n)
                .ok_or_else(|| Error::format(path, format!("truncated reading {what}")))?;
            pos += n;
            Ok(s)
        };
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        if take(4, "magic")? != AVEM_MAGIC {
            return Err(Error::format(path, "missing AVEM magic"));
        }
        let version = u32_of(take(4, "version")?);
        if version != AVEM_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let dim = u32_of(take(4, "dim")?) as usize;
        let count = u32_of(take(4, "count")?) as usize;
        let mut store =
            Self::new(dim).map_err(|e| Error::format(path, e.to_string()))?;
        for i in 0..count {
            let what = format!("record {i}");
            let len = u32_of(take(4, &what)?) as usize;
            let id = std::str::from_utf8(take(len, &what)?)
                .map_err(|_| Error::format(path, format!("record {i}: id is not UTF-8")))?
                .to_string();
            let frame = u32_of(take(4, &what)?);
            let values = take(4 * dim, &what)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            store
                .insert(&id, frame, values)
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        if pos != buf.len() {
            return Err(Error::format(path, "trailing bytes after last record"));
        }
        Ok(store)
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

// ---------------------------------------------------------------------------
// Synthetic corpus

pub const SYNTH_EMBED_DIM: usize = 64;
pub const SYNTH_IMAGE_SIZE: usize = 224;
const SYNTH_SNR_DB: f64 = 20.0;

/// The two tone frequencies of class `c`.
pub fn synth_tones(c: usize) -> [f64; 2] {
    [300.0 + 100.0 * c as f64, 800.0 + 150.0 * c as f64]
}

/// Fully saturated-ish RGB for hue `36c` degrees.
pub fn synth_hue_rgb(c: usize) -> [f64; 3] {
    let h = (36.0 * c as f64) / 60.0;
    let (s, v) = (0.8, 200.0);
    let chroma = v * s;
    let x = chroma * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = v - chroma;
    [r + m, g + m, b + m]
}

fn synth_wave(c: usize, seed: u64) -> Result<Waveform> {
    let mut rng = rng_from(&[seed]);
    let tones = synth_tones(c);
    let mut chans = [Vec::new(), Vec::new()];
    for ch in &mut chans {
        let phases: [f64; 2] = [rng.random_range(0.0..6.28), rng.random_range(0.0..6.28)];
        *ch = (0..CLIP_SAMPLES)
            .map(|n| {
                let t = n as f64 / SAMPLE_RATE as f64;
                tones
                    .iter()
                    .zip(phases)
                    .map(|(f, p)| 0.25 * (2.0 * std::f64::consts::PI * f * t + p).sin())
                    .sum::<f64>()
            })
            .collect();
    }
    let [l, r] = chans;
    add_noise(&Waveform::new(l, r)?, SYNTH_SNR_DB, derive_seed(&[seed, 1]))
}

fn synth_image(c: usize, seed: u64) -> Result<Image> {
    let mut rng = rng_from(&[seed]);
    let base = synth_hue_rgb(c);
    let n = SYNTH_IMAGE_SIZE;
    let mut px = Vec::with_capacity(n * n * 3);
    for _ in 0..n * n {
        let shade: f64 = rng.random_range(-25.0..25.0);
        for b in base {
            let jitter: f64 = rng.random_range(-8.0..8.0);
            px.push((b + shade + jitter).round().clamp(0.0, 255.0) as u8);
        }
    }
    Image::new(n, n, px)
}

/// Writes a class-separable corpus to `out_dir`: `audio/*.wav`,
/// `frames/<clip>/frame_00000.png` and `frame_00014.png`,
/// `embeddings.avem`, and `manifest.tsv`. Each class is split 80/20 into
/// train and test (at least one test clip).
pub fn generate_synthetic(n_per_class: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n_per_class < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_per_class must be at least 2, got {n_per_class}"
        )));
    }
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&out_dir.join("audio"))?;
    mkdir(&out_dir.join("frames"))?;

    let mut mean_rng = rng_from(&[seed, stream::SYNTH, 0]);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let means: Vec<Vec<f64>> = (0..N_CLASSES)
        .map(|_| (0..SYNTH_EMBED_DIM).map(|_| unit.sample(&mut mean_rng)).collect())
        .collect();
    let noise = Normal::new(0.0, 0.35).expect("noise normal");

    let n_test = ((n_per_class as f64 * 0.2).round() as usize).max(1);
    let mut store = EmbeddingStore::new(SYNTH_EMBED_DIM)?;
    let mut rows = Vec::new();
    for c in 0..N_CLASSES {
        for i in 0..n_per_class {
            let clip_id = format!("c{c}_{i:03}");
            let clip_seed = derive_seed(&[seed, stream::SYNTH, c as u64 + 1, i as u64]);
            let audio_rel = format!("audio/{clip_id}.wav");
            synth_wave(c, derive_seed(&[clip_seed, 0]))?.write_wav(&out_dir.join(&audio_rel))?;

            let frames_rel = format!("frames/{clip_id}");
            mkdir(&out_dir.join(&frames_rel))?;
            for (k, f) in FRAME_OFFSETS.into_iter().enumerate() {
                let img = synth_image(c, derive_seed(&[clip_seed, 1, k as u64]))?;
                img.save_png(&out_dir.join(&frames_rel).join(frame_file_name(f)))?;
                let mut rng = rng_from(&[clip_seed, 2, k as u64]);
                let e = means[c].iter().map(|&m| (m + noise.sample(&mut rng)) as f32).collect();
                store.insert(&clip_id, f, e)?;
            }

            rows.push(ManifestRow {
                clip_id,
                audio_path: audio_rel,
                audio_offset: 0,
                num_samples: CLIP_SAMPLES,
                video: VideoSource::Frames(frames_rel),
                frames: FRAME_OFFSETS,
                label: SceneLabel::new(c)?,
                split: if i < n_per_class - n_test { Split::Train } else { Split::Test },
            });
        }
    }
    store.save(&out_dir.join("embeddings.avem"))?;
    let manifest = Manifest::new(rows, out_dir.to_path_buf())?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Loaded samples

/// Video data for one clip, ready for the model.
#[derive(Clone, Debug)]
pub enum SampleVideo {
    /// Summed file-backed embedding.
    Embedding(Vec<f32>),
    /// First and fifteenth frames at the model's input size.
    Frames(Box<[Image; 2]>),
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub clip_id: String,
    pub label: SceneLabel,
    pub features: LmfbTensor,
    pub video: SampleVideo,
}

/// How to obtain each clip's video data.
#[derive(Clone, Copy, Debug)]
pub enum VideoLoad<'a> {
    Embeddings(&'a EmbeddingStore),
    Frames { size: usize },
}

/// Reads the clip's 1-second window, zero-padded past the end of the file.
pub fn load_clip_audio(manifest: &Manifest, row: &ManifestRow) -> Result<Waveform> {
    let wave = Waveform::read_wav(&manifest.resolve(&row.audio_path))?;
    Ok(wave.segment(row.audio_offset, CLIP_SAMPLES))
}

/// Cache file name for a clip's features, with `#` and `/` replaced.
pub fn feature_cache_name(clip_id: &str) -> String {
    format!("{}.lmf", clip_id.replace(['#', '/'], "_"))
}

/// Features for one row, read from `cache_dir` when present there.
pub fn load_features(manifest: &Manifest, row: &ManifestRow, cache_dir: Option<&Path>) -> Result<LmfbTensor> {
    if let Some(dir) = cache_dir {
        let path = dir.join(feature_cache_name(&row.clip_id));
        if path.is_file() {
            return LmfbTensor::load(&path);
        }
    }
    build_lmfb(&load_clip_audio(manifest, row)?)
}

pub fn load_video(manifest: &Manifest, row: &ManifestRow, how: VideoLoad<'_>) -> Result<SampleVideo> {
    match how {
        VideoLoad::Embeddings(store) => Ok(SampleVideo::Embedding(crate::models::file_embedding(
            store,
            row.embedding_key(),
            row.frames,
        )?)),
        VideoLoad::Frames { size } => {
            let VideoSource::Frames(dir) = &row.video else {
                return Err(Error::Manifest(format!(
                    "clip `{}` has no frames directory",
                    row.clip_id
                )));
            };
            let load = |f: u32| -> Result<Image> {
                let img = Image::load_png(&manifest.resolve(dir).join(frame_file_name(f)))?;
                resize_bilinear(&img, size, size)
            };
            Ok(SampleVideo::Frames(Box::new([load(row.frames[0])?, load(row.frames[1])?])))
        }
    }
}

/// Loads every row of `manifest` (features in parallel).
pub fn load_samples(manifest: &Manifest, how: VideoLoad<'_>, cache_dir: Option<&Path>) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    manifest
        .rows
        .par_iter()
        .map(|row| {
            Ok(Sample {
                clip_id: row.clip_id.clone(),
                label: row.label,
                features: load_features(manifest, row, cache_dir)?,
                video: load_video(manifest, row, how)?,
            })
        })
        .collect()
}
