//! Stereo waveform to log-Mel / delta / delta-delta feature block.
//!
//! A 48000-sample clip gives 47 STFT frames (n_fft 2048, hop 1024, centered).
//! Each delta application drops 4 frames, so statics are trimmed 4 per side
//! and deltas 2 per side to keep all six maps on the same 39 center frames.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SAMPLE_RATE: u32 = 48_000;
pub const CLIP_SAMPLES: usize = 48_000;
pub const N_FFT: usize = 2048;
pub const HOP: usize = 1024;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 128;
pub const N_FRAMES: usize = 39;
pub const N_MAPS: usize = 6;
pub const LOG_FLOOR: f64 = 1e-10;

/// Stereo audio, one `Vec` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    channels: [Vec<f64>; 2],
    sample_rate: u32,
}

impl Waveform {
    pub fn new(left: Vec<f64>, right: Vec<f64>) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::InvalidArgument(format!(
                "channel lengths differ: {} vs {}",
                left.len(),
                right.len()
            )));
        }
        if let Some(v) = left
            .iter()
            .chain(&right)
            .find(|v| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "sample {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            channels: [left, right],
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn silence(len: usize) -> Self {
        Self {
            channels: [vec![0.0; len], vec![0.0; len]],
            sample_rate: SAMPLE_RATE,
        }
    }

    /// Clamps into [-1, 1] instead of rejecting.
    pub fn from_clamped(left: Vec<f64>, right: Vec<f64>) -> Result<Self> {
        let clamp = |v: Vec<f64>| v.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Self::new(clamp(left), clamp(right))
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn left(&self) -> &[f64] {
        &self.channels[0]
    }

    pub fn right(&self) -> &[f64] {
        &self.channels[1]
    }

    /// Mean squared sample value over both channels.
    pub fn power(&self) -> f64 {
        let n = 2 * self.len();
        if n == 0 {
            return 0.0;
        }
        self.channels.iter().flatten().map(|v| v * v).sum::<f64>() / n as f64
    }

    /// Samples `[start, start + len)`, zero-padded past the end.
    pub fn segment(&self, start: usize, len: usize) -> Self {
        let take = |c: &Vec<f64>| {
            (start..start + len)
                .map(|i| c.get(i).copied().unwrap_or(0.0))
                .collect()
        };
        Self {
            channels: [take(&self.channels[0]), take(&self.channels[1])],
            sample_rate: self.sample_rate,
        }
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        if spec.channels != 2 || spec.sample_rate != SAMPLE_RATE {
            return Err(Error::format(
                path,
                format!(
                    "expected 48 kHz stereo, got {} Hz with {} channels",
                    spec.sample_rate, spec.channels
                ),
            ));
        }
        let samples: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(wav_err)?
            }
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?,
        };
        let left = samples.iter().step_by(2).copied().collect();
        let right = samples.iter().skip(1).step_by(2).copied().collect();
        Self::from_clamped(left, right)
    }

    /// 16-bit PCM, 48 kHz, stereo.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for i in 0..self.len() {
            for c in &self.channels {
                let q = (c[i] * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
                w.write_sample(q).map_err(wav_err)?;
            }
        }
        w.finalize().map_err(wav_err)
    }
}

fn fft_plan() -> Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(N_FFT))
        .clone()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reflect-padding index (mirror without repeating the edge sample).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Centered power spectrogram `[1 + L / hop, n_fft / 2 + 1]`.
pub fn stft_power(signal: &[f64]) -> Result<Tensor<f64>> {
    if signal.is_empty() {
        return Err(Error::InvalidArgument("empty signal".into()));
    }
    let frames = 1 + signal.len() / HOP;
    let window = hann(N_FFT);
    let fft = fft_plan();
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut out = Vec::with_capacity(frames * N_BINS);
    for f in 0..frames {
        let start = (f * HOP) as isize - (N_FFT / 2) as isize;
        for (k, slot) in buf.iter_mut().enumerate() {
            let s = signal[reflect(start + k as isize, signal.len())];
            *slot = Complex::new(s * window[k], 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..N_BINS].iter().map(|c| c.norm_sqr()));
    }
    Tensor::new(vec![frames, N_BINS], out)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// Slaney-scale, area-normalized triangular filters over 0..24 kHz,
/// row-major `[N_MELS, N_BINS]`.
pub fn mel_filterbank() -> &'static [f64] {
    static BANK: OnceLock<Vec<f64>> = OnceLock::new();
    BANK.get_or_init(|| {
        let fmax = SAMPLE_RATE as f64 / 2.0;
        let max_mel = hz_to_mel(fmax);
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(max_mel * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz: Vec<f64> = (0..N_BINS)
            .map(|k| k as f64 * SAMPLE_RATE as f64 / N_FFT as f64)
            .collect();
        let mut bank = vec![0.0; N_MELS * N_BINS];
        for m in 0..N_MELS {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            for (k, &f) in bin_hz.iter().enumerate() {
                let rising = (f - lo) / (mid - lo);
                let falling = (hi - f) / (hi - mid);
                bank[m * N_BINS + k] = rising.min(falling).max(0.0) * norm;
            }
        }
        bank
    })
}

/// `log(max(power @ bank^T, 1e-10))`, `[T, N_BINS] -> [T, N_MELS]`.
pub fn mel_project(power: &Tensor<f64>) -> Result<Tensor<f64>> {
    let [frames, bins] = power.shape() else {
        return Err(Error::shape("mel_project", format!("{:?}", power.shape())));
    };
    if *bins != N_BINS {
        return Err(Error::shape(
            "mel_project",
            format!("expected {N_BINS} bins, got {bins}"),
        ));
    }
    let bank = mel_filterbank();
    let mut out = Vec::with_capacity(frames * N_MELS);
    for row in power.data().chunks(N_BINS) {
        for filt in bank.chunks(N_BINS) {
            let e: f64 = filt.iter().zip(row).map(|(a, b)| a * b).sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Tensor::new(vec![*frames, N_MELS], out)
}

/// Unpadded two-term regression delta, `[T, D] -> [T - 4, D]`.
pub fn delta(seq: &Tensor<f64>) -> Result<Tensor<f64>> {
    let [t, d] = seq.shape() else {
        return Err(Error::shape("delta", format!("{:?}", seq.shape())));
    };
    let (t, d) = (*t, *d);
    if t < 5 {
        return Err(Error::InvalidArgument(format!(
            "delta needs at least 5 frames, got {t}"
        )));
    }
    let x = seq.data();
    let at = |r: usize, c: usize| x[r * d + c];
    let mut out = Vec::with_capacity((t - 4) * d);
    for r in 2..t - 2 {
        for c in 0..d {
            let d1 = at(r + 1, c) - at(r - 1, c);
            let d2 = at(r + 2, c) - at(r - 2, c);
            out.push((d1 + 2.0 * d2) / 10.0);
        }
    }
    Tensor::new(vec![t - 4, d], out)
}

/// Six time-aligned maps `[L, L-Δ, L-ΔΔ, R, R-Δ, R-ΔΔ]`, each 39 x 128.
/// Stored maps-first so that it feeds a `[6, 39, 128]` convolution input.
#[derive(Clone, Debug, PartialEq)]
pub struct LmfbTensor {
    data: Vec<f32>,
}

impl LmfbTensor {
    pub const MAP_LEN: usize = N_FRAMES * N_MELS;

    pub fn from_maps(data: Vec<f32>) -> Result<Self> {
        if data.len() != N_MAPS * Self::MAP_LEN {
            return Err(Error::shape(
                "lmfb",
                format!("expected {} values, got {}", N_MAPS * Self::MAP_LEN, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lmfb tensor".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; N_MAPS * Self::MAP_LEN],
        }
    }

    /// `(frames, mels, maps)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (N_FRAMES, N_MELS, N_MAPS)
    }

    pub fn get(&self, frame: usize, mel: usize, map: usize) -> f32 {
        self.data[(map * N_FRAMES + frame) * N_MELS + mel]
    }

    pub fn set(&mut self, frame: usize, mel: usize, map: usize, v: f32) {
        self.data[(map * N_FRAMES + frame) * N_MELS + mel] = v;
    }

    pub fn map(&self, m: usize) -> &[f32] {
        &self.data[m * Self::MAP_LEN..(m + 1) * Self::MAP_LEN]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// `[6, 39, 128]` tensor in the requested precision.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::new(vec![N_MAPS, N_FRAMES, N_MELS], data).expect("fixed shape")
    }

    /// Exchanges the left (maps 0..3) and right (maps 3..6) groups.
    pub fn swap_channels(&mut self) {
        let (l, r) = self.data.split_at_mut(3 * Self::MAP_LEN);
        l.swap_with_slice(r);
    }

    /// Cache layout: `"LMF1"`, extents (39, 128, 6) as u32 LE, then
    /// f32 LE values in frames x mels x maps order.
    pub fn write_cache(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(b"LMF1")?;
        for e in [N_FRAMES, N_MELS, N_MAPS] {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for f in 0..N_FRAMES {
            for m in 0..N_MELS {
                for k in 0..N_MAPS {
                    buf.extend_from_slice(&self.get(f, m, k).to_le_bytes());
                }
            }
        }
        w.write_all(&buf)
    }

    pub fn read_cache(mut r: impl Read, path: &Path) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        if &header[..4] != b"LMF1" {
            return Err(Error::format(path, "bad magic, expected LMF1"));
        }
        let ext: Vec<usize> = header[4..]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if ext != [N_FRAMES, N_MELS, N_MAPS] {
            return Err(Error::format(path, format!("unexpected extents {ext:?}")));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
        if body.len() != 4 * N_FRAMES * N_MELS * N_MAPS {
            return Err(Error::format(path, format!("body has {} bytes", body.len())));
        }
        let mut t = Self::zeros();
        let mut vals = body.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for f in 0..N_FRAMES {
            for m in 0..N_MELS {
                for k in 0..N_MAPS {
                    t.set(f, m, k, vals.next().unwrap());
                }
            }
        }
        Self::from_maps(t.data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_cache(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_cache(std::io::BufReader::new(f), path)
    }
}

fn channel_maps(signal: &[f64]) -> Result<[Tensor<f64>; 3]> {
    let logmel = mel_project(&stft_power(signal)?)?;
    let d1 = delta(&logmel)?;
    let d2 = delta(&d1)?;
    let trim = |t: &Tensor<f64>, skip: usize| {
        Tensor::new(
            vec![N_FRAMES, N_MELS],
            t.data()[skip * N_MELS..(skip + N_FRAMES) * N_MELS].to_vec(),
        )
    };
    Ok([trim(&logmel, 4)?, trim(&d1, 2)?, d2])
}

/// Full feature block for one 1-second 48 kHz stereo clip.
pub fn build_lmfb(wave: &Waveform) -> Result<LmfbTensor> {
    if wave.len() != CLIP_SAMPLES || wave.sample_rate() != SAMPLE_RATE {
        return Err(Error::InvalidArgument(format!(
            "expected {CLIP_SAMPLES} samples at {SAMPLE_RATE} Hz, got {} at {}",
            wave.len(),
            wave.sample_rate()
        )));
    }
    let mut data = Vec::with_capacity(N_MAPS * LmfbTensor::MAP_LEN);
    for ch in 0..2 {
        for map in channel_maps(wave.channel(ch))? {
            data.extend(map.data().iter().map(|&v| v as f32));
        }
    }
    LmfbTensor::from_maps(data)
}
