//! Waveform generators (pitch, speed, noise, same-class mixing) and the two
//! on-the-fly feature perturbations (SpecAugment masking, channel swap).

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::{hann, LmfbTensor, Waveform, N_FRAMES, N_MAPS, N_MELS};
use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioAugConfig {
    pub pitch_semitones_range: [f64; 2],
    pub speed_factor_range: [f64; 2],
    pub noise_snr_db_range: [f64; 2],
    pub mix_weight_range: [f64; 2],
    pub specaug_fraction: f64,
    pub channel_confusion_prob: f64,
    pub seed: u64,
}

impl Default for AudioAugConfig {
    fn default() -> Self {
        Self {
            pitch_semitones_range: [-2.0, 2.0],
            speed_factor_range: [0.9, 1.1],
            noise_snr_db_range: [15.0, 30.0],
            mix_weight_range: [0.3, 0.7],
            specaug_fraction: 0.10,
            channel_confusion_prob: 0.5,
            seed: 0,
        }
    }
}

impl AudioAugConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        let ok = ordered(self.pitch_semitones_range)
            && self.pitch_semitones_range[0] >= -12.0
            && self.pitch_semitones_range[1] <= 12.0
            && ordered(self.speed_factor_range)
            && self.speed_factor_range[0] >= 0.5
            && self.speed_factor_range[1] <= 2.0
            && ordered(self.noise_snr_db_range)
            && ordered(self.mix_weight_range)
            && self.mix_weight_range[0] >= 0.0
            && self.mix_weight_range[1] <= 1.0
            && self.specaug_fraction > 0.0
            && self.specaug_fraction < 1.0
            && (0.0..=1.0).contains(&self.channel_confusion_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid audio augmentation settings {self:?}")))
        }
    }
}

/// Linear-interpolation resampling: output sample `i` reads input position
/// `i * step`; output length is `round(len / step)`.
pub fn resample_linear(x: &[f64], step: f64) -> Vec<f64> {
    let out_len = (x.len() as f64 / step).round() as usize;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            let a = x.get(i0).copied().unwrap_or(0.0);
            let b = x.get(i0 + 1).copied().unwrap_or(0.0);
            if frac == 0.0 {
                a
            } else {
                a + frac * (b - a)
            }
        })
        .collect()
}

/// Zero-pads or center-crops to exactly `len` samples (content centered).
fn fit_length(x: Vec<f64>, len: usize) -> Vec<f64> {
    match x.len().cmp(&len) {
        std::cmp::Ordering::Equal => x,
        std::cmp::Ordering::Greater => {
            let off = (x.len() - len) / 2;
            x[off..off + len].to_vec()
        }
        std::cmp::Ordering::Less => {
            let off = (len - x.len()) / 2;
            let mut out = vec![0.0; len];
            out[off..off + x.len()].copy_from_slice(&x);
            out
        }
    }
}

const OLA_FRAME: usize = 1024;
const OLA_HOP: usize = 256;
const OLA_TOLERANCE: isize = 256;

fn sample_at(x: &[f64], i: isize) -> f64 {
    if i >= 0 && (i as usize) < x.len() {
        x[i as usize]
    } else {
        0.0
    }
}

/// Overlap-add time stretch of `x` to exactly `out_len` samples. Each
/// analysis frame is shifted within a tolerance window to best match the
/// natural continuation of the previous frame (waveform-similarity OLA).
fn ola_stretch(x: &[f64], out_len: usize) -> Vec<f64> {
    let window = hann(OLA_FRAME);
    let half = (OLA_FRAME / 2) as isize;
    let analysis_hop = OLA_HOP as f64 * x.len() as f64 / out_len as f64;
    let tolerance = if x.len() == out_len { 0 } else { OLA_TOLERANCE };
    let mut out = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    let frames = (out_len + OLA_FRAME) / OLA_HOP + 1;
    let mut prev: Option<isize> = None;
    for k in 0..frames {
        let out_start = (k * OLA_HOP) as isize - half;
        let nominal = (k as f64 * analysis_hop).round() as isize - half;
        let in_start = match prev {
            Some(p) if tolerance > 0 => {
                let target = p + OLA_HOP as isize;
                let mut best = (f64::NEG_INFINITY, 0isize);
                for d in -tolerance..=tolerance {
                    let corr: f64 = (0..OLA_FRAME as isize)
                        .map(|m| sample_at(x, nominal + d + m) * sample_at(x, target + m))
                        .sum();
                    if corr > best.0 || (corr == best.0 && d.abs() < best.1.abs()) {
                        best = (corr, d);
                    }
                }
                nominal + best.1
            }
            _ => nominal,
        };
        prev = Some(in_start);
        for (m, &w) in window.iter().enumerate() {
            let j = out_start + m as isize;
            if j < 0 || j >= out_len as isize {
                continue;
            }
            out[j as usize] += w * sample_at(x, in_start + m as isize);
            norm[j as usize] += w;
        }
    }
    out.iter()
        .zip(&norm)
        .map(|(&v, &n)| if n > 1e-9 { v / n } else { 0.0 })
        .collect()
}

/// Resamples by `2^(semitones/12)` and stretches back to the input length.
pub fn pitch_shift(wave: &Waveform, semitones: f64) -> Result<Waveform> {
    if !semitones.is_finite() || semitones.abs() > 12.0 {
        return Err(Error::InvalidArgument(format!(
            "pitch shift of {semitones} semitones outside [-12, 12]"
        )));
    }
    let ratio = 2f64.powf(semitones / 12.0);
    let shift = |c: &[f64]| ola_stretch(&resample_linear(c, ratio), c.len());
    Waveform::from_clamped(shift(wave.left()), shift(wave.right()))
}

/// Plays the clip `factor` times faster, then pads or crops back to length.
pub fn speed_change(wave: &Waveform, factor: f64) -> Result<Waveform> {
    if !(0.5..=2.0).contains(&factor) {
        return Err(Error::InvalidArgument(format!(
            "speed factor {factor} outside [0.5, 2]"
        )));
    }
    let len = wave.len();
    let change = |c: &[f64]| fit_length(resample_linear(c, factor), len);
    Waveform::from_clamped(change(wave.left()), change(wave.right()))
}

/// Adds white Gaussian noise at the requested SNR (dB, relative to the mean
/// power over both channels), then clamps to [-1, 1].
pub fn add_noise(wave: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    let p_signal = wave.power();
    if p_signal == 0.0 {
        return Err(Error::InvalidArgument(
            "cannot set an SNR on a silent waveform".into(),
        ));
    }
    let sigma = (p_signal / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = rng_from(&[seed]);
    let mut noisy = |c: &[f64]| -> Vec<f64> {
        c.iter()
            .map(|&s| {
                let n: f64 = StandardNormal.sample(&mut rng);
                s + sigma * n
            })
            .collect()
    };
    let left = noisy(wave.left());
    let right = noisy(wave.right());
    Waveform::from_clamped(left, right)
}

/// `w * a + (1 - w) * b`; the caller guarantees both share a scene label.
pub fn mix_same_class(a: &Waveform, b: &Waveform, w: f64) -> Result<Waveform> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot mix waveforms of {} and {} samples",
            a.len(),
            b.len()
        )));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!("mix weight {w} outside [0, 1]")));
    }
    let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter().zip(y).map(|(&p, &q)| w * p + (1.0 - w) * q).collect()
    };
    Waveform::from_clamped(mix(a.left(), b.left()), mix(a.right(), b.right()))
}

/// One time and one frequency mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecMasks {
    pub time: Range<usize>,
    pub freq: Range<usize>,
}

impl SpecMasks {
    pub fn contains(&self, frame: usize, mel: usize) -> bool {
        self.time.contains(&frame) || self.freq.contains(&mel)
    }
}

/// Largest mask width for a dimension: `ceil(fraction * dim)`.
pub fn max_mask_width(fraction: f64, dim: usize) -> usize {
    (fraction * dim as f64).ceil() as usize
}

pub fn draw_spec_masks(fraction: f64, rng: &mut Rng) -> SpecMasks {
    let mut draw = |dim: usize| {
        let width = rng.random_range(0..=max_mask_width(fraction, dim));
        let start = rng.random_range(0..=dim - width);
        start..start + width
    };
    let time = draw(N_FRAMES);
    let freq = draw(N_MELS);
    SpecMasks { time, freq }
}

pub fn apply_spec_masks(feat: &mut LmfbTensor, masks: &SpecMasks) {
    for map in 0..N_MAPS {
        for f in 0..N_FRAMES {
            for m in 0..N_MELS {
                if masks.contains(f, m) {
                    feat.set(f, m, map, 0.0);
                }
            }
        }
    }
}

/// Time/frequency masking without time warping; masked cells become 0 in
/// all six maps.
pub fn spec_augment(feat: &LmfbTensor, fraction: f64, seed: u64) -> (LmfbTensor, SpecMasks) {
    let masks = draw_spec_masks(fraction, &mut rng_from(&[seed]));
    let mut out = feat.clone();
    apply_spec_masks(&mut out, &masks);
    (out, masks)
}

/// Swaps the left/right map groups with probability `prob`.
pub fn channel_confusion(feat: &LmfbTensor, prob: f64, seed: u64) -> (LmfbTensor, bool) {
    let swap = rng_from(&[seed]).random::<f64>() < prob;
    let mut out = feat.clone();
    if swap {
        out.swap_channels();
    }
    (out, swap)
}

/// The four offline waveform generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OfflineOp {
    PitchShift,
    SpeedChange,
    AddNoise,
    MixSameClass,
}

impl OfflineOp {
    pub const ALL: [OfflineOp; 4] = [
        OfflineOp::PitchShift,
        OfflineOp::SpeedChange,
        OfflineOp::AddNoise,
        OfflineOp::MixSameClass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OfflineOp::PitchShift => "pitch_shift",
            OfflineOp::SpeedChange => "speed_change",
            OfflineOp::AddNoise => "add_noise",
            OfflineOp::MixSameClass => "mix_same_class",
        }
    }
}

impl fmt::Display for OfflineOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OfflineOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// Applies `op` with a parameter drawn uniformly from its configured range.
/// Returns the output and the drawn parameter. `partner` is required for
/// mixing and must share the source's label.
pub fn random_offline(
    op: OfflineOp,
    wave: &Waveform,
    partner: Option<&Waveform>,
    cfg: &AudioAugConfig,
    seed: u64,
) -> Result<(Waveform, f64)> {
    let mut rng = rng_from(&[seed]);
    let mut uniform = |r: [f64; 2]| {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.random_range(r[0]..r[1])
        }
    };
    match op {
        OfflineOp::PitchShift => {
            let s = uniform(cfg.pitch_semitones_range);
            Ok((pitch_shift(wave, s)?, s))
        }
        OfflineOp::SpeedChange => {
            let f = uniform(cfg.speed_factor_range);
            Ok((speed_change(wave, f)?, f))
        }
        OfflineOp::AddNoise => {
            let snr = uniform(cfg.noise_snr_db_range);
            Ok((add_noise(wave, snr, seed ^ 0x5eed)?, snr))
        }
        OfflineOp::MixSameClass => {
            let other = partner.ok_or_else(|| {
                Error::InvalidArgument("mix_same_class needs a partner clip".into())
            })?;
            let w = uniform(cfg.mix_weight_range);
            Ok((mix_same_class(wave, other, w)?, w))
        }
    }
}
