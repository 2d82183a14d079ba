//! RGB frame type, the 15 RandAugment transformations plus Identity, and
//! bilinear resizing.
//!
//! Magnitude mapping for `M` in `[0, 30]` (fixed, so outputs are
//! reproducible):
//!
//! | op | parameter |
//! |----|-----------|
//! | Sharpness, Contrast, Color, Brightness | factor `1 ± 0.9·M/30` |
//! | Rotate | `±30·M/30` degrees |
//! | ShearX/Y | `±0.3·M/30` |
//! | TranslateX/Y | `±0.45·M/30` of the axis extent |
//! | Solarize | invert pixels `>= 256 − 256·M/30` |
//! | Posterize | keep `8 − round(4·M/30)` bits |
//! | Cutout | square side `round(0.4·M/30·min(H, W))`, fill 128 |
//!
//! Invert, Equalize, AutoContrast and Identity ignore `M`. All arithmetic is
//! real-valued and rounded half-up once per op.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};
use crate::tensor::{Real, Tensor};

pub const MAX_MAGNITUDE: u32 = 30;
const FILL: f64 = 128.0;

/// `H x W x 3` 8-bit RGB raster.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{})", self.height, self.width)
    }
}

fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

impl Image {
    pub const MIN_SIDE: usize = 8;

    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height < Self::MIN_SIDE || width < Self::MIN_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} smaller than {0}x{0}",
                Self::MIN_SIDE
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x3 needs {} bytes, got {}", height * width * 3, pixels.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    fn map_real(&self, f: impl Fn(usize, usize, usize, f64) -> f64) -> Image {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    pixels.push(quantize(f(y, x, c, self.get(y, x, c) as f64)));
                }
            }
        }
        Image { pixels, ..*self }
    }

    fn map_lut(&self, luts: &[[u8; 256]; 3]) -> Image {
        let pixels = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| luts[i % 3][p as usize])
            .collect();
        Image { pixels, ..*self }
    }

    /// `[3, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let plane = self.height * self.width;
        let mut data = vec![T::zero(); 3 * plane];
        for (i, &p) in self.pixels.iter().enumerate() {
            data[(i % 3) * plane + i / 3] = T::lit(p as f64 / 255.0);
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("image shape")
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(h as usize, w as usize, rgb.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImageOp {
    Identity,
    TranslateX,
    TranslateY,
    Solarize,
    ShearX,
    ShearY,
    Sharpness,
    Rotate,
    Posterize,
    Invert,
    Equalize,
    Cutout,
    Contrast,
    Color,
    Brightness,
    AutoContrast,
}

/// The 15 perturbations in ablation-table order.
pub const SEARCH_SPACE: [ImageOp; 15] = [
    ImageOp::TranslateX,
    ImageOp::TranslateY,
    ImageOp::Solarize,
    ImageOp::ShearX,
    ImageOp::ShearY,
    ImageOp::Sharpness,
    ImageOp::Rotate,
    ImageOp::Posterize,
    ImageOp::Invert,
    ImageOp::Equalize,
    ImageOp::Cutout,
    ImageOp::Contrast,
    ImageOp::Color,
    ImageOp::Brightness,
    ImageOp::AutoContrast,
];

/// Adopted sub-policy for scene frames.
pub const SCENE_POLICY: [ImageOp; 3] = [ImageOp::Sharpness, ImageOp::Contrast, ImageOp::Identity];

impl ImageOp {
    pub fn name(self) -> &'static str {
        match self {
            ImageOp::Identity => "Identity",
            ImageOp::TranslateX => "TranslateX",
            ImageOp::TranslateY => "TranslateY",
            ImageOp::Solarize => "Solarize",
            ImageOp::ShearX => "ShearX",
            ImageOp::ShearY => "ShearY",
            ImageOp::Sharpness => "Sharpness",
            ImageOp::Rotate => "Rotate",
            ImageOp::Posterize => "Posterize",
            ImageOp::Invert => "Invert",
            ImageOp::Equalize => "Equalize",
            ImageOp::Cutout => "Cutout",
            ImageOp::Contrast => "Contrast",
            ImageOp::Color => "Color",
            ImageOp::Brightness => "Brightness",
            ImageOp::AutoContrast => "AutoContrast",
        }
    }
}

impl fmt::Display for ImageOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImageOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(ImageOp::Identity)
            .chain(SEARCH_SPACE)
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

fn signed(rng: &mut Rng, v: f64) -> f64 {
    if rng.random::<bool>() {
        v
    } else {
        -v
    }
}

/// Bilinear sample with out-of-range neighbours read as the fill value.
fn sample(img: &Image, sy: f64, sx: f64, c: usize) -> f64 {
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = (sy - y0, sx - x0);
    let px = |y: f64, x: f64| {
        if y < 0.0 || x < 0.0 || y >= img.height as f64 || x >= img.width as f64 {
            FILL
        } else {
            img.get(y as usize, x as usize, c) as f64
        }
    };
    let top = if fx == 0.0 {
        px(y0, x0)
    } else {
        px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1.0) * fx
    };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 {
        px(y0 + 1.0, x0)
    } else {
        px(y0 + 1.0, x0) * (1.0 - fx) + px(y0 + 1.0, x0 + 1.0) * fx
    };
    top * (1.0 - fy) + bottom * fy
}

/// Resamples through an output -> source coordinate map, both measured from
/// the image center.
fn warp(img: &Image, src: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    img.map_real(|y, x, c, _| {
        let (dy, dx) = src(y as f64 - cy, x as f64 - cx);
        sample(img, dy + cy, dx + cx, c)
    })
}

fn blend(img: &Image, degenerate: impl Fn(usize, usize, usize) -> f64, factor: f64) -> Image {
    img.map_real(|y, x, c, v| {
        let d = degenerate(y, x, c);
        d + factor * (v - d)
    })
}

fn luma(img: &Image, y: usize, x: usize) -> f64 {
    0.299 * img.get(y, x, 0) as f64 + 0.587 * img.get(y, x, 1) as f64 + 0.114 * img.get(y, x, 2) as f64
}

/// 3x3 smoothing (center weight 5, total 13); border pixels are kept.
fn smooth(img: &Image, y: usize, x: usize, c: usize) -> f64 {
    if y == 0 || x == 0 || y + 1 == img.height || x + 1 == img.width {
        return img.get(y, x, c) as f64;
    }
    let mut acc = 0.0;
    for dy in 0..3 {
        for dx in 0..3 {
            let w = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
            acc += w * img.get(y + dy - 1, x + dx - 1, c) as f64;
        }
    }
    acc / 13.0
}

fn histograms(img: &Image) -> [[u64; 256]; 3] {
    let mut h = [[0u64; 256]; 3];
    for (i, &p) in img.pixels.iter().enumerate() {
        h[i % 3][p as usize] += 1;
    }
    h
}

fn equalize(img: &Image) -> Image {
    let hists = histograms(img);
    let mut luts = [[0u8; 256]; 3];
    for (c, h) in hists.iter().enumerate() {
        let identity: [u8; 256] = std::array::from_fn(|i| i as u8);
        let nonzero: Vec<u64> = h.iter().copied().filter(|&v| v > 0).collect();
        let last = *nonzero.last().unwrap_or(&0);
        let step = (nonzero.iter().sum::<u64>() - last) / 255;
        if nonzero.len() <= 1 || step == 0 {
            luts[c] = identity;
            continue;
        }
        let mut n = step / 2;
        for i in 0..256 {
            luts[c][i] = (n / step).min(255) as u8;
            n += h[i];
        }
    }
    img.map_lut(&luts)
}

fn auto_contrast(img: &Image) -> Image {
    let hists = histograms(img);
    let mut luts = [[0u8; 256]; 3];
    for (c, h) in hists.iter().enumerate() {
        let lo = h.iter().position(|&v| v > 0).unwrap_or(0);
        let hi = h.iter().rposition(|&v| v > 0).unwrap_or(255);
        for (i, slot) in luts[c].iter_mut().enumerate() {
            *slot = if hi > lo {
                quantize((i as f64 - lo as f64) * 255.0 / (hi - lo) as f64)
            } else {
                i as u8
            };
        }
    }
    img.map_lut(&luts)
}

/// Applies one transformation at magnitude `m`. Signed parameters take their
/// sign from `rng`; Cutout also draws its center from `rng`.
pub fn apply_op(img: &Image, op: ImageOp, m: u32, rng: &mut Rng) -> Result<Image> {
    if m > MAX_MAGNITUDE {
        return Err(Error::InvalidArgument(format!(
            "magnitude {m} outside [0, {MAX_MAGNITUDE}]"
        )));
    }
    let level = m as f64 / MAX_MAGNITUDE as f64;
    let (h, w) = (img.height as f64, img.width as f64);
    Ok(match op {
        ImageOp::Identity => img.clone(),
        ImageOp::Invert => img.map_lut(&[std::array::from_fn(|i| 255 - i as u8); 3]),
        ImageOp::Solarize => {
            let threshold = 256.0 - 256.0 * level;
            img.map_lut(
                &[std::array::from_fn(|i| {
                    if i as f64 >= threshold {
                        255 - i as u8
                    } else {
                        i as u8
                    }
                }); 3],
            )
        }
        ImageOp::Posterize => {
            let bits = 8 - (4.0 * level).round() as u32;
            let mask = (0xFFu32 << (8 - bits)) as u8;
            img.map_lut(&[std::array::from_fn(|i| i as u8 & mask); 3])
        }
        ImageOp::Equalize => equalize(img),
        ImageOp::AutoContrast => auto_contrast(img),
        ImageOp::Sharpness => {
            let f = 1.0 + signed(rng, 0.9 * level);
            blend(img, |y, x, c| smooth(img, y, x, c), f)
        }
        ImageOp::Contrast => {
            let f = 1.0 + signed(rng, 0.9 * level);
            let mut total = 0.0;
            for y in 0..img.height {
                for x in 0..img.width {
                    total += luma(img, y, x);
                }
            }
            let mean = (total / (h * w) + 0.5).floor();
            blend(img, |_, _, _| mean, f)
        }
        ImageOp::Color => {
            let f = 1.0 + signed(rng, 0.9 * level);
            blend(img, |y, x, _| luma(img, y, x), f)
        }
        ImageOp::Brightness => {
            let f = 1.0 + signed(rng, 0.9 * level);
            blend(img, |_, _, _| 0.0, f)
        }
        ImageOp::Rotate => {
            let theta = signed(rng, 30.0 * level).to_radians();
            let (s, c) = theta.sin_cos();
            warp(img, |dy, dx| (-s * dx + c * dy, c * dx + s * dy))
        }
        ImageOp::ShearX => {
            let k = signed(rng, 0.3 * level);
            warp(img, |dy, dx| (dy, dx + k * dy))
        }
        ImageOp::ShearY => {
            let k = signed(rng, 0.3 * level);
            warp(img, |dy, dx| (dy + k * dx, dx))
        }
        ImageOp::TranslateX => {
            let t = signed(rng, 0.45 * level) * w;
            warp(img, |dy, dx| (dy, dx - t))
        }
        ImageOp::TranslateY => {
            let t = signed(rng, 0.45 * level) * h;
            warp(img, |dy, dx| (dy - t, dx))
        }
        ImageOp::Cutout => {
            let side = (0.4 * level * h.min(w)).round() as usize;
            let cy = rng.random_range(0..img.height);
            let cx = rng.random_range(0..img.width);
            let mut out = img.clone();
            if side > 0 {
                let y0 = cy.saturating_sub(side / 2);
                let x0 = cx.saturating_sub(side / 2);
                for y in y0..(cy + side - side / 2).min(img.height) {
                    for x in x0..(cx + side - side / 2).min(img.width) {
                        let i = (y * img.width + x) * 3;
                        out.pixels[i..i + 3].fill(FILL as u8);
                    }
                }
            }
            out
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandAugmentConfig {
    pub n_ops: usize,
    pub magnitude: u32,
    pub policy: Vec<ImageOp>,
    pub seed: u64,
}

impl Default for RandAugmentConfig {
    fn default() -> Self {
        Self {
            n_ops: 2,
            magnitude: 14,
            policy: SCENE_POLICY.to_vec(),
            seed: 0,
        }
    }
}

impl RandAugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ops == 0 {
            return Err(Error::Config("RandAugment needs n_ops >= 1".into()));
        }
        if self.magnitude > MAX_MAGNITUDE {
            return Err(Error::Config(format!(
                "RandAugment magnitude {} outside [0, {MAX_MAGNITUDE}]",
                self.magnitude
            )));
        }
        if self.policy.is_empty() {
            return Err(Error::Config("RandAugment policy is empty".into()));
        }
        Ok(())
    }
}

/// Draws `n_ops` ops uniformly with replacement from the policy and applies
/// them in draw order, all randomness coming from `rng`.
pub fn rand_augment_with(img: &Image, cfg: &RandAugmentConfig, rng: &mut Rng) -> Result<Image> {
    cfg.validate()?;
    let mut out = img.clone();
    for _ in 0..cfg.n_ops {
        let op = cfg.policy[rng.random_range(0..cfg.policy.len())];
        out = apply_op(&out, op, cfg.magnitude, rng)?;
    }
    Ok(out)
}

/// [`rand_augment_with`] seeded from `cfg.seed`.
pub fn rand_augment(img: &Image, cfg: &RandAugmentConfig) -> Result<Image> {
    rand_augment_with(img, cfg, &mut rng_from(&[cfg.seed]))
}

/// Bilinear resize with half-pixel centers (source coordinates clamped at 0).
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let src = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut pixels = Vec::with_capacity(out_h * out_w * 3);
    for y in 0..out_h {
        let (y0, y1, fy) = src(y, img.height, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = src(x, img.width, out_w);
            for c in 0..3 {
                let p = |yy, xx| img.get(yy, xx, c) as f64;
                let top = p(y0, x0) + fx * (p(y0, x1) - p(y0, x0));
                let bottom = p(y1, x0) + fx * (p(y1, x1) - p(y1, x0));
                pixels.push(quantize(top + fy * (bottom - top)));
            }
        }
    }
    Image::new(out_h, out_w, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse_case_insensitively() {
        assert_eq!("sharpness".parse::<ImageOp>().unwrap(), ImageOp::Sharpness);
        assert_eq!("AutoContrast".parse::<ImageOp>().unwrap(), ImageOp::AutoContrast);
        assert!("Warp".parse::<ImageOp>().is_err());
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(2.5), 3);
        assert_eq!(quantize(2.49), 2);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(300.0), 255);
    }

    #[test]
    fn rejects_tiny_images() {
        assert!(Image::filled(7, 8, [0, 0, 0]).is_err());
    }
}
