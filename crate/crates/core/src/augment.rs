//! Stochastic image transforms for M-mode images.
//!
//! Three pipelines are provided: the M-mode pretraining recipe, a BYOL-style
//! recipe without hue changes, and the light downstream recipe. Randomness
//! comes from counter-based [`RngStream`]s keyed by
//! `(master_seed, sample_index, step_index)`, so a sample's augmentation does
//! not depend on the order in which samples are processed. Each step draws
//! from its own stream, so changing one step's probability never shifts the
//! draws seen by another step.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mmode::{resize_tensor, MModeImage};
use crate::tensor::Tensor;

/// Deterministic random stream for one `(master_seed, sample_index, step_index)`
/// triple.
pub struct RngStream(ChaCha8Rng);

impl RngStream {
    pub fn new(master_seed: u64, sample_index: u64, step_index: u64) -> Self {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&master_seed.to_le_bytes());
        seed[8..16].copy_from_slice(&sample_index.to_le_bytes());
        seed[16..24].copy_from_slice(&step_index.to_le_bytes());
        seed[24..].copy_from_slice(b"mmaug\0\0\0");
        Self(ChaCha8Rng::from_seed(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            lo
        } else {
            self.0.gen_range(lo..hi)
        }
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int(&mut self, lo: usize, hi: usize) -> usize {
        self.0.gen_range(lo..=hi)
    }

    /// `true` with probability `p`; never consumes entropy differently for
    /// different `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.0.gen::<f64>() < p
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.0.sample::<f64, _>(StandardNormal)
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.0
    }
}

/// Identifies one sample's augmentation; step streams are derived from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleKey {
    pub master_seed: u64,
    pub sample_index: u64,
}

impl SampleKey {
    pub fn new(master_seed: u64, sample_index: u64) -> Self {
        Self { master_seed, sample_index }
    }

    pub fn stream(&self, step: u64) -> RngStream {
        RngStream::new(self.master_seed, self.sample_index, step)
    }
}

/// Packs several counters into one sample index (SplitMix64 finalizer over a
/// running hash).
pub fn sample_index(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h = splitmix(h ^ p);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PipelineKind {
    MMode,
    Byol,
    Downstream,
}

impl PipelineKind {
    pub fn name(self) -> &'static str {
        match self {
            PipelineKind::MMode => "mmode",
            PipelineKind::Byol => "byol",
            PipelineKind::Downstream => "downstream",
        }
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmode" => Ok(PipelineKind::MMode),
            "byol" => Ok(PipelineKind::Byol),
            "downstream" => Ok(PipelineKind::Downstream),
            other => Err(Error::Config(format!("unknown augmentation pipeline {other:?}"))),
        }
    }
}

/// Parameters of the M-mode pretraining pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct MModeAugParams {
    pub crop_p: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub flip_p: f64,
    pub blur_p: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub noise_p: f64,
    pub noise_mean_min: f64,
    pub noise_mean_max: f64,
    pub noise_std_min: f64,
    pub noise_std_max: f64,
    pub speckle_p: f64,
    pub speckle_std_min: f64,
    pub speckle_std_max: f64,
    pub brightness_p: f64,
    pub brightness_min: f64,
    pub brightness_max: f64,
    pub contrast_p: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    /// Probability that contrast runs before brightness.
    pub swap_p: f64,
}

impl Default for MModeAugParams {
    fn default() -> Self {
        Self {
            crop_p: 0.8,
            crop_scale_min: 0.08,
            crop_scale_max: 1.0,
            flip_p: 0.5,
            blur_p: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
            noise_p: 0.5,
            noise_mean_min: -10.0,
            noise_mean_max: 10.0,
            noise_std_min: 0.0,
            noise_std_max: 25.0,
            speckle_p: 0.5,
            speckle_std_min: 0.0,
            speckle_std_max: 0.1,
            brightness_p: 0.8,
            brightness_min: -0.4,
            brightness_max: 0.4,
            contrast_p: 0.8,
            contrast_min: -0.4,
            contrast_max: 0.4,
            swap_p: 0.5,
        }
    }
}

/// Parameters of the BYOL-style pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ByolAugParams {
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub crop_ratio_min: f64,
    pub crop_ratio_max: f64,
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_p_first: f64,
    pub blur_p_second: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub solarize_p_first: f64,
    pub solarize_p_second: f64,
    pub solarize_threshold: f64,
}

impl Default for ByolAugParams {
    fn default() -> Self {
        Self {
            crop_scale_min: 0.08,
            crop_scale_max: 1.0,
            crop_ratio_min: 3.0 / 4.0,
            crop_ratio_max: 4.0 / 3.0,
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            blur_p_first: 1.0,
            blur_p_second: 0.1,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
            solarize_p_first: 0.0,
            solarize_p_second: 0.2,
            solarize_threshold: 128.0,
        }
    }
}

/// Parameters of the downstream training pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamAugParams {
    pub contrast_max: f64,
    pub brightness_max: f64,
    pub noise_std: f64,
    pub flip_p: f64,
}

impl Default for DownstreamAugParams {
    fn default() -> Self {
        Self {
            contrast_max: 0.3,
            brightness_max: 0.1,
            noise_std: 5.0,
            flip_p: 0.5,
        }
    }
}

/// Which pipeline to run plus the parameters of all three.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub pipeline: PipelineKind,
    pub seed: u64,
    pub mmode: MModeAugParams,
    pub byol: ByolAugParams,
    pub downstream: DownstreamAugParams,
}

impl AugmentationConfig {
    pub fn new(pipeline: PipelineKind, seed: u64) -> Self {
        Self {
            pipeline,
            seed,
            mmode: MModeAugParams::default(),
            byol: ByolAugParams::default(),
            downstream: DownstreamAugParams::default(),
        }
    }

    /// Every numeric parameter under its config key, e.g. `mmode.crop_p`.
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut f64)> {
        let m = &mut self.mmode;
        let b = &mut self.byol;
        let d = &mut self.downstream;
        vec![
            ("mmode.crop_p", &mut m.crop_p),
            ("mmode.crop_scale_min", &mut m.crop_scale_min),
            ("mmode.crop_scale_max", &mut m.crop_scale_max),
            ("mmode.flip_p", &mut m.flip_p),
            ("mmode.blur_p", &mut m.blur_p),
            ("mmode.blur_sigma_min", &mut m.blur_sigma_min),
            ("mmode.blur_sigma_max", &mut m.blur_sigma_max),
            ("mmode.noise_p", &mut m.noise_p),
            ("mmode.noise_mean_min", &mut m.noise_mean_min),
            ("mmode.noise_mean_max", &mut m.noise_mean_max),
            ("mmode.noise_std_min", &mut m.noise_std_min),
            ("mmode.noise_std_max", &mut m.noise_std_max),
            ("mmode.speckle_p", &mut m.speckle_p),
            ("mmode.speckle_std_min", &mut m.speckle_std_min),
            ("mmode.speckle_std_max", &mut m.speckle_std_max),
            ("mmode.brightness_p", &mut m.brightness_p),
            ("mmode.brightness_min", &mut m.brightness_min),
            ("mmode.brightness_max", &mut m.brightness_max),
            ("mmode.contrast_p", &mut m.contrast_p),
            ("mmode.contrast_min", &mut m.contrast_min),
            ("mmode.contrast_max", &mut m.contrast_max),
            ("mmode.swap_p", &mut m.swap_p),
            ("byol.crop_scale_min", &mut b.crop_scale_min),
            ("byol.crop_scale_max", &mut b.crop_scale_max),
            ("byol.crop_ratio_min", &mut b.crop_ratio_min),
            ("byol.crop_ratio_max", &mut b.crop_ratio_max),
            ("byol.flip_p", &mut b.flip_p),
            ("byol.jitter_p", &mut b.jitter_p),
            ("byol.brightness", &mut b.brightness),
            ("byol.contrast", &mut b.contrast),
            ("byol.saturation", &mut b.saturation),
            ("byol.blur_p_first", &mut b.blur_p_first),
            ("byol.blur_p_second", &mut b.blur_p_second),
            ("byol.blur_sigma_min", &mut b.blur_sigma_min),
            ("byol.blur_sigma_max", &mut b.blur_sigma_max),
            ("byol.solarize_p_first", &mut b.solarize_p_first),
            ("byol.solarize_p_second", &mut b.solarize_p_second),
            ("byol.solarize_threshold", &mut b.solarize_threshold),
            ("downstream.contrast_max", &mut d.contrast_max),
            ("downstream.brightness_max", &mut d.brightness_max),
            ("downstream.noise_std", &mut d.noise_std),
            ("downstream.flip_p", &mut d.flip_p),
        ]
    }

    pub fn params(&self) -> Vec<(&'static str, f64)> {
        let mut copy = self.clone();
        copy.params_mut().into_iter().map(|(k, v)| (k, *v)).collect()
    }

    /// Sets one key. `pipeline` and `seed` are accepted alongside the
    /// numeric parameters.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "pipeline" => self.pipeline = value.parse()?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("seed must be an unsigned integer, got {value:?}")))?
            }
            _ => {
                let v: f64 = value
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: expected a number, got {value:?}")))?;
                let mut params = self.params_mut();
                let slot = params
                    .iter_mut()
                    .find(|(k, _)| *k == key)
                    .ok_or_else(|| Error::Config(format!("unknown augmentation key {key:?}")))?;
                *slot.1 = v;
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new(PipelineKind::MMode, 0);
        for (key, value) in crate::config::parse_pairs(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in self.params() {
            if !v.is_finite() {
                return Err(Error::Config(format!("{k} must be finite")));
            }
            if k.ends_with("_p") || k.contains("_p_") {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!("{k} must be a probability, got {v}")));
                }
            }
        }
        let m = &self.mmode;
        let b = &self.byol;
        let ordered = [
            ("mmode.crop_scale", m.crop_scale_min, m.crop_scale_max),
            ("mmode.blur_sigma", m.blur_sigma_min, m.blur_sigma_max),
            ("mmode.noise_mean", m.noise_mean_min, m.noise_mean_max),
            ("mmode.noise_std", m.noise_std_min, m.noise_std_max),
            ("mmode.speckle_std", m.speckle_std_min, m.speckle_std_max),
            ("mmode.brightness", m.brightness_min, m.brightness_max),
            ("mmode.contrast", m.contrast_min, m.contrast_max),
            ("byol.crop_scale", b.crop_scale_min, b.crop_scale_max),
            ("byol.crop_ratio", b.crop_ratio_min, b.crop_ratio_max),
            ("byol.blur_sigma", b.blur_sigma_min, b.blur_sigma_max),
        ];
        for (k, lo, hi) in ordered {
            if lo > hi {
                return Err(Error::Config(format!("{k}: min {lo} exceeds max {hi}")));
            }
        }
        if m.crop_scale_min <= 0.0 || m.crop_scale_max > 1.0 || b.crop_scale_min <= 0.0 || b.crop_scale_max > 1.0 {
            return Err(Error::Config("crop scales must lie in (0, 1]".into()));
        }
        if b.crop_ratio_min <= 0.0 {
            return Err(Error::Config("byol.crop_ratio_min must be positive".into()));
        }
        let nonneg = [
            ("mmode.noise_std_min", m.noise_std_min),
            ("mmode.speckle_std_min", m.speckle_std_min),
            ("mmode.blur_sigma_min", m.blur_sigma_min),
            ("byol.blur_sigma_min", b.blur_sigma_min),
            ("byol.brightness", b.brightness),
            ("byol.contrast", b.contrast),
            ("byol.saturation", b.saturation),
            ("downstream.contrast_max", self.downstream.contrast_max),
            ("downstream.brightness_max", self.downstream.brightness_max),
            ("downstream.noise_std", self.downstream.noise_std),
        ];
        for (k, v) in nonneg {
            if v < 0.0 {
                return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Dispatches to the configured pipeline. `role` only matters for BYOL.
    pub fn apply(&self, img: &MModeImage, key: SampleKey, role: BranchRole) -> Result<Augmented> {
        match self.pipeline {
            PipelineKind::MMode => augment_mmode(img, &self.mmode, key),
            PipelineKind::Byol => augment_byol(img, &self.byol, key, role),
            PipelineKind::Downstream => augment_downstream(img, &self.downstream, key),
        }
    }
}

// ---------------------------------------------------------------------------
// Results

/// A transform that was actually applied to an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Step {
    Crop,
    Flip,
    Blur,
    Noise,
    Speckle,
    Brightness,
    Contrast,
    Jitter,
    Solarize,
}

/// Output image plus a record of what happened to it.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub image: MModeImage,
    /// Applied steps in execution order.
    pub applied: Vec<Step>,
    /// Top row of the crop window, when a crop was taken.
    pub crop_top: Option<usize>,
}

impl Augmented {
    pub fn applied(&self, step: Step) -> bool {
        self.applied.contains(&step)
    }
}

/// Which member of a pair is being augmented; the BYOL recipe treats the two
/// asymmetrically.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchRole {
    First,
    Second,
}

// ---------------------------------------------------------------------------
// Pixel-level transforms

fn clamp_all(v: &mut [f64]) {
    for x in v {
        *x = x.clamp(0.0, 255.0);
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mirrors every row: `out[r][t] = in[r][W-1-t]`.
pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let w = img.shape()[1];
    let mut data = img.data().to_vec();
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
    Tensor::from_parts(img.shape().to_vec(), data)
}

/// Horizontal Gaussian blur with taps at offsets `-(width/2 - 1) ..= width/2`
/// (a 10-tap kernel spans -4..=5), renormalized over in-bounds taps.
pub fn blur_horizontal(img: &Tensor, sigma: f64, width: usize) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let lo = -((width / 2) as isize - 1).max(0);
    let hi = (width / 2) as isize;
    let taps: Vec<(isize, f64)> = (lo..=hi)
        .map(|o| (o, (-(o * o) as f64 / (2.0 * sigma * sigma)).exp()))
        .collect();
    let src = img.data();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for c in 0..w {
            let (mut acc, mut norm) = (0.0, 0.0);
            for &(o, k) in &taps {
                let j = c as isize + o;
                if (0..w as isize).contains(&j) {
                    acc += k * row[j as usize];
                    norm += k;
                }
            }
            out[r * w + c] = acc / norm;
        }
    }
    Tensor::from_parts(vec![h, w], out)
}

/// Separable 2-D Gaussian blur with a centred `2·radius+1` kernel,
/// renormalized at the borders.
pub fn blur_2d(img: &Tensor, sigma: f64, radius: usize) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let r = radius as isize;
    let k: Vec<f64> = (-r..=r).map(|o| (-(o * o) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &[f64], n_lines: usize, len: usize, at: &dyn Fn(usize, usize) -> usize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for line in 0..n_lines {
            for i in 0..len {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, &kv) in k.iter().enumerate() {
                    let j = i as isize + t as isize - r;
                    if (0..len as isize).contains(&j) {
                        acc += kv * src[at(line, j as usize)];
                        norm += kv;
                    }
                }
                out[at(line, i)] = acc / norm;
            }
        }
        out
    };
    let rows = pass(img.data(), h, w, &|line, i| line * w + i);
    let cols = pass(&rows, w, h, &|line, i| i * w + line);
    Tensor::from_parts(vec![h, w], cols)
}

/// Pixels at or above `threshold` become `255 - x`.
pub fn solarize(img: &Tensor, threshold: f64) -> Tensor {
    let data = img.data().iter().map(|&x| if x >= threshold { 255.0 - x } else { x }).collect();
    Tensor::from_parts(img.shape().to_vec(), data)
}

fn crop_resize(img: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let src = img.data();
    let mut data = Vec::with_capacity(ch * cw);
    for r in top..top + ch {
        data.extend_from_slice(&src[r * w + left..r * w + left + cw]);
    }
    resize_tensor(&Tensor::from_parts(vec![ch, cw], data), h, w)
}

fn with_pixels(img: &MModeImage, data: Vec<f64>) -> MModeImage {
    img.with_pixels(Tensor::from_parts(img.pixels.shape().to_vec(), data))
}

// ---------------------------------------------------------------------------
// Pipelines

const MMODE_BLUR_WIDTH: usize = 10;
const BYOL_BLUR_RADIUS: usize = 6;

/// The M-mode pretraining recipe: crop (top row in the upper half), flip,
/// horizontal blur, additive noise, speckle, then brightness and contrast in
/// random order. Values are clamped to `[0, 255]` after every step.
pub fn augment_mmode(img: &MModeImage, p: &MModeAugParams, key: SampleKey) -> Result<Augmented> {
    let (h, w) = (img.height(), img.width());
    let mut x = img.pixels.clone();
    let mut applied = Vec::new();
    let mut crop_top = None;

    let mut s = key.stream(1);
    if s.bernoulli(p.crop_p) {
        let c = s.uniform(p.crop_scale_min, p.crop_scale_max);
        let side = c.sqrt();
        let ch = ((side * h as f64).round() as usize).clamp(1, h);
        let cw = ((side * w as f64).round() as usize).clamp(1, w);
        let top = s.int(0, (h / 2).min(h - ch));
        let left = s.int(0, w - cw);
        x = crop_resize(&x, top, left, ch, cw)?;
        crop_top = Some(top);
        applied.push(Step::Crop);
    }

    let mut s = key.stream(2);
    if s.bernoulli(p.flip_p) {
        x = flip_horizontal(&x);
        applied.push(Step::Flip);
    }

    let mut s = key.stream(3);
    if s.bernoulli(p.blur_p) {
        let sigma = s.uniform(p.blur_sigma_min, p.blur_sigma_max).max(1e-6);
        x = blur_horizontal(&x, sigma, MMODE_BLUR_WIDTH);
        applied.push(Step::Blur);
    }

    let mut data = x.into_data();

    let mut s = key.stream(4);
    if s.bernoulli(p.noise_p) {
        let mu = s.uniform(p.noise_mean_min, p.noise_mean_max);
        let sd = s.uniform(p.noise_std_min, p.noise_std_max);
        for v in data.iter_mut() {
            *v += s.normal(mu, sd);
        }
        clamp_all(&mut data);
        applied.push(Step::Noise);
    }

    let mut s = key.stream(5);
    if s.bernoulli(p.speckle_p) {
        let sd = s.uniform(p.speckle_std_min, p.speckle_std_max);
        for v in data.iter_mut() {
            *v *= s.normal(1.0, sd);
        }
        clamp_all(&mut data);
        applied.push(Step::Speckle);
    }

    let contrast_first = key.stream(8).bernoulli(p.swap_p);
    let brightness = |data: &mut Vec<f64>, applied: &mut Vec<Step>| {
        let mut s = key.stream(6);
        if s.bernoulli(p.brightness_p) {
            let c = s.uniform(p.brightness_min, p.brightness_max);
            for v in data.iter_mut() {
                *v += c * 255.0;
            }
            clamp_all(data);
            applied.push(Step::Brightness);
        }
    };
    let contrast = |data: &mut Vec<f64>, applied: &mut Vec<Step>| {
        let mut s = key.stream(7);
        if s.bernoulli(p.contrast_p) {
            let c = s.uniform(p.contrast_min, p.contrast_max);
            let m = mean(data);
            for v in data.iter_mut() {
                *v = m + (*v - m) * (1.0 + c);
            }
            clamp_all(data);
            applied.push(Step::Contrast);
        }
    };
    if contrast_first {
        contrast(&mut data, &mut applied);
        brightness(&mut data, &mut applied);
    } else {
        brightness(&mut data, &mut applied);
        contrast(&mut data, &mut applied);
    }

    debug_assert_eq!(data.len(), h * w);
    Ok(Augmented { image: with_pixels(img, data), applied, crop_top })
}

/// BYOL-style recipe without hue: random resized crop anywhere in the
/// image, flip, brightness/contrast jitter in random order (saturation is a
/// no-op on one channel), Gaussian blur and solarization with branch-dependent
/// probabilities.
pub fn augment_byol(img: &MModeImage, p: &ByolAugParams, key: SampleKey, role: BranchRole) -> Result<Augmented> {
    let (h, w) = (img.height(), img.width());
    let mut applied = Vec::new();

    let mut s = key.stream(1);
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (p.crop_ratio_min.ln(), p.crop_ratio_max.ln());
    let mut window = None;
    for _ in 0..10 {
        let target = area * s.uniform(p.crop_scale_min, p.crop_scale_max);
        let ratio = s.uniform(log_lo, log_hi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            window = Some((s.int(0, h - ch), s.int(0, w - cw), ch, cw));
            break;
        }
    }
    let (top, left, ch, cw) = window.unwrap_or((0, 0, h, w));
    let mut x = crop_resize(&img.pixels, top, left, ch, cw)?;
    applied.push(Step::Crop);

    let mut s = key.stream(2);
    if s.bernoulli(p.flip_p) {
        x = flip_horizontal(&x);
        applied.push(Step::Flip);
    }

    let mut s = key.stream(3);
    if s.bernoulli(p.jitter_p) {
        let mut order = [0u8, 1, 2];
        order.shuffle(s.inner());
        let fb = s.uniform(1.0 - p.brightness, 1.0 + p.brightness).max(0.0);
        let fc = s.uniform(1.0 - p.contrast, 1.0 + p.contrast).max(0.0);
        let _saturation = s.uniform(1.0 - p.saturation, 1.0 + p.saturation);
        let mut data = x.into_data();
        for op in order {
            match op {
                0 => data.iter_mut().for_each(|v| *v *= fb),
                1 => {
                    let m = mean(&data);
                    data.iter_mut().for_each(|v| *v = m + (*v - m) * fc);
                }
                _ => {}
            }
            clamp_all(&mut data);
        }
        x = Tensor::from_parts(vec![h, w], data);
        applied.push(Step::Jitter);
    }

    let (blur_p, sol_p) = match role {
        BranchRole::First => (p.blur_p_first, p.solarize_p_first),
        BranchRole::Second => (p.blur_p_second, p.solarize_p_second),
    };
    let mut s = key.stream(4);
    if s.bernoulli(blur_p) {
        let sigma = s.uniform(p.blur_sigma_min, p.blur_sigma_max).max(1e-6);
        x = blur_2d(&x, sigma, BYOL_BLUR_RADIUS);
        applied.push(Step::Blur);
    }

    let mut s = key.stream(5);
    if s.bernoulli(sol_p) {
        x = solarize(&x, p.solarize_threshold);
        applied.push(Step::Solarize);
    }

    let mut data = x.into_data();
    clamp_all(&mut data);
    Ok(Augmented { image: with_pixels(img, data), applied, crop_top: Some(top) })
}

/// Downstream recipe: contrast reduction by `c ~ U(0, contrast_max)`,
/// brightness shift `b ~ U(-brightness_max, brightness_max)` of full scale,
/// additive `N(0, noise_std²)` noise, and a horizontal flip.
pub fn augment_downstream(img: &MModeImage, p: &DownstreamAugParams, key: SampleKey) -> Result<Augmented> {
    let mut applied = Vec::new();
    let mut data = img.pixels.data().to_vec();

    let mut s = key.stream(1);
    let c = s.uniform(0.0, p.contrast_max);
    if c > 0.0 {
        let m = mean(&data);
        data.iter_mut().for_each(|v| *v = m + (*v - m) * (1.0 - c));
        clamp_all(&mut data);
        applied.push(Step::Contrast);
    }

    let mut s = key.stream(2);
    let b = s.uniform(-p.brightness_max, p.brightness_max);
    if b != 0.0 {
        data.iter_mut().for_each(|v| *v += b * 255.0);
        clamp_all(&mut data);
        applied.push(Step::Brightness);
    }

    let mut s = key.stream(3);
    if p.noise_std > 0.0 {
        data.iter_mut().for_each(|v| *v += s.normal(0.0, p.noise_std));
        clamp_all(&mut data);
        applied.push(Step::Noise);
    }

    let mut s = key.stream(4);
    let mut x = Tensor::from_parts(img.pixels.shape().to_vec(), data);
    if s.bernoulli(p.flip_p) {
        x = flip_horizontal(&x);
        applied.push(Step::Flip);
    }
    Ok(Augmented { image: img.with_pixels(x), applied, crop_top: None })
}
