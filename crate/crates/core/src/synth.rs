//! Synthetic B-mode videos with seashore-like and barcode-like M-modes.
//!
//! Every video has a static near field, a bright pleural band and a far
//! field below it. In present-sliding videos the far-field speckle is
//! redrawn as an AR(1) process in time, so M-modes look granular. In
//! absent-sliding videos the far field is a static texture, so every
//! M-mode shows unbroken horizontal lines. The near field follows the same
//! distribution in both classes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::augment::RngStream;
use crate::error::{Error, Result};
use crate::formats::Label;
use crate::mmode::BModeVideo;
use crate::tensor::Tensor;

const VIDEO_STEP: u64 = 300;
const SPLIT_STEP: u64 = 301;

/// Number of rows in the pleural band.
pub const PLEURA_THICKNESS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_present: usize,
    pub n_absent: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    /// Inclusive range of the pleural band's top row.
    pub pleural_row_min: usize,
    pub pleural_row_max: usize,
    /// Per-frame additive noise std on every pixel.
    pub noise: f64,
    /// Std of the far-field texture.
    pub texture: f64,
    /// Lag-1 correlation of the present-class speckle process.
    pub present_rho: f64,
    /// Relative std of a per-video gain applied to the whole image.
    pub gain_jitter: f64,
    /// Additive brightness offset for every pixel (distribution shift).
    pub offset: f64,
    pub videos_per_patient: usize,
    pub seed: u64,
    /// Prefix of generated ids.
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_present: 320,
            n_absent: 80,
            frames: 48,
            height: 64,
            width: 16,
            fps: 16.0,
            pleural_row_min: 20,
            pleural_row_max: 28,
            noise: 6.0,
            texture: 45.0,
            present_rho: 0.0,
            gain_jitter: 0.15,
            offset: 0.0,
            videos_per_patient: 2,
            seed: 0,
            id_prefix: "syn".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pleural_row_min > self.pleural_row_max {
            return bad("pleural_row_min exceeds pleural_row_max".into());
        }
        if 2 * self.pleural_row_max >= self.height {
            return bad(format!("pleural row {} must lie above half the height {}", self.pleural_row_max, self.height));
        }
        if self.pleural_row_max + PLEURA_THICKNESS + 2 > self.height {
            return bad("no room for a far field below the pleural band".into());
        }
        if !(self.fps > 0.0) || (self.frames as f64) < self.fps * 3.0 {
            return bad(format!("{} frames at {} fps is shorter than 3 s", self.frames, self.fps));
        }
        if self.width < 4 {
            return bad("width must be at least 4".into());
        }
        if self.videos_per_patient == 0 {
            return bad("videos_per_patient must be positive".into());
        }
        if !(0.0..1.0).contains(&self.present_rho) {
            return bad("present_rho must lie in [0, 1)".into());
        }
        for (k, v) in [("noise", self.noise), ("texture", self.texture), ("gain_jitter", self.gain_jitter)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{k} must be finite and non-negative"));
            }
        }
        if !self.offset.is_finite() {
            return bad("offset must be finite".into());
        }
        Ok(())
    }
}

/// A generated video and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub video: BModeVideo,
    pub label: Label,
    pub patient_id: String,
    pub pleural_row: usize,
}

/// One video; depends only on `(cfg, index, label)`.
pub fn generate_one(cfg: &SynthConfig, index: usize, label: Label) -> Result<SynthVideo> {
    let (t_n, h, w) = (cfg.frames, cfg.height, cfg.width);
    let mut s = RngStream::new(cfg.seed, index as u64, VIDEO_STEP);
    let p = s.int(cfg.pleural_row_min, cfg.pleural_row_max);
    let far0 = p + PLEURA_THICKNESS;
    let gain = (1.0 + s.normal(0.0, cfg.gain_jitter)).max(0.2);
    let lo = s.int(1, 3.min(w / 4));
    let hi = w - 1 - s.int(1, 3.min(w / 4));

    // Static layers.
    let mut base = vec![0.0; h * w];
    let near_level = s.uniform(50.0, 70.0);
    let pleura_level = s.uniform(190.0, 220.0);
    let far_level = s.uniform(90.0, 110.0);
    for r in 0..h {
        for c in 0..w {
            base[r * w + c] = if r < p {
                near_level + s.normal(0.0, 20.0)
            } else if r < far0 {
                pleura_level + s.normal(0.0, 12.0)
            } else {
                far_level
            };
        }
    }
    let far = (h - far0) * w;
    let mut texture: Vec<f64> = (0..far).map(|_| s.normal(0.0, cfg.texture)).collect();
    let innovation = cfg.texture * (1.0 - cfg.present_rho * cfg.present_rho).sqrt();

    let mut data = Vec::with_capacity(t_n * h * w);
    for t in 0..t_n {
        if t > 0 && label == Label::Present {
            for v in texture.iter_mut() {
                *v = cfg.present_rho * *v + s.normal(0.0, innovation);
            }
        }
        for r in 0..h {
            for c in 0..w {
                let mut v = base[r * w + c];
                if r >= far0 {
                    v += texture[(r - far0) * w + c];
                }
                v = (v + s.normal(0.0, cfg.noise)) * gain + cfg.offset;
                data.push(v.clamp(0.0, 255.0));
            }
        }
    }
    let patient = index / cfg.videos_per_patient;
    let video_id = format!("{}-p{patient:04}-v{}", cfg.id_prefix, index % cfg.videos_per_patient);
    Ok(SynthVideo {
        video: BModeVideo::new(Tensor::new(vec![t_n, h, w], data)?, cfg.fps, (lo, hi), video_id)?,
        label,
        patient_id: format!("{}-p{patient:04}", cfg.id_prefix),
        pleural_row: p,
    })
}

/// Labels in generation order: patients alternate between classes in the
/// configured ratio, and all videos of a patient share a class.
pub fn label_plan(cfg: &SynthConfig) -> Vec<Label> {
    let total = cfg.n_present + cfg.n_absent;
    let vpp = cfg.videos_per_patient;
    let patients = total.div_ceil(vpp);
    let absent_patients = cfg.n_absent.div_ceil(vpp);
    let mut per_patient = vec![Label::Present; patients];
    // Spread absent patients evenly through the sequence.
    for k in 0..absent_patients.min(patients) {
        per_patient[k * patients / absent_patients.max(1)] = Label::Absent;
    }
    let mut out = Vec::with_capacity(total);
    let (mut np, mut na) = (0, 0);
    for l in per_patient {
        for _ in 0..vpp {
            let l = match l {
                Label::Absent if na < cfg.n_absent => l,
                Label::Present if np < cfg.n_present => l,
                Label::Absent => Label::Present,
                Label::Present => Label::Absent,
            };
            if out.len() < total {
                match l {
                    Label::Absent => na += 1,
                    Label::Present => np += 1,
                }
                out.push(l);
            }
        }
    }
    out
}

/// All videos of the configured dataset.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthVideo>> {
    cfg.validate()?;
    label_plan(cfg).into_iter().enumerate().map(|(i, l)| generate_one(cfg, i, l)).collect()
}

/// Disjoint train/validation/test partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Splits by patient, separately within each class, so that each class
/// contributes `round(f_train · P)` patients to train, `round(f_val · P)` to
/// validation and the rest to test. Order within each part follows the
/// input.
pub fn split<T: Clone>(
    items: &[T],
    patient: impl Fn(&T) -> &str,
    label: impl Fn(&T) -> Label,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Split<T>> {
    let (ft, fv, fs) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fs <= 0.0 || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must be positive and sum to 1, got {fractions:?}")));
    }
    let mut by_class: BTreeMap<Label, Vec<String>> = BTreeMap::new();
    for it in items {
        let ids = by_class.entry(label(it)).or_default();
        let p = patient(it);
        if !ids.iter().any(|x| x == p) {
            ids.push(p.to_string());
        }
    }
    let mut part_of: BTreeMap<String, usize> = BTreeMap::new();
    for class in [Label::Present, Label::Absent] {
        let mut patients = by_class.remove(&class).unwrap_or_default();
        if patients.len() < 3 {
            return Err(Error::Data(format!(
                "class {class:?} has {} patients; every split needs at least one",
                patients.len()
            )));
        }
        patients.shuffle(RngStream::new(seed, class as u64, SPLIT_STEP).inner());
        let n = patients.len() as f64;
        let n_train = ((ft * n).round() as usize).clamp(1, patients.len() - 2);
        let n_val = ((fv * n).round() as usize).clamp(1, patients.len() - n_train - 1);
        for (i, p) in patients.into_iter().enumerate() {
            let part = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            if part_of.insert(p.clone(), part).is_some() {
                return Err(Error::Data(format!("patient {p} has videos of both classes")));
            }
        }
    }
    let mut out = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for it in items {
        match part_of[patient(it)] {
            0 => out.train.push(it.clone()),
            1 => out.val.push(it.clone()),
            _ => out.test.push(it.clone()),
        }
    }
    Ok(out)
}

/// Pearson correlation between `M[r][t]` and `M[r][t+1]` over the given rows
/// of an `[H, T]` image, centred with one global mean.
pub fn lag1_autocorrelation(mmode: &Tensor, rows: std::ops::Range<usize>) -> f64 {
    let t_n = mmode.shape()[1];
    let d = mmode.data();
    let vals: Vec<f64> = rows.clone().flat_map(|r| d[r * t_n..(r + 1) * t_n].iter().copied()).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for r in rows {
        let row = &d[r * t_n..(r + 1) * t_n];
        for t in 0..t_n {
            den += (row[t] - mean).powi(2);
            if t + 1 < t_n {
                num += (row[t] - mean) * (row[t + 1] - mean);
            }
        }
    }
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Hand-coded rule: absent sliding when the far field below `far_start` is
/// temporally coherent.
pub fn classify_by_autocorrelation(mmode: &Tensor, far_start: usize) -> Label {
    if lag1_autocorrelation(mmode, far_start..mmode.shape()[0]) > 0.6 {
        Label::Absent
    } else {
        Label::Present
    }
}
