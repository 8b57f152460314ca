//! Run configuration: defaults, `key=value` config files and flag
//! overrides, merged into one [`RunConfig`] whose echo reproduces it.

use std::fmt;
use std::str::FromStr;

use mmode_ssl::augment::{sample_index, AugmentationConfig, PipelineKind};
use mmode_ssl::config::parse_pairs;
use mmode_ssl::model::{EncoderSpec, InitScheme, Model, ProjectorSpec};
use mmode_ssl::ssl::SslMethod;
use mmode_ssl::synth::SynthConfig;
use mmode_ssl::train::{TrainConfig, TrainMode};
use mmode_ssl::{Error, Result};

/// Which manifests feed pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataChoice {
    Train,
    TrainUnlabeled,
}

impl DataChoice {
    pub fn name(self) -> &'static str {
        match self {
            DataChoice::Train => "train",
            DataChoice::TrainUnlabeled => "train+unlabeled",
        }
    }

    pub fn splits(self) -> &'static [&'static str] {
        match self {
            DataChoice::Train => &["train"],
            DataChoice::TrainUnlabeled => &["train", "unlabeled"],
        }
    }
}

impl fmt::Display for DataChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DataChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(DataChoice::Train),
            "train+unlabeled" => Ok(DataChoice::TrainUnlabeled),
            other => Err(Error::Config(format!("unknown data choice {other:?}"))),
        }
    }
}

/// `simclr | barlow_twins | vicreg | none`.
pub fn parse_method(s: &str) -> Result<Option<SslMethod>> {
    match s {
        "none" => Ok(None),
        other => other.parse().map(Some).map_err(|e: Error| Error::Config(e.to_string())),
    }
}

pub fn method_name(m: Option<SslMethod>) -> &'static str {
    m.map_or("none", |m| m.name())
}

fn parse_init(s: &str) -> Result<InitScheme> {
    s.parse().map_err(|e: Error| Error::Config(e.to_string()))
}

fn list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(f).collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty list {s:?}")));
    }
    Ok(items)
}

/// Synthetic-data settings beyond the per-dataset generator config.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub base: SynthConfig,
    pub n_unlabeled: usize,
    pub external_sets: usize,
    pub external_videos: usize,
    /// Brightness offset of external set `k` is `k · external_offset`.
    pub external_offset: f64,
    /// Extra noise std of external set `k` is `k · external_noise`.
    pub external_noise: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            base: SynthConfig::default(),
            n_unlabeled: 800,
            external_sets: 3,
            external_videos: 40,
            external_offset: 10.0,
            external_noise: 2.0,
        }
    }
}

/// Every setting of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: Model,
    pub synth: SynthSettings,
    pub segment_seconds: f64,
    pub pretrain: TrainConfig,
    pub downstream: TrainConfig,
    /// Augmentation parameters; `pipeline` selects the pretraining recipe.
    pub aug: AugmentationConfig,
    pub method: Option<SslMethod>,
    pub init: InitScheme,
    pub mode: TrainMode,
    pub data: DataChoice,
    pub label_fractions: Vec<f64>,
    pub sweep_inits: Vec<InitScheme>,
    pub threshold: f64,
    pub saliency_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: Model::default(),
            synth: SynthSettings::default(),
            segment_seconds: 3.0,
            pretrain: TrainConfig::pretrain(SslMethod::BarlowTwins),
            downstream: TrainConfig::downstream(TrainMode::Finetune),
            aug: AugmentationConfig::new(PipelineKind::MMode, 0),
            method: Some(SslMethod::BarlowTwins),
            init: InitScheme::Random,
            mode: TrainMode::Linear,
            data: DataChoice::Train,
            label_fractions: vec![0.1, 0.25, 0.5, 1.0],
            sweep_inits: vec![InitScheme::Random, InitScheme::PseudoPretrained],
            threshold: 0.5,
            saliency_count: 16,
        }
    }
}

const SYNTH_KEYS: &[&str] = &[
    "n_present",
    "n_absent",
    "n_unlabeled",
    "frames",
    "height",
    "width",
    "fps",
    "pleural_row_min",
    "pleural_row_max",
    "noise",
    "texture",
    "present_rho",
    "gain_jitter",
    "videos_per_patient",
    "external_sets",
    "external_videos",
    "external_offset",
    "external_noise",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Defaults overridden by a config file's `key=value` lines.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("synth.") {
            return self.set_synth(k, value);
        }
        if let Some(k) = key.strip_prefix("pretrain.").or_else(|| key.strip_prefix("downstream.")) {
            if k.starts_with("ssl.method") {
                return Err(Error::Config(format!("{key}: set the objective with run.method")));
            }
            if key.starts_with("downstream.ssl.") {
                return Err(Error::Config(format!("{key}: downstream training has no SSL objective")));
            }
            let target = if key.starts_with("pretrain.") { &mut self.pretrain } else { &mut self.downstream };
            return target.set(k, value);
        }
        if let Some(k) = key.strip_prefix("aug.") {
            if k == "seed" {
                return Err(Error::Config("aug.seed is derived from seed".into()));
            }
            return self.aug.set(k, value);
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "model.encoder" => {
                let in_channels = self.model.encoder.in_channels;
                let mut enc: EncoderSpec = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
                enc.in_channels = in_channels;
                self.model = Model::new(enc, self.model.projector)?;
            }
            "model.projector_layers" => {
                let p = ProjectorSpec { layers: num(key, value)?, ..self.model.projector };
                self.model = Model::new(self.model.encoder.clone(), p)?;
            }
            "model.projector_width" => {
                let p = ProjectorSpec { width: num(key, value)?, ..self.model.projector };
                self.model = Model::new(self.model.encoder.clone(), p)?;
            }
            "extract.segment_seconds" => self.segment_seconds = num(key, value)?,
            "run.method" => self.method = parse_method(value)?,
            "run.init" => self.init = parse_init(value)?,
            "run.mode" => {
                self.mode = value.parse()?;
                if self.mode == TrainMode::Pretrain {
                    return Err(Error::Config("run.mode must be linear or finetune".into()));
                }
            }
            "run.data" => self.data = value.parse()?,
            "sweep.label_fractions" => self.label_fractions = list(value, |s| num(key, s))?,
            "sweep.inits" => self.sweep_inits = list(value, parse_init)?,
            "eval.threshold" => self.threshold = num(key, value)?,
            "saliency.count" => self.saliency_count = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    fn set_synth(&mut self, k: &str, value: &str) -> Result<()> {
        let key = format!("synth.{k}");
        let b = &mut self.synth.base;
        match k {
            "n_present" => b.n_present = num(&key, value)?,
            "n_absent" => b.n_absent = num(&key, value)?,
            "frames" => b.frames = num(&key, value)?,
            "height" => b.height = num(&key, value)?,
            "width" => b.width = num(&key, value)?,
            "fps" => b.fps = num(&key, value)?,
            "pleural_row_min" => b.pleural_row_min = num(&key, value)?,
            "pleural_row_max" => b.pleural_row_max = num(&key, value)?,
            "noise" => b.noise = num(&key, value)?,
            "texture" => b.texture = num(&key, value)?,
            "present_rho" => b.present_rho = num(&key, value)?,
            "gain_jitter" => b.gain_jitter = num(&key, value)?,
            "videos_per_patient" => b.videos_per_patient = num(&key, value)?,
            "n_unlabeled" => self.synth.n_unlabeled = num(&key, value)?,
            "external_sets" => self.synth.external_sets = num(&key, value)?,
            "external_videos" => self.synth.external_videos = num(&key, value)?,
            "external_offset" => self.synth.external_offset = num(&key, value)?,
            "external_noise" => self.synth.external_noise = num(&key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    fn synth_value(&self, k: &str) -> String {
        let b = &self.synth.base;
        match k {
            "n_present" => b.n_present.to_string(),
            "n_absent" => b.n_absent.to_string(),
            "frames" => b.frames.to_string(),
            "height" => b.height.to_string(),
            "width" => b.width.to_string(),
            "fps" => b.fps.to_string(),
            "pleural_row_min" => b.pleural_row_min.to_string(),
            "pleural_row_max" => b.pleural_row_max.to_string(),
            "noise" => b.noise.to_string(),
            "texture" => b.texture.to_string(),
            "present_rho" => b.present_rho.to_string(),
            "gain_jitter" => b.gain_jitter.to_string(),
            "videos_per_patient" => b.videos_per_patient.to_string(),
            "n_unlabeled" => self.synth.n_unlabeled.to_string(),
            "external_sets" => self.synth.external_sets.to_string(),
            "external_videos" => self.synth.external_videos.to_string(),
            "external_offset" => self.synth.external_offset.to_string(),
            "external_noise" => self.synth.external_noise.to_string(),
            _ => unreachable!("synth key list and values out of sync: {k}"),
        }
    }

    /// All settable keys with their current values. Feeding this back
    /// through [`RunConfig::from_text`] reproduces the configuration.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("model.encoder".into(), self.model.encoder.to_string()),
            ("model.projector_layers".into(), self.model.projector.layers.to_string()),
            ("model.projector_width".into(), self.model.projector.width.to_string()),
        ];
        out.extend(SYNTH_KEYS.iter().map(|k| (format!("synth.{k}"), self.synth_value(k))));
        out.push(("extract.segment_seconds".into(), self.segment_seconds.to_string()));
        let train_keys = |prefix: &str, t: &TrainConfig, ssl: bool| -> Vec<(String, String)> {
            t.echo()
                .into_iter()
                .filter(|(k, _)| {
                    !matches!(k.as_str(), "mode" | "seed" | "ssl.method")
                        && !k.starts_with("aug.")
                        && (ssl || !k.starts_with("ssl."))
                })
                .map(|(k, v)| (format!("{prefix}.{k}"), v))
                .collect()
        };
        out.extend(train_keys("pretrain", &self.pretrain, true));
        out.extend(train_keys("downstream", &self.downstream, false));
        out.push(("aug.pipeline".into(), self.aug.pipeline.to_string()));
        out.extend(self.aug.params().into_iter().map(|(k, v)| (format!("aug.{k}"), v.to_string())));
        out.extend([
            ("run.method".into(), method_name(self.method).to_string()),
            ("run.init".into(), self.init.to_string()),
            ("run.mode".into(), self.mode.to_string()),
            ("run.data".into(), self.data.to_string()),
            (
                "sweep.label_fractions".into(),
                self.label_fractions.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(","),
            ),
            (
                "sweep.inits".into(),
                self.sweep_inits.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("eval.threshold".into(), self.threshold.to_string()),
            ("saliency.count".into(), self.saliency_count.to_string()),
        ]);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.base.validate()?;
        if !(self.segment_seconds > 0.0) {
            return Err(Error::Config("extract.segment_seconds must be positive".into()));
        }
        if self.label_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("label fractions must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("eval.threshold must lie in [0, 1]".into()));
        }
        if self.method.is_some() {
            self.pretrain_config()?.validate()?;
        }
        self.downstream_config(self.mode, 1.0)?.validate()
    }

    /// Independent seed for a named stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let tag = stage.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        sample_index(&[self.seed, tag])
    }

    pub fn pretrain_config(&self) -> Result<TrainConfig> {
        let method = self
            .method
            .ok_or_else(|| Error::Config("pretraining needs run.method other than none".into()))?;
        let mut t = self.pretrain.clone();
        t.mode = TrainMode::Pretrain;
        t.ssl.method = method;
        t.seed = self.stage_seed("pretrain");
        t.aug = self.aug.clone();
        t.aug.seed = self.stage_seed("pretrain-aug");
        Ok(t)
    }

    pub fn downstream_config(&self, mode: TrainMode, fraction: f64) -> Result<TrainConfig> {
        let mut t = self.downstream.clone();
        t.mode = mode;
        t.label_fraction = fraction;
        t.seed = self.stage_seed("downstream");
        t.aug = self.aug.clone();
        t.aug.pipeline = PipelineKind::Downstream;
        t.aug.seed = self.stage_seed("downstream-aug");
        Ok(t)
    }

    /// Name of the pretraining run directory.
    pub fn pretrain_name(&self, init: InitScheme) -> String {
        format!("{}-{}-{}-{}", method_name(self.method), init, self.aug.pipeline, self.data)
    }

    /// Name of a downstream run directory; supervised baselines are named
    /// after their initialisation.
    pub fn downstream_name(&self, mode: TrainMode, init: InitScheme, fraction: f64) -> String {
        let source = match self.method {
            Some(_) => self.pretrain_name(init),
            None => format!("supervised-{init}"),
        };
        if fraction < 1.0 {
            format!("{mode}-{source}-f{fraction}")
        } else {
            format!("{mode}-{source}")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("synth.noise", "4.5").unwrap();
        cfg.set("pretrain.epochs", "7").unwrap();
        cfg.set("aug.mmode.crop_p", "0.25").unwrap();
        cfg.set("model.encoder", "8:5:2,16").unwrap();
        cfg.set("run.method", "none").unwrap();
        cfg.set("sweep.label_fractions", "0.5,1").unwrap();
        let text = mmode_ssl::config::render_pairs(&cfg.echo());
        assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_conflicting_keys() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("synth.nope", "1").is_err());
        assert!(cfg.set("pretrain.ssl.method", "simclr").is_err());
        assert!(cfg.set("downstream.ssl.temperature", "0.2").is_err());
        assert!(cfg.set("aug.seed", "3").is_err());
        assert!(cfg.set("run.mode", "pretrain").is_err());
        assert!(cfg.set("pretrain.epochs", "many").is_err());
    }

    #[test]
    fn run_names() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.pretrain_name(InitScheme::Random), "barlow_twins-random-mmode-train");
        assert_eq!(
            cfg.downstream_name(TrainMode::Finetune, InitScheme::Random, 0.25),
            "finetune-barlow_twins-random-mmode-train-f0.25"
        );
        cfg.method = None;
        assert_eq!(cfg.downstream_name(TrainMode::Linear, InitScheme::Random, 1.0), "linear-supervised-random");
    }
}
