//! Pretraining, linear probing and fine-tuning loops, checkpoints and loss
//! histories.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::augment::{sample_index, AugmentationConfig, BranchRole, PipelineKind, RngStream, SampleKey};
use crate::config::{parse_pairs, render_pairs};
use crate::error::{Error, Result};
use crate::formats::{read_weights, write_weights, Label};
use crate::mmode::{MModeImage, MMODE_SIZE};
use crate::model::{group_of, BoundParams, EncoderSpec, Model, ModelParameters, ParamGroup, ProjectorSpec};
use crate::optim::Adam;
use crate::pairs::{epoch_batches, make_batch, to_input, VideoMModes};
use crate::ssl::{EmbeddingBatch, SslLossConfig, SslMethod};
use crate::tape::ComputationTape;
use crate::tensor::Tensor;

const SHUFFLE_STEP: u64 = 200;
const SUBSET_STEP: u64 = 201;

/// Absent-sliding videos contribute this many of their brightest M-modes.
pub const OVERSAMPLE_RANKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    Pretrain,
    /// Only the classifier head is trained.
    Linear,
    /// Everything past the first conv block is trained.
    Finetune,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Pretrain => "pretrain",
            TrainMode::Linear => "linear",
            TrainMode::Finetune => "finetune",
        }
    }

    /// Whether the named parameter is updated in this mode.
    pub fn trains(self, name: &str) -> bool {
        match (self, group_of(name)) {
            (TrainMode::Pretrain, Some(ParamGroup::Block(_) | ParamGroup::Projector)) => true,
            (TrainMode::Linear, Some(ParamGroup::Head)) => true,
            (TrainMode::Finetune, Some(ParamGroup::Head)) => true,
            (TrainMode::Finetune, Some(ParamGroup::Block(i))) => i >= 2,
            _ => false,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(TrainMode::Pretrain),
            "linear" => Ok(TrainMode::Linear),
            "finetune" => Ok(TrainMode::Finetune),
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }
}

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Per-epoch multiplicative decay rate applied after `decay_after`.
    pub decay: f64,
    pub decay_after: usize,
    pub seed: u64,
    pub ssl: SslLossConfig,
    pub label_fraction: f64,
    /// Largest number of images pushed through the network at once.
    /// Gradients are accumulated exactly across chunks.
    pub micro_batch: usize,
    pub image_size: usize,
    pub aug: AugmentationConfig,
}

impl TrainConfig {
    /// 100 epochs of batch-128 pairs, Adam at 1e-3, M-mode augmentations.
    pub fn pretrain(method: SslMethod) -> Self {
        Self {
            mode: TrainMode::Pretrain,
            epochs: 100,
            batch_size: 128,
            lr0: 1e-3,
            decay: 0.0,
            decay_after: 0,
            seed: 0,
            ssl: SslLossConfig::new(method),
            label_fraction: 1.0,
            micro_batch: 256,
            image_size: MMODE_SIZE,
            aug: AugmentationConfig::new(PipelineKind::MMode, 0),
        }
    }

    /// 40 epochs at 1e-4, decaying by 3% per epoch after epoch 15.
    pub fn downstream(mode: TrainMode) -> Self {
        Self {
            mode,
            epochs: 40,
            batch_size: 128,
            lr0: 1e-4,
            decay: 0.03,
            decay_after: 15,
            seed: 0,
            ssl: SslLossConfig::new(SslMethod::BarlowTwins),
            label_fraction: 1.0,
            micro_batch: 256,
            image_size: MMODE_SIZE,
            aug: AugmentationConfig::new(PipelineKind::Downstream, 0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.micro_batch == 0 || self.image_size == 0 {
            return Err(Error::Config("batch_size, micro_batch and image_size must be positive".into()));
        }
        if self.mode == TrainMode::Pretrain && self.batch_size < 2 {
            return Err(Error::Config("pretraining needs at least two pairs per batch".into()));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::Config(format!("decay must lie in [0, 1), got {}", self.decay)));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!("label_fraction must lie in (0, 1], got {}", self.label_fraction)));
        }
        self.ssl.validate()?;
        self.aug.validate()
    }

    /// Sets a training key (`epochs`, `batch_size`, `lr`, `decay`,
    /// `decay_after`, `label_fraction`, `micro_batch`, `image_size`) or an
    /// objective key (`ssl.method`, `ssl.temperature`, `ssl.bt_lambda`,
    /// `ssl.vic_lambda`, `ssl.vic_mu`, `ssl.vic_nu`, `ssl.vic_gamma`,
    /// `ssl.eps_var`, `ssl.eps_norm`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr0 = num(key, value)?,
            "decay" => self.decay = num(key, value)?,
            "decay_after" => self.decay_after = num(key, value)?,
            "label_fraction" => self.label_fraction = num(key, value)?,
            "micro_batch" => self.micro_batch = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "ssl.method" => self.ssl.method = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "ssl.temperature" => self.ssl.temperature = num(key, value)?,
            "ssl.bt_lambda" => self.ssl.bt_lambda = num(key, value)?,
            "ssl.vic_lambda" => self.ssl.vic_lambda = num(key, value)?,
            "ssl.vic_mu" => self.ssl.vic_mu = num(key, value)?,
            "ssl.vic_nu" => self.ssl.vic_nu = num(key, value)?,
            "ssl.vic_gamma" => self.ssl.vic_gamma = num(key, value)?,
            "ssl.eps_var" => self.ssl.eps_var = num(key, value)?,
            "ssl.eps_norm" => self.ssl.eps_norm = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    /// Every setting as `key=value` pairs, in a fixed order.
    pub fn echo(&self) -> Vec<(String, String)> {
        let s = &self.ssl;
        let mut out: Vec<(String, String)> = vec![
            ("mode".into(), self.mode.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), self.lr0.to_string()),
            ("decay".into(), self.decay.to_string()),
            ("decay_after".into(), self.decay_after.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("label_fraction".into(), self.label_fraction.to_string()),
            ("micro_batch".into(), self.micro_batch.to_string()),
            ("image_size".into(), self.image_size.to_string()),
            ("ssl.method".into(), s.method.to_string()),
            ("ssl.temperature".into(), s.temperature.to_string()),
            ("ssl.bt_lambda".into(), s.bt_lambda.to_string()),
            ("ssl.vic_lambda".into(), s.vic_lambda.to_string()),
            ("ssl.vic_mu".into(), s.vic_mu.to_string()),
            ("ssl.vic_nu".into(), s.vic_nu.to_string()),
            ("ssl.vic_gamma".into(), s.vic_gamma.to_string()),
            ("ssl.eps_var".into(), s.eps_var.to_string()),
            ("ssl.eps_norm".into(), s.eps_norm.to_string()),
            ("aug.pipeline".into(), self.aug.pipeline.to_string()),
            ("aug.seed".into(), self.aug.seed.to_string()),
        ];
        out.extend(self.aug.params().into_iter().map(|(k, v)| (format!("aug.{k}"), v.to_string())));
        out
    }

    /// SHA-1 of the echoed settings plus `extra` (for example the model
    /// architecture and data identity).
    pub fn fingerprint(&self, extra: &str) -> String {
        let mut h = sha1_smol::Sha1::new();
        h.update(render_pairs(&self.echo()).as_bytes());
        h.update(extra.as_bytes());
        h.digest().to_string()
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.lr0, self.decay, self.decay_after)
    }
}

/// `lr0` up to and including epoch `after`, then `lr0 · (1 - decay)^(epoch - after)`.
/// Epochs count from 1.
pub fn lr_schedule(epoch: usize, lr0: f64, decay: f64, after: usize) -> f64 {
    if epoch <= after {
        lr0
    } else {
        lr0 * (1.0 - decay).powi((epoch - after) as i32)
    }
}

// ---------------------------------------------------------------------------
// Labelled data

/// A labelled video with its M-modes ordered brightest first.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    pub video_id: String,
    pub label: Label,
    pub images: Vec<MModeImage>,
}

/// One training or evaluation image and its target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: MModeImage,
    pub label: Label,
}

/// Present-sliding videos contribute their brightest M-mode; absent-sliding
/// videos contribute their four brightest (fewer if they have fewer).
pub fn oversample_minority(videos: &[LabeledVideo]) -> Vec<Sample> {
    let mut out = Vec::new();
    for v in videos {
        let take = match v.label {
            Label::Present => 1,
            Label::Absent => OVERSAMPLE_RANKS,
        };
        out.extend(v.images.iter().take(take).map(|image| Sample { image: image.clone(), label: v.label }));
    }
    out
}

/// The brightest M-mode of every video, as used for validation and testing.
pub fn evaluation_samples(videos: &[LabeledVideo]) -> Vec<Sample> {
    videos
        .iter()
        .filter_map(|v| v.images.first().map(|image| Sample { image: image.clone(), label: v.label }))
        .collect()
}

/// Keeps `ceil(fraction · n)` videos of each class (at least one), chosen
/// at random; original order is preserved.
pub fn subset_by_fraction(videos: &[LabeledVideo], fraction: f64, seed: u64) -> Result<Vec<LabeledVideo>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    let mut keep = vec![false; videos.len()];
    for (ci, class) in [Label::Present, Label::Absent].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..videos.len()).filter(|&i| videos[i].label == class).collect();
        if idx.is_empty() {
            continue;
        }
        let n = ((fraction * idx.len() as f64).ceil() as usize).clamp(1, idx.len());
        idx.shuffle(RngStream::new(seed, ci as u64, SUBSET_STEP).inner());
        for &i in &idx[..n] {
            keep[i] = true;
        }
    }
    Ok(videos.iter().zip(keep).filter(|(_, k)| *k).map(|(v, _)| v.clone()).collect())
}

fn inputs(images: &[&MModeImage], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        data.extend(to_input(img, size)?);
    }
    Tensor::new(vec![images.len(), 1, size, size], data)
}

// ---------------------------------------------------------------------------
// Checkpoints and histories

/// Trained parameters plus the bookkeeping needed to trust them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub params: ModelParameters,
    /// Epoch the parameters were taken from.
    pub epoch: usize,
    /// Validation loss at that epoch (downstream runs only).
    pub val_loss: Option<f64>,
    pub fingerprint: String,
}

pub const WEIGHTS_FILE: &str = "weights.mmsl";
pub const META_FILE: &str = "checkpoint.meta";

impl Checkpoint {
    /// Writes `weights.mmsl` and `checkpoint.meta` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_weights(&dir.join(WEIGHTS_FILE), &self.params)?;
        let meta = [
            ("epoch", self.epoch.to_string()),
            ("val_loss", self.val_loss.map_or("none".into(), |v| v.to_string())),
            ("fingerprint", self.fingerprint.clone()),
            ("encoder", self.model.encoder.to_string()),
            ("encoder.in_channels", self.model.encoder.in_channels.to_string()),
            ("projector.layers", self.model.projector.layers.to_string()),
            ("projector.width", self.model.projector.width.to_string()),
        ];
        fs::write(dir.join(META_FILE), render_pairs(&meta))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", meta_path.display())))?;
        let pairs = parse_pairs(&text)?;
        let get = |k: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("{}: missing {k}", meta_path.display())))
        };
        let bad = |k: &str| Error::Format(format!("{}: bad value for {k}", meta_path.display()));
        let mut encoder: EncoderSpec = get("encoder")?.parse().map_err(|_| bad("encoder"))?;
        encoder.in_channels = get("encoder.in_channels")?.parse().map_err(|_| bad("encoder.in_channels"))?;
        let projector = ProjectorSpec {
            layers: get("projector.layers")?.parse().map_err(|_| bad("projector.layers"))?,
            width: get("projector.width")?.parse().map_err(|_| bad("projector.width"))?,
        };
        let model = Model::new(encoder, projector)?;
        let params = read_weights(&dir.join(WEIGHTS_FILE))?;
        model.check_parameters(&params)?;
        let val_loss = match get("val_loss")? {
            "none" => None,
            v => Some(v.parse().map_err(|_| bad("val_loss"))?),
        };
        Ok(Self {
            model,
            params,
            epoch: get("epoch")?.parse().map_err(|_| bad("epoch"))?,
            val_loss,
            fingerprint: get("fingerprint")?.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// `epoch,train_loss,val_loss,lr` with an empty field when there is no
/// validation loss.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        let val = r.val_loss.map_or(String::new(), |v| v.to_string());
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, val, r.lr));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Parameters after the last epoch, which may differ from the
    /// checkpoint's.
    pub final_params: ModelParameters,
    pub history: Vec<EpochRecord>,
}

// ---------------------------------------------------------------------------
// Gradient steps

type Grads = Vec<(String, Tensor)>;

fn accumulate(total: &mut Grads, part: Grads) -> Result<()> {
    if total.is_empty() {
        *total = part;
        return Ok(());
    }
    for ((name, acc), (pname, g)) in total.iter_mut().zip(part) {
        debug_assert_eq!(*name, pname);
        let data = acc.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
        *acc = Tensor::checked(acc.shape().to_vec(), data, "gradient accumulation")?;
    }
    Ok(())
}

fn collect(tape: &ComputationTape, bound: &BoundParams, root: crate::NodeId, mode: TrainMode) -> Result<Grads> {
    let grads = tape.backward(root)?;
    Ok(bound
        .iter()
        .filter(|(name, _)| mode.trains(name))
        .filter_map(|(name, id)| grads.get(id).map(|g| (name.to_string(), g.clone())))
        .collect())
}

fn slice_rows(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let per = x.numel() / x.shape()[0];
    let mut shape = x.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, x.data()[start * per..end * per].to_vec())
}

/// Loss and parameter gradients of the SSL objective on a stacked
/// `[2N, 1, S, S]` batch. Large batches are processed in two passes:
/// embeddings first, then backpropagation of the embedding gradient chunk by
/// chunk, which gives the same gradients as a single pass.
pub fn ssl_gradients(model: &Model, params: &ModelParameters, stacked: &Tensor, cfg: &TrainConfig) -> Result<(f64, Grads)> {
    let mode = TrainMode::Pretrain;
    let total = stacked.shape()[0];
    if total <= cfg.micro_batch {
        let mut tape = ComputationTape::new();
        let bound = BoundParams::bind(&mut tape, params, |n| mode.trains(n));
        let x = tape.constant(stacked.clone());
        let f = model.forward_features(&mut tape, x, &bound)?;
        let z = model.forward_projector(&mut tape, f.features, &bound)?;
        let loss = crate::ssl::record_on_tape(&mut tape, z, &cfg.ssl)?;
        let value = tape.value(loss).item()?;
        return Ok((value, collect(&tape, &bound, loss, mode)?));
    }

    let chunks: Vec<(usize, usize)> =
        (0..total).step_by(cfg.micro_batch).map(|s| (s, (s + cfg.micro_batch).min(total))).collect();
    let mut rows = Vec::new();
    for &(s, e) in &chunks {
        let mut tape = ComputationTape::new();
        let bound = BoundParams::bind(&mut tape, params, |_| false);
        let x = tape.constant(slice_rows(stacked, s, e)?);
        let f = model.forward_features(&mut tape, x, &bound)?;
        let z = model.forward_projector(&mut tape, f.features, &bound)?;
        rows.extend_from_slice(tape.value(z).data());
    }
    let d = rows.len() / total;
    let z = Tensor::new(vec![total, d], rows)?;
    let lg = cfg.ssl.evaluate(&EmbeddingBatch::from_stacked(&z)?)?;
    let mut g = lg.grad_a.into_data();
    g.extend_from_slice(lg.grad_b.data());
    let g = Tensor::new(vec![total, d], g)?;

    let mut grads = Grads::new();
    for &(s, e) in &chunks {
        let mut tape = ComputationTape::new();
        let bound = BoundParams::bind(&mut tape, params, |n| mode.trains(n));
        let x = tape.constant(slice_rows(stacked, s, e)?);
        let f = model.forward_features(&mut tape, x, &bound)?;
        let zc = model.forward_projector(&mut tape, f.features, &bound)?;
        let root = tape.fused_scalar(&[zc], 0.0, vec![slice_rows(&g, s, e)?])?;
        accumulate(&mut grads, collect(&tape, &bound, root, mode)?)?;
    }
    Ok((lg.value, grads))
}

/// Mean BCE and parameter gradients for a labelled batch, accumulated over
/// chunks of at most `micro_batch` images.
pub fn bce_gradients(
    model: &Model,
    params: &ModelParameters,
    x: &Tensor,
    targets: &[f64],
    mode: TrainMode,
    micro_batch: usize,
) -> Result<(f64, Grads)> {
    let n = x.shape()[0];
    let mut loss = 0.0;
    let mut grads = Grads::new();
    for s in (0..n).step_by(micro_batch) {
        let e = (s + micro_batch).min(n);
        let mut tape = ComputationTape::new();
        let bound = BoundParams::bind(&mut tape, params, |name| mode.trains(name));
        let input = tape.constant(slice_rows(x, s, e)?);
        let f = model.forward_features(&mut tape, input, &bound)?;
        let logits = model.forward_logits(&mut tape, f.features, &bound)?;
        let flat = tape.reshape(logits, &[e - s])?;
        let part = tape.bce_with_logits(flat, &targets[s..e])?;
        let weighted = tape.scale(part, (e - s) as f64 / n as f64)?;
        loss += tape.value(weighted).item()?;
        accumulate(&mut grads, collect(&tape, &bound, weighted, mode)?)?;
    }
    Ok((loss, grads))
}

/// Pre-sigmoid logits for every image, computed in chunks.
pub fn logits(model: &Model, params: &ModelParameters, x: &Tensor, chunk: usize) -> Result<Vec<f64>> {
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n);
    for s in (0..n).step_by(chunk.max(1)) {
        let e = (s + chunk.max(1)).min(n);
        let mut tape = ComputationTape::new();
        let bound = BoundParams::bind(&mut tape, params, |_| false);
        let input = tape.constant(slice_rows(x, s, e)?);
        let f = model.forward_features(&mut tape, input, &bound)?;
        let l = model.forward_logits(&mut tape, f.features, &bound)?;
        out.extend_from_slice(tape.value(l).data());
    }
    Ok(out)
}

fn numerical(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) | Error::Numerical(m) => {
            Error::Numerical(format!("non-finite value at epoch {epoch}, batch {batch}: {m}"))
        }
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Loops

/// Self-supervised pretraining on same-video pairs. The head is carried
/// along untouched; the returned checkpoint holds the final parameters.
pub fn pretrain(
    model: &Model,
    init: ModelParameters,
    cfg: &TrainConfig,
    data: &[VideoMModes],
    observe: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Pretrain {
        return Err(Error::Config(format!("pretrain called with mode {}", cfg.mode)));
    }
    model.check_parameters(&init)?;
    let mut params = init;
    let mut opt = Adam::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr(epoch);
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch as u64)?;
        let mut total = 0.0;
        for (b, members) in batches.iter().enumerate() {
            let batch = make_batch(data, members, &cfg.aug, cfg.image_size, epoch as u64, b as u64)?;
            let stacked = batch.stacked()?;
            let (loss, grads) =
                ssl_gradients(model, &params, &stacked, cfg).map_err(|e| numerical(epoch, b + 1, e))?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss {loss} at epoch {epoch}, batch {}", b + 1)));
            }
            opt.step(&mut params, &grads, lr).map_err(|e| numerical(epoch, b + 1, e))?;
            total += loss;
        }
        let rec = EpochRecord { epoch, train_loss: total / batches.len() as f64, val_loss: None, lr };
        observe(&rec);
        history.push(rec);
    }
    let checkpoint = Checkpoint {
        model: model.clone(),
        params: params.clone(),
        epoch: cfg.epochs,
        val_loss: None,
        fingerprint: cfg.fingerprint(&model.encoder.to_string()),
    };
    Ok(TrainOutcome { checkpoint, final_params: params, history })
}

/// Supervised training of the head (linear mode) or of everything past the
/// first block (fine-tune mode) with binary cross-entropy. The training
/// set is subset by `label_fraction` and oversampled; validation uses each
/// video's brightest M-mode without augmentation. The checkpoint keeps the
/// parameters from the epoch with the lowest validation loss.
pub fn train_downstream(
    model: &Model,
    init: ModelParameters,
    cfg: &TrainConfig,
    train: &[LabeledVideo],
    val: &[LabeledVideo],
    observe: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode == TrainMode::Pretrain {
        return Err(Error::Config("downstream training needs mode linear or finetune".into()));
    }
    model.check_parameters(&init)?;
    init.require("head.weight")?;
    let subset = subset_by_fraction(train, cfg.label_fraction, cfg.seed)?;
    let samples = oversample_minority(&subset);
    let classes: std::collections::HashSet<Label> = samples.iter().map(|s| s.label).collect();
    if classes.len() < 2 {
        return Err(Error::Data("training set contains a single class".into()));
    }
    let val_samples = evaluation_samples(val);
    if val_samples.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let val_x = inputs(&val_samples.iter().map(|s| &s.image).collect::<Vec<_>>(), cfg.image_size)?;
    let val_y: Vec<f64> = val_samples.iter().map(|s| s.label.target()).collect();

    let mut params = init;
    let mut opt = Adam::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParameters)> = None;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(RngStream::new(cfg.seed, sample_index(&[epoch as u64]), SHUFFLE_STEP).inner());
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut data = Vec::with_capacity(chunk.len() * cfg.image_size * cfg.image_size);
            let mut targets = Vec::with_capacity(chunk.len());
            for (slot, &i) in chunk.iter().enumerate() {
                let s = &samples[i];
                let key = SampleKey::new(cfg.aug.seed, sample_index(&[epoch as u64, b as u64, slot as u64]));
                let img = cfg.aug.apply(&s.image, key, BranchRole::First)?.image;
                data.extend(to_input(&img, cfg.image_size)?);
                targets.push(s.label.target());
            }
            let x = Tensor::new(vec![chunk.len(), 1, cfg.image_size, cfg.image_size], data)?;
            let (loss, grads) = bce_gradients(model, &params, &x, &targets, cfg.mode, cfg.micro_batch)
                .map_err(|e| numerical(epoch, b + 1, e))?;
            opt.step(&mut params, &grads, lr).map_err(|e| numerical(epoch, b + 1, e))?;
            total += loss * chunk.len() as f64;
        }
        let z = logits(model, &params, &val_x, cfg.micro_batch).map_err(|e| numerical(epoch, 0, e))?;
        let val_loss = crate::ops::bce_with_logits(&z, &val_y)?;
        if best.as_ref().map_or(true, |(v, _, _)| val_loss < *v) {
            best = Some((val_loss, epoch, params.clone()));
        }
        let rec = EpochRecord { epoch, train_loss: total / samples.len() as f64, val_loss: Some(val_loss), lr };
        observe(&rec);
        history.push(rec);
    }
    let (val_loss, epoch, best_params) = best.expect("at least one epoch");
    let checkpoint = Checkpoint {
        model: model.clone(),
        params: best_params,
        epoch,
        val_loss: Some(val_loss),
        fingerprint: cfg.fingerprint(&model.encoder.to_string()),
    };
    Ok(TrainOutcome { checkpoint, final_params: params, history })
}

/// Downstream starting point: the extractor of `source` with a freshly
/// initialised head; the projector is dropped.
pub fn attach_head(model: &Model, source: &ModelParameters, seed: u64) -> Result<ModelParameters> {
    let mut params = source.extractor();
    let fresh = model.initialize(seed, crate::model::InitScheme::Random)?;
    for name in ["head.weight", "head.bias"] {
        params.insert(name, fresh.require(name)?.clone())?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(id: &str, label: Label, k: usize) -> LabeledVideo {
        let images = (0..k)
            .map(|c| MModeImage::new(Tensor::full(&[4, 4], c as f64), id, c, c + 1).unwrap())
            .collect();
        LabeledVideo { video_id: id.into(), label, images }
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(1, 1e-4, 0.03, 15), 1e-4);
        assert_eq!(lr_schedule(15, 1e-4, 0.03, 15), 1e-4);
        assert!((lr_schedule(16, 1e-4, 0.03, 15) - 9.7e-5).abs() < 1e-18);
        assert!((lr_schedule(40, 1e-4, 0.03, 15) - 4.67e-5).abs() < 1e-7);
    }

    #[test]
    fn oversampling_counts() {
        let mut vids: Vec<LabeledVideo> = (0..100).map(|i| labeled(&format!("p{i}"), Label::Present, 5)).collect();
        vids.extend((0..25).map(|i| labeled(&format!("a{i}"), Label::Absent, 5)));
        let s = oversample_minority(&vids);
        assert_eq!(s.iter().filter(|x| x.label == Label::Present).count(), 100);
        assert_eq!(s.iter().filter(|x| x.label == Label::Absent).count(), 100);
        assert_eq!(oversample_minority(&[labeled("a", Label::Absent, 2)]).len(), 2);
    }

    #[test]
    fn fraction_subsets_are_stratified() {
        let mut vids: Vec<LabeledVideo> = (0..40).map(|i| labeled(&format!("p{i}"), Label::Present, 1)).collect();
        vids.extend((0..10).map(|i| labeled(&format!("a{i}"), Label::Absent, 1)));
        let sub = subset_by_fraction(&vids, 0.1, 3).unwrap();
        assert_eq!(sub.iter().filter(|v| v.label == Label::Present).count(), 4);
        assert_eq!(sub.iter().filter(|v| v.label == Label::Absent).count(), 1);
        assert_eq!(subset_by_fraction(&vids, 1.0, 3).unwrap(), vids);
        assert!(subset_by_fraction(&vids, 0.0, 3).is_err());
    }

    #[test]
    fn freezing_rules() {
        assert!(TrainMode::Linear.trains("head.weight"));
        assert!(!TrainMode::Linear.trains("block2.weight"));
        assert!(!TrainMode::Finetune.trains("block1.weight"));
        assert!(TrainMode::Finetune.trains("block2.bias"));
        assert!(!TrainMode::Finetune.trains("projector.1.weight"));
        assert!(TrainMode::Pretrain.trains("projector.1.weight"));
        assert!(!TrainMode::Pretrain.trains("head.bias"));
    }

    #[test]
    fn config_keys() {
        let mut c = TrainConfig::downstream(TrainMode::Linear);
        c.set("epochs", "3").unwrap();
        c.set("ssl.method", "vicreg").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.ssl.method, SslMethod::VicReg);
        assert!(c.set("bogus", "1").is_err());
        assert!(c.set("epochs", "x").is_err());
        assert_eq!(c.fingerprint(""), c.clone().fingerprint(""));
        assert_eq!(c.fingerprint("").len(), 40);
    }

    #[test]
    fn history_format() {
        let h = [EpochRecord { epoch: 1, train_loss: 0.5, val_loss: None, lr: 0.001 }];
        assert_eq!(history_csv(&h), "epoch,train_loss,val_loss,lr\n1,0.5,,0.001\n");
    }
}
