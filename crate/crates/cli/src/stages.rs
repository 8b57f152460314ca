//! Experiment stages. Each reads the artifacts of earlier stages from the
//! output directory and writes its own next to them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mmode_ssl::config::{parse_pairs, render_pairs};
use mmode_ssl::formats::{
    read_manifest, read_store, read_video, write_manifest, write_pgm, write_store, write_video, Label,
    ManifestEntry, StoredMMode,
};
use mmode_ssl::gradcam::{composite, grad_cam, region_means};
use mmode_ssl::metrics::{aggregate_external, confusion_metrics, reports_csv, summary_text, MetricsReport};
use mmode_ssl::mmode::{extract_mmode, pretraining_count, rank_columns, resize_tensor, segment_video, MModeImage};
use mmode_ssl::model::{InitScheme, ModelParameters};
use mmode_ssl::pairs::{to_input, VideoMModes};
use mmode_ssl::synth::{generate, split, SynthConfig, SynthVideo, PLEURA_THICKNESS};
use mmode_ssl::train::{
    attach_head, evaluation_samples, history_csv, pretrain as run_pretrain, train_downstream, Checkpoint,
    EpochRecord, LabeledVideo, TrainMode, OVERSAMPLE_RANKS,
};
use mmode_ssl::{Error, Result, Tensor};

use crate::settings::RunConfig;

pub const RUN_CONFIG: &str = "run.cfg";
const SPLIT_FRACTIONS: (f64, f64, f64) = (0.7, 0.15, 0.15);

/// Paths under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        self.data().join(format!("{split}.tsv"))
    }

    pub fn truth(&self) -> PathBuf {
        self.data().join("truth.tsv")
    }

    pub fn store(&self, split: &str, kind: &str) -> PathBuf {
        self.root.join("mmodes").join(format!("{split}.{kind}.mms"))
    }

    pub fn pretrain_dir(&self, name: &str) -> PathBuf {
        self.root.join("pretrain").join(name)
    }

    pub fn downstream_dir(&self, name: &str) -> PathBuf {
        self.root.join("downstream").join(name)
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }

    /// Labelled and unlabelled splits that have manifests, in a fixed order.
    pub fn splits(&self) -> Vec<String> {
        let mut out: Vec<String> =
            ["train", "val", "test", "unlabeled"].iter().map(|s| s.to_string()).collect();
        out.extend(self.external_sets());
        out.retain(|s| self.manifest(s).exists());
        out
    }

    pub fn external_sets(&self) -> Vec<String> {
        (1..).map(|k| format!("external{k}")).take_while(|s| self.manifest(s).exists()).collect()
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!("{} not found; run `{hint}` first", path.display())))
    }
}

/// Keys that determine the generated data and extracted M-modes.
fn defines_data(key: &str) -> bool {
    key == "seed" || key.starts_with("synth.") || key.starts_with("extract.")
}

/// Refuses to build on artifacts made under different data settings, so a
/// run's config echo always describes the data it was trained on.
fn check_provenance(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join(RUN_CONFIG);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let recorded = parse_pairs(&text)?;
    let current = cfg.echo();
    for (k, v) in recorded.iter().filter(|(k, _)| defines_data(k)) {
        let now = current.iter().find(|(c, _)| c == k).map(|(_, v)| v.as_str());
        if now != Some(v.as_str()) {
            return Err(Error::Config(format!(
                "{} was produced with {k}={v}, but this run has {k}={}",
                dir.display(),
                now.unwrap_or("<unset>")
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

fn class_counts(n: usize) -> (usize, usize) {
    let absent = (n as f64 / 5.0).round() as usize;
    (n - absent, absent)
}

fn videos_entries(videos: &[SynthVideo], dir: &Path, labeled: bool) -> Vec<ManifestEntry> {
    videos
        .iter()
        .map(|v| ManifestEntry {
            path: dir.join(format!("{}.bmv", v.video.video_id())),
            video_id: v.video.video_id().to_string(),
            label: labeled.then_some(v.label),
        })
        .collect()
}

fn write_videos(videos: &[SynthVideo], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for v in videos {
        write_video(&dir.join(format!("{}.bmv", v.video.video_id())), &v.video)?;
    }
    Ok(())
}

/// Sizes of the generated splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub counts: Vec<(String, usize)>,
}

/// Labelled videos split by pseudo-patient into train/val/test, an
/// unlabelled pool, and externally shifted test sets.
pub fn synth(cfg: &RunConfig, layout: &Layout) -> Result<SynthSummary> {
    let data = layout.data();
    let videos_dir = data.join("videos");
    let mut counts = Vec::new();
    let mut truth = String::from("video_id\tpleural_row\theight\n");
    let mut record = |vs: &[SynthVideo]| {
        for v in vs {
            let _ = writeln!(truth, "{}\t{}\t{}", v.video.video_id(), v.pleural_row, v.video.height());
        }
    };

    let labeled_cfg = SynthConfig { seed: cfg.stage_seed("synth"), id_prefix: "syn".into(), ..cfg.synth.base.clone() };
    let labeled = generate(&labeled_cfg)?;
    write_videos(&labeled, &videos_dir)?;
    record(&labeled);
    let parts = split(&labeled, |v| &v.patient_id, |v| v.label, SPLIT_FRACTIONS, cfg.stage_seed("split"))?;
    for (name, part) in [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)] {
        write_manifest(&layout.manifest(name), &videos_entries(part, &videos_dir, true))?;
        counts.push((name.to_string(), part.len()));
    }

    if cfg.synth.n_unlabeled > 0 {
        let (n_present, n_absent) = class_counts(cfg.synth.n_unlabeled);
        let ucfg = SynthConfig {
            n_present,
            n_absent,
            seed: cfg.stage_seed("synth-unlabeled"),
            id_prefix: "unl".into(),
            ..cfg.synth.base.clone()
        };
        let vids = generate(&ucfg)?;
        write_videos(&vids, &videos_dir)?;
        record(&vids);
        write_manifest(&layout.manifest("unlabeled"), &videos_entries(&vids, &videos_dir, false))?;
        counts.push(("unlabeled".into(), vids.len()));
    }

    for k in 1..=cfg.synth.external_sets {
        let (n_present, n_absent) = class_counts(cfg.synth.external_videos);
        let ecfg = SynthConfig {
            n_present,
            n_absent,
            noise: cfg.synth.base.noise + k as f64 * cfg.synth.external_noise,
            offset: cfg.synth.base.offset + k as f64 * cfg.synth.external_offset,
            seed: cfg.stage_seed(&format!("synth-external{k}")),
            id_prefix: format!("ext{k}"),
            ..cfg.synth.base.clone()
        };
        let vids = generate(&ecfg)?;
        write_videos(&vids, &videos_dir)?;
        record(&vids);
        let name = format!("external{k}");
        write_manifest(&layout.manifest(&name), &videos_entries(&vids, &videos_dir, true))?;
        counts.push((name, vids.len()));
    }
    write_text(&layout.truth(), &truth)?;
    write_text(&data.join(RUN_CONFIG), &render_pairs(&cfg.echo()))?;
    Ok(SynthSummary { counts })
}

// ---------------------------------------------------------------------------
// extract

/// Per split, the brighter half of each segment's candidate M-modes
/// (`pretrain` store) and its four brightest (`ranked` store), all at native
/// resolution. Resizing happens when images are fed to a model.
pub fn extract(cfg: &RunConfig, layout: &Layout) -> Result<Vec<(String, usize)>> {
    let splits = layout.splits();
    if splits.is_empty() {
        return Err(Error::Data(format!("no manifests under {}; run `synth` first", layout.data().display())));
    }
    check_provenance(&layout.data(), cfg)?;
    fs::create_dir_all(layout.root.join("mmodes"))?;
    let mut out = Vec::new();
    for name in splits {
        let entries = read_manifest(&layout.manifest(&name))?;
        let (mut pre, mut ranked) = (Vec::new(), Vec::new());
        let mut segments = 0;
        for e in &entries {
            let video = read_video(&e.path, &e.video_id)?;
            for seg in segment_video(&video, cfg.segment_seconds)? {
                segments += 1;
                let order = rank_columns(&seg);
                let n_pre = pretraining_count(order.len());
                for (i, &(col, _)) in order.iter().enumerate().take(n_pre.max(OVERSAMPLE_RANKS)) {
                    let mut image = extract_mmode(&seg, col)?;
                    image.brightness_rank = i + 1;
                    let item = StoredMMode { image, label: e.label };
                    if i < OVERSAMPLE_RANKS {
                        ranked.push(item.clone());
                    }
                    if i < n_pre {
                        pre.push(item);
                    }
                }
            }
        }
        write_store(&layout.store(&name, "pretrain"), &pre)?;
        write_store(&layout.store(&name, "ranked"), &ranked)?;
        log(format!("extract {name}: {} videos, {segments} segments, {} pretraining M-modes", entries.len(), pre.len()));
        out.push((name, segments));
    }
    write_text(&layout.root.join("mmodes").join(RUN_CONFIG), &render_pairs(&cfg.echo()))?;
    Ok(out)
}

/// Groups stored M-modes by source segment, keeping first-seen order.
fn group(items: Vec<StoredMMode>) -> Vec<(String, Option<Label>, Vec<MModeImage>)> {
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut out: Vec<(String, Option<Label>, Vec<MModeImage>)> = Vec::new();
    for it in items {
        let id = it.image.source_video_id.clone();
        match index.get(&id) {
            Some(&i) => out[i].2.push(it.image),
            None => {
                index.insert(id.clone(), out.len());
                out.push((id, it.label, vec![it.image]));
            }
        }
    }
    out
}

fn labeled_videos(layout: &Layout, split: &str) -> Result<Vec<LabeledVideo>> {
    let path = layout.store(split, "ranked");
    require(&path, "extract")?;
    group(read_store(&path)?)
        .into_iter()
        .map(|(video_id, label, images)| {
            let label = label.ok_or_else(|| Error::Data(format!("{split}: {video_id} has no label")))?;
            Ok(LabeledVideo { video_id, label, images })
        })
        .collect()
}

fn pretraining_videos(layout: &Layout, splits: &[&str]) -> Result<Vec<VideoMModes>> {
    let mut out = Vec::new();
    for split in splits {
        let path = layout.store(split, "pretrain");
        require(&path, "extract")?;
        out.extend(
            group(read_store(&path)?)
                .into_iter()
                .map(|(video_id, _, images)| VideoMModes { video_id, images }),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// training stages

/// Config keys that cannot change a stage's output.
fn relevant(stage: &str, key: &str) -> bool {
    let ignored: &[&str] = match stage {
        "pretrain" => &["downstream.", "run.mode", "sweep.", "eval.", "saliency."],
        _ => &["sweep.", "eval.", "saliency."],
    };
    !ignored.iter().any(|p| key.starts_with(p))
}

/// True when `dir` holds a checkpoint produced from an equivalent config.
fn cached(dir: &Path, stage: &str, cfg: &RunConfig) -> bool {
    let Ok(text) = fs::read_to_string(dir.join(RUN_CONFIG)) else {
        return false;
    };
    let Ok(old) = parse_pairs(&text) else {
        return false;
    };
    let keep = |pairs: Vec<(String, String)>| -> Vec<(String, String)> {
        pairs.into_iter().filter(|(k, _)| relevant(stage, k)).collect()
    };
    keep(old) == keep(cfg.echo()) && Checkpoint::load(dir).is_ok()
}

fn save_run(dir: &Path, cfg: &RunConfig, checkpoint: &Checkpoint, history: &[EpochRecord]) -> Result<()> {
    checkpoint.save(dir)?;
    write_text(&dir.join("history.csv"), &history_csv(history))?;
    write_text(&dir.join(RUN_CONFIG), &render_pairs(&cfg.echo()))
}

fn progress(stage: String, epochs: usize) -> impl FnMut(&EpochRecord) {
    move |r: &EpochRecord| {
        let val = r.val_loss.map_or(String::new(), |v| format!(" val_loss={v:.5}"));
        log(format!("{stage} epoch {}/{epochs} loss={:.5}{val} lr={:.3e}", r.epoch, r.train_loss, r.lr));
    }
}

/// Self-supervised pretraining; returns the run directory. Reuses an
/// existing run with an equivalent config.
pub fn pretrain(cfg: &RunConfig, layout: &Layout, init: InitScheme) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    cfg.init = init;
    let tcfg = cfg.pretrain_config()?;
    let name = cfg.pretrain_name(init);
    let dir = layout.pretrain_dir(&name);
    if cached(&dir, "pretrain", &cfg) {
        log(format!("pretrain {name}: up to date"));
        return Ok(dir);
    }
    require(&layout.root.join("mmodes").join(RUN_CONFIG), "extract")?;
    check_provenance(&layout.root.join("mmodes"), &cfg)?;
    let data = pretraining_videos(layout, cfg.data.splits())?;
    log(format!("pretrain {name}: {} segments", data.len()));
    let params = cfg.model.initialize(cfg.stage_seed("init"), init)?;
    let outcome = run_pretrain(&cfg.model, params, &tcfg, &data, &mut progress(format!("pretrain {name}"), tcfg.epochs))?;
    save_run(&dir, &cfg, &outcome.checkpoint, &outcome.history)?;
    Ok(dir)
}

/// Starting parameters for a downstream run: a pretrained extractor, or a
/// fresh one when `run.method` is `none`. Either way the head is fresh.
fn downstream_init(cfg: &RunConfig, layout: &Layout) -> Result<ModelParameters> {
    let source = match cfg.method {
        Some(_) => {
            let dir = layout.pretrain_dir(&cfg.pretrain_name(cfg.init));
            require(&dir.join(RUN_CONFIG), "pretrain")?;
            let ck = Checkpoint::load(&dir)?;
            if ck.model != cfg.model {
                return Err(Error::Config(format!(
                    "{} was trained with a different model definition",
                    dir.display()
                )));
            }
            ck.params
        }
        None => cfg.model.initialize(cfg.stage_seed("init"), cfg.init)?,
    };
    attach_head(&cfg.model, &source, cfg.stage_seed("head"))
}

/// Linear probe or fine-tune at `fraction` of the labelled training videos;
/// returns the run directory.
pub fn downstream(cfg: &RunConfig, layout: &Layout, mode: TrainMode, fraction: f64) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    cfg.mode = mode;
    cfg.downstream.label_fraction = fraction;
    let tcfg = cfg.downstream_config(mode, fraction)?;
    let name = cfg.downstream_name(mode, cfg.init, fraction);
    let dir = layout.downstream_dir(&name);
    if cached(&dir, "downstream", &cfg) {
        log(format!("{name}: up to date"));
        return Ok(dir);
    }
    require(&layout.root.join("mmodes").join(RUN_CONFIG), "extract")?;
    check_provenance(&layout.root.join("mmodes"), &cfg)?;
    let init = downstream_init(&cfg, layout)?;
    let train = labeled_videos(layout, "train")?;
    let val = labeled_videos(layout, "val")?;
    let outcome = train_downstream(&cfg.model, init, &tcfg, &train, &val, &mut progress(name.clone(), tcfg.epochs))?;
    log(format!(
        "{name}: kept epoch {} (val_loss {:.5})",
        outcome.checkpoint.epoch,
        outcome.checkpoint.val_loss.unwrap_or(f64::NAN)
    ));
    save_run(&dir, &cfg, &outcome.checkpoint, &outcome.history)?;
    Ok(dir)
}

/// Directory of the downstream run selected by the config.
pub fn selected_run(cfg: &RunConfig, layout: &Layout) -> PathBuf {
    layout.downstream_dir(&cfg.downstream_name(cfg.mode, cfg.init, cfg.downstream.label_fraction))
}

// ---------------------------------------------------------------------------
// evaluate

fn stack_inputs(images: &[&MModeImage], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        data.extend(to_input(img, size)?);
    }
    Tensor::new(vec![images.len(), 1, size, size], data)
}

/// Scores of each video's brightest M-mode.
fn score(ck: &Checkpoint, videos: &[LabeledVideo], size: usize, chunk: usize) -> Result<(Vec<String>, Vec<f64>, Vec<bool>)> {
    let samples = evaluation_samples(videos);
    let x = stack_inputs(&samples.iter().map(|s| &s.image).collect::<Vec<_>>(), size)?;
    let scores = ck.model.predict(&ck.params, &x, chunk)?;
    let ids = samples.iter().map(|s| s.image.source_video_id.clone()).collect();
    let positive = samples.iter().map(|s| s.label == Label::Absent).collect();
    Ok((ids, scores, positive))
}

/// Test-set and external-set reports for the run in `dir`, written to
/// `dir/eval`.
pub fn evaluate(cfg: &RunConfig, layout: &Layout, dir: &Path) -> Result<Vec<MetricsReport>> {
    require(&dir.join(RUN_CONFIG), "probe` or `finetune")?;
    let ck = Checkpoint::load(dir)?;
    let size = cfg.downstream.image_size;
    let mut reports = Vec::new();
    let mut scores_csv = String::from("dataset,video_id,absent,score\n");
    let externals = layout.external_sets();
    for name in std::iter::once("test".to_string()).chain(externals.iter().cloned()) {
        let videos = labeled_videos(layout, &name)?;
        let (ids, scores, positive) = score(&ck, &videos, size, cfg.downstream.micro_batch)?;
        for ((id, s), p) in ids.iter().zip(&scores).zip(&positive) {
            let _ = writeln!(scores_csv, "{name},{id},{},{s}", u8::from(*p));
        }
        reports.push(confusion_metrics(&name, &scores, &positive, cfg.threshold)?);
    }
    let aggregate = if externals.len() > 1 { Some(aggregate_external(&reports[1..])?) } else { None };
    let eval = dir.join("eval");
    write_text(&eval.join("report.csv"), &reports_csv(&reports))?;
    write_text(&eval.join("summary.txt"), &summary_text(&reports, aggregate.as_ref()))?;
    write_text(&eval.join("scores.csv"), &scores_csv)?;
    Ok(reports)
}

// ---------------------------------------------------------------------------
// saliency

/// Pleural rows of generated videos, keyed by video id.
pub fn read_truth(layout: &Layout) -> Result<BTreeMap<String, (usize, usize)>> {
    let path = layout.truth();
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let [id, row, h] = f[..] else {
            return Err(Error::Data(format!("{}: bad line {line:?}", path.display())));
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("{}: bad number {s:?}", path.display())));
        out.insert(id.to_string(), (parse(row)?, parse(h)?));
    }
    Ok(out)
}

/// Row of a `size`-row input that the middle of the pleural band maps to.
pub fn scaled_pleural_row(row: usize, height: usize, size: usize) -> usize {
    let centre = row as f64 + (PLEURA_THICKNESS / 2) as f64;
    (centre * (size - 1) as f64 / (height - 1).max(1) as f64).round() as usize
}

/// One saliency result with its region statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyRecord {
    pub image_id: String,
    pub absent: bool,
    pub probability: f64,
    pub split_row: usize,
    pub above: f64,
    pub below: f64,
}

/// Grad-CAM on up to `count` test images (all if `count` is 0), absent
/// class first. Writes heat and composite PGMs and `regions.csv`.
pub fn saliency(cfg: &RunConfig, layout: &Layout, dir: &Path, count: usize) -> Result<Vec<SaliencyRecord>> {
    require(&dir.join(RUN_CONFIG), "probe` or `finetune")?;
    let ck = Checkpoint::load(dir)?;
    let truth = read_truth(layout)?;
    let size = cfg.downstream.image_size;
    let mut samples = evaluation_samples(&labeled_videos(layout, "test")?);
    samples.sort_by_key(|s| s.label != Label::Absent);
    if count > 0 {
        samples.truncate(count);
    }
    let out_dir = dir.join("saliency");
    fs::create_dir_all(&out_dir)?;
    let mut csv = String::from("image,absent,probability,split_row,above,below\n");
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let id = &s.image.source_video_id;
        let video = id.split('#').next().unwrap_or(id);
        let &(row, height) =
            truth.get(video).ok_or_else(|| Error::Data(format!("no pleural row recorded for {video}")))?;
        let input = Tensor::new(vec![1, 1, size, size], to_input(&s.image, size)?)?;
        let map = grad_cam(&ck.model, &ck.params, &input, id)?;
        let split_row = scaled_pleural_row(row, height, size);
        let (above, below) = region_means(&map.heat, split_row);
        let stem = id.replace(['#', '/'], "_");
        write_pgm(&out_dir.join(format!("{stem}.heat.pgm")), &map.heat, 1.0)?;
        let original = resize_tensor(&s.image.pixels, size, size)?;
        write_pgm(&out_dir.join(format!("{stem}.composite.pgm")), &composite(&original, &map.heat)?, 255.0)?;
        let absent = s.label == Label::Absent;
        let _ = writeln!(csv, "{id},{},{},{split_row},{above},{below}", u8::from(absent), map.probability);
        records.push(SaliencyRecord { image_id: id.clone(), absent, probability: map.probability, split_row, above, below });
    }
    write_text(&out_dir.join("regions.csv"), &csv)?;
    Ok(records)
}

// ---------------------------------------------------------------------------
// sweep

/// One downstream run of the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub init: InitScheme,
    /// `pretrained` or `supervised`.
    pub source: &'static str,
    pub fraction: f64,
    pub report: MetricsReport,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".into(), |x| format!("{x:.6}"));
    let mut out = String::from("init,source,fraction,auc,sensitivity,specificity,accuracy\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6}",
            r.init,
            r.source,
            r.fraction,
            opt(r.report.auc),
            opt(r.report.sensitivity),
            opt(r.report.specificity),
            r.report.accuracy
        );
    }
    out
}

/// Runs synth and extract when their outputs are missing.
pub fn ensure_data(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    if !layout.manifest("train").exists() {
        synth(cfg, layout)?;
    }
    if !layout.root.join("mmodes").join(RUN_CONFIG).exists() {
        extract(cfg, layout)?;
    }
    Ok(())
}

/// For every init scheme and label fraction: a downstream run from the
/// pretrained encoder (unless `run.method` is `none`) and from scratch,
/// each evaluated on the test split.
pub fn sweep(cfg: &RunConfig, layout: &Layout) -> Result<Vec<SweepRow>> {
    ensure_data(cfg, layout)?;
    let mut rows = Vec::new();
    for &init in &cfg.sweep_inits {
        let mut base = cfg.clone();
        base.init = init;
        let mut sources = vec![("supervised", None)];
        if let Some(m) = cfg.method {
            pretrain(&base, layout, init)?;
            sources.insert(0, ("pretrained", Some(m)));
        }
        for (source, method) in sources {
            let mut run = base.clone();
            run.method = method;
            for &fraction in &cfg.label_fractions {
                let dir = downstream(&run, layout, cfg.mode, fraction)?;
                let report = evaluate(&run, layout, &dir)?.remove(0);
                log(format!("sweep {init} {source} f={fraction}: auc={:?}", report.auc));
                rows.push(SweepRow { init, source, fraction, report });
            }
        }
    }
    write_text(&layout.sweep_dir().join("summary.csv"), &sweep_csv(&rows))?;
    write_text(&layout.sweep_dir().join(RUN_CONFIG), &render_pairs(&cfg.echo()))?;
    Ok(rows)
}
