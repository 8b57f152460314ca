//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Every criterion is always
//! evaluated and reported. The exit status is non-zero on a FAIL only when
//! `ACCEPTANCE_STRICT=1`, so the report can sit in the regular test run.
//! Criteria 6, 9 and 10 share one desk-scale experiment driven through the
//! `mmssl` binary with `configs/desk.cfg`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::{check, full_graph_check, rng, uniform};
use mmode_ssl::augment::{AugmentationConfig, BranchRole, PipelineKind, SampleKey, Step};
use mmode_ssl::formats::Label;
use mmode_ssl::metrics::auc;
use mmode_ssl::mmode::{extract_mmode, rank_columns, BModeVideo, MModeImage};
use mmode_ssl::model::{group_of, InitScheme, Model, ModelParameters, ParamGroup, ProjectorSpec};
use mmode_ssl::ssl::{self, EmbeddingBatch, SslLossConfig, SslMethod, VicRegParams};
use mmode_ssl::train::{train_downstream, LabeledVideo, TrainConfig, TrainMode};
use mmode_ssl::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const FD_TOL: f64 = 1e-4;
const FD_INSTANCES: u64 = 20;
const INVARIANT_TRIALS: usize = 100;
const EXTRACTION_VIDEOS: usize = 200;
const AUG_DRAWS: usize = 10_000;
const Z99: f64 = 2.5758;
const AUC_SETS: usize = 500;
const E2E_MIN_AUC: f64 = 0.90;
const E2E_MIN_GAP: f64 = 0.05;
const UNLABELED_SLACK: f64 = 0.02;
const SALIENCY_MIN_SHARE: f64 = 0.80;
const SWEEP_SLACK: f64 = 0.03;
const THRESHOLD: f64 = 0.5;

const ROOT: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../..");
const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/tiny.cfg");

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, name: &str, pass: bool, detail: String, started: Instant) {
        if !pass {
            self.failures += 1;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id:<3} {verdict}  {name}: {detail} ({:.1} s)", started.elapsed().as_secs_f64());
    }
}

// ---------------------------------------------------------------------------
// 1. gradients

fn criterion_1(r: &mut Report) {
    let t = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut checked = 0;
    for method in [SslMethod::SimClr, SslMethod::BarlowTwins, SslMethod::VicReg] {
        let cfg = SslLossConfig::new(method);
        let mut max: f64 = 0.0;
        for seed in 0..FD_INSTANCES {
            let mut g = rng(1000 + seed);
            let (n, d) = (g.gen_range(2..=8), g.gen_range(1..=8));
            let x = uniform(&mut g, &[2 * n, d]);
            let rep = check(&[x], None, |tape, ids| ssl::record_on_tape(tape, ids[0], &cfg));
            max = max.max(rep.max_rel_err);
            checked += rep.checked;
        }
        worst.push((method.to_string(), max));
    }
    let mut max: f64 = 0.0;
    for seed in 0..FD_INSTANCES {
        let rep = full_graph_check(seed);
        max = max.max(rep.max_rel_err);
        checked += rep.checked;
    }
    worst.push(("encoder+projector".into(), max));
    let pass = worst.iter().all(|(_, e)| *e < FD_TOL);
    let detail = worst.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect::<Vec<_>>().join(", ");
    r.line("1", "gradient correctness", pass, format!("max rel err {detail} < {FD_TOL:.0e}; {checked} coordinates"), t);
}

// ---------------------------------------------------------------------------
// 2. loss invariants

fn random_batch(g: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let (n, d) = (g.gen_range(2..=8), g.gen_range(1..=8));
    let a = Tensor::from_fn(&[n, d], |_| g.gen_range(-3.0..3.0)).unwrap();
    let b = Tensor::from_fn(&[n, d], |_| g.gen_range(-3.0..3.0)).unwrap();
    (a, b)
}

fn eb(a: &Tensor, b: &Tensor) -> EmbeddingBatch {
    EmbeddingBatch::new(a.clone(), b.clone()).unwrap()
}

fn grid(n: usize, d: usize, mut f: impl FnMut(usize, usize) -> f64) -> Tensor {
    Tensor::from_fn(&[n, d], |k| f(k / d, k % d)).unwrap()
}

/// Squared distance of the standardised cross-correlation from I.
fn distance_from_identity(a: &Tensor, b: &Tensor, eps: f64) -> f64 {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let standardise = |t: &Tensor, j: usize| -> Vec<f64> {
        let col: Vec<f64> = (0..n).map(|i| t.at(&[i, j])).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        col.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
    };
    let mut dist = 0.0;
    for i in 0..d {
        let x = standardise(a, i);
        for j in 0..d {
            let y = standardise(b, j);
            let c = x.iter().zip(&y).map(|(p, q)| p * q).sum::<f64>() / n as f64;
            dist += if i == j { (1.0 - c).powi(2) } else { c * c };
        }
    }
    dist
}

fn criterion_2(r: &mut Report) {
    let t = Instant::now();
    let mut g = rng(2);
    let bt = SslLossConfig::new(SslMethod::BarlowTwins);
    let tau = SslLossConfig::new(SslMethod::SimClr).temperature;
    let vp = VicRegParams::from(&SslLossConfig::new(SslMethod::VicReg));
    let mut bad = BTreeMap::<&str, usize>::new();
    let mut note = |k: &'static str, ok: bool| *bad.entry(k).or_default() += usize::from(!ok);

    for trial in 0..INVARIANT_TRIALS {
        // Barlow Twins: alternate random views with whitened identical ones
        // so both sides of the equivalence are exercised.
        let (a, b) = if trial % 2 == 0 {
            random_batch(&mut g)
        } else {
            let n = 1usize << g.gen_range(2..=3);
            let d = g.gen_range(1..n);
            let z = grid(n, d, |i, j| if (i & (j + 1)).count_ones() % 2 == 0 { 100.0 } else { -100.0 });
            (z.clone(), z)
        };
        let loss = ssl::barlow_twins_loss(&eb(&a, &b), bt.bt_lambda, bt.eps_var).unwrap().value;
        let dist = distance_from_identity(&a, &b, bt.eps_var);
        note("barlow", loss >= 0.0 && (loss < 1e-9) == (dist < 1e-9) && (trial % 2 == 0 || loss < 1e-9));

        // SimCLR: positive per-row rescaling and a joint row permutation.
        let (a, b) = random_batch(&mut g);
        let (n, d) = (a.shape()[0], a.shape()[1]);
        let base = ssl::simclr_loss(&eb(&a, &b), tau, 1e-12).unwrap().value;
        let scales: Vec<f64> = (0..2 * n).map(|_| g.gen_range(0.1..10.0)).collect();
        let sa = grid(n, d, |i, j| a.at(&[i, j]) * scales[i]);
        let sb = grid(n, d, |i, j| b.at(&[i, j]) * scales[n + i]);
        let scaled = ssl::simclr_loss(&eb(&sa, &sb), tau, 1e-12).unwrap().value;
        note("simclr-scale", (base - scaled).abs() <= 1e-9 * base.max(1.0));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut g);
        let pa = grid(n, d, |i, j| a.at(&[perm[i], j]));
        let pb = grid(n, d, |i, j| b.at(&[perm[i], j]));
        let permuted = ssl::simclr_loss(&eb(&pa, &pb), tau, 1e-12).unwrap().value;
        note("simclr-perm", (base - permuted).abs() <= 1e-9 * base.max(1.0));

        // VICReg: centre each column and rescale it to std 1.5 γ.
        let (a, b) = random_batch(&mut g);
        let stretch = |t: &Tensor| {
            let (n, d) = (t.shape()[0], t.shape()[1]);
            let mut cols = Vec::new();
            for j in 0..d {
                let col: Vec<f64> = (0..n).map(|i| t.at(&[i, j])).collect();
                let mean = col.iter().sum::<f64>() / n as f64;
                let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
                cols.push(if std > 1e-6 {
                    col.iter().map(|v| (v - mean) * 1.5 * vp.gamma / std).collect()
                } else {
                    (0..n).map(|i| if i % 2 == 0 { 2.0 * vp.gamma } else { -2.0 * vp.gamma }).collect::<Vec<f64>>()
                });
            }
            grid(n, d, |i, j| cols[j][i])
        };
        let (lg, terms) = ssl::vicreg_loss(&eb(&stretch(&a), &stretch(&b)), &vp).unwrap();
        note("vicreg-variance", terms.variance == 0.0 && lg.value >= 0.0);

        let (a, b) = random_batch(&mut g);
        for m in [SslMethod::SimClr, SslMethod::BarlowTwins, SslMethod::VicReg] {
            note("non-negative", SslLossConfig::new(m).evaluate(&eb(&a, &b)).unwrap().value >= 0.0);
        }
    }
    let pass = bad.values().all(|&v| v == 0);
    let detail = bad.iter().map(|(k, v)| format!("{k} {v} bad")).collect::<Vec<_>>().join(", ");
    r.line("2", "loss invariants", pass, format!("{INVARIANT_TRIALS} trials each: {detail}"), t);
}

// ---------------------------------------------------------------------------
// 3. extraction

fn oracle_ranking(v: &BModeVideo) -> Vec<(usize, f64)> {
    let mut left: Vec<(usize, f64)> = v
        .candidate_columns()
        .map(|c| {
            let mut total = 0.0;
            for t in 0..v.num_frames() {
                for row in 0..v.height() {
                    total += v.frames().at(&[t, row, c]);
                }
            }
            (c, total)
        })
        .collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let ((c, s), (bc, bs)) = (left[i], left[best]);
            if s > bs || (s == bs && c < bc) {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn criterion_3(r: &mut Report) {
    let t = Instant::now();
    let mut g = rng(3);
    let mut bad = 0;
    for _ in 0..EXTRACTION_VIDEOS {
        let (frames, h, w) = (g.gen_range(1..=10), g.gen_range(1..=16), g.gen_range(1..=16));
        let max = [1u32, 3, 20, 255][g.gen_range(0..4)];
        let px = Tensor::from_fn(&[frames, h, w], |_| f64::from(g.gen_range(0..=max))).unwrap();
        let (a, b) = (g.gen_range(0..w), g.gen_range(0..w));
        let v = BModeVideo::new(px, 10.0, (a.min(b), a.max(b)), "v").unwrap();
        let mut ok = rank_columns(&v) == oracle_ranking(&v);
        for c in v.candidate_columns() {
            let m = extract_mmode(&v, c).unwrap();
            ok &= m.pixels.shape() == [h, frames] && m.column_index == c;
            for row in 0..h {
                for f in 0..frames {
                    ok &= m.pixels.at(&[row, f]) == v.frames().at(&[f, row, c]);
                }
            }
        }
        bad += usize::from(!ok);
    }
    r.line("3", "extraction oracle", bad == 0, format!("{bad} of {EXTRACTION_VIDEOS} videos disagree"), t);
}

// ---------------------------------------------------------------------------
// 4. augmentation

fn inside_ci(hits: usize, n: usize, p: f64) -> bool {
    let rate = hits as f64 / n as f64;
    if p == 0.0 || p == 1.0 {
        return rate == p;
    }
    (rate - p).abs() <= Z99 * (p * (1.0 - p) / n as f64).sqrt()
}

struct Draws {
    hits: BTreeMap<String, usize>,
    crop_tops: Vec<usize>,
    both_colour: usize,
    contrast_first: usize,
}

fn draw(cfg: &AugmentationConfig, img: &MModeImage, role: BranchRole) -> Draws {
    let mut d = Draws { hits: BTreeMap::new(), crop_tops: Vec::new(), both_colour: 0, contrast_first: 0 };
    for i in 0..AUG_DRAWS {
        let out = cfg.apply(img, SampleKey::new(cfg.seed, i as u64), role).unwrap();
        for s in &out.applied {
            *d.hits.entry(format!("{s:?}")).or_default() += 1;
        }
        if out.applied(Step::Crop) {
            d.crop_tops.extend(out.crop_top);
        }
        let pos = |s: Step| out.applied.iter().position(|&x| x == s);
        if let (Some(b), Some(c)) = (pos(Step::Brightness), pos(Step::Contrast)) {
            d.both_colour += 1;
            d.contrast_first += usize::from(c < b);
        }
    }
    d
}

fn rates_ok(d: &Draws, expected: &[(Step, f64)], misses: &mut Vec<String>, tag: &str) {
    for &(step, p) in expected {
        let hits = d.hits.get(&format!("{step:?}")).copied().unwrap_or(0);
        if !inside_ci(hits, AUG_DRAWS, p) {
            misses.push(format!("{tag} {step:?} {hits}/{AUG_DRAWS} vs {p}"));
        }
    }
}

fn criterion_4(r: &mut Report) {
    let t = Instant::now();
    let img = MModeImage::new(Tensor::from_fn(&[32, 32], |i| ((i * 37) % 251) as f64).unwrap(), "v", 0, 1).unwrap();
    let mut misses = Vec::new();

    let cfg = AugmentationConfig::new(PipelineKind::MMode, 11);
    let p = &cfg.mmode;
    let d = draw(&cfg, &img, BranchRole::First);
    rates_ok(
        &d,
        &[
            (Step::Crop, p.crop_p),
            (Step::Flip, p.flip_p),
            (Step::Blur, p.blur_p),
            (Step::Noise, p.noise_p),
            (Step::Speckle, p.speckle_p),
            (Step::Brightness, p.brightness_p),
            (Step::Contrast, p.contrast_p),
            (Step::Jitter, 0.0),
            (Step::Solarize, 0.0),
        ],
        &mut misses,
        "mmode",
    );
    if !inside_ci(d.contrast_first, d.both_colour, p.swap_p) {
        misses.push("mmode order swap".into());
    }
    let upper = d.crop_tops.iter().filter(|&&top| top <= img.height() / 2).count();
    let mmode_upper = format!("{upper}/{} mmode crops in upper half", d.crop_tops.len());
    if upper != d.crop_tops.len() || d.crop_tops.is_empty() {
        misses.push(mmode_upper.clone());
    }

    let cfg = AugmentationConfig::new(PipelineKind::Byol, 12);
    let p = &cfg.byol;
    let mut below = 0;
    for (role, blur, sol) in [
        (BranchRole::First, p.blur_p_first, p.solarize_p_first),
        (BranchRole::Second, p.blur_p_second, p.solarize_p_second),
    ] {
        let d = draw(&cfg, &img, role);
        rates_ok(
            &d,
            &[
                (Step::Crop, 1.0),
                (Step::Flip, p.flip_p),
                (Step::Jitter, p.jitter_p),
                (Step::Blur, blur),
                (Step::Solarize, sol),
                (Step::Noise, 0.0),
                (Step::Speckle, 0.0),
            ],
            &mut misses,
            &format!("byol {role:?}"),
        );
        below += d.crop_tops.iter().filter(|&&top| top > img.height() / 2).count();
    }
    if below == 0 {
        misses.push("byol never cropped below half".into());
    }

    let cfg = AugmentationConfig::new(PipelineKind::Downstream, 13);
    let d = draw(&cfg, &img, BranchRole::First);
    rates_ok(
        &d,
        &[
            (Step::Contrast, 1.0),
            (Step::Brightness, 1.0),
            (Step::Noise, 1.0),
            (Step::Flip, cfg.downstream.flip_p),
            (Step::Crop, 0.0),
            (Step::Blur, 0.0),
        ],
        &mut misses,
        "downstream",
    );

    let detail = if misses.is_empty() {
        format!("all rates inside 99% CI over {AUG_DRAWS} draws; {mmode_upper}; {below} byol crops below half")
    } else {
        misses.join("; ")
    };
    r.line("4", "augmentation statistics", misses.is_empty(), detail, t);
}

// ---------------------------------------------------------------------------
// 5. AUC

fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut half_units, mut pairs) = (0u64, 0u64);
    for (i, &p) in positive.iter().enumerate() {
        for (j, &q) in positive.iter().enumerate() {
            if p && !q {
                pairs += 1;
                half_units += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    half_units as f64 / 2.0 / pairs as f64
}

fn criterion_5(r: &mut Report) {
    let t = Instant::now();
    let mut g = rng(5);
    let (mut bad, mut tied) = (0, 0);
    for _ in 0..AUC_SETS {
        let n = g.gen_range(2..=200);
        let levels = g.gen_range(1..=50u32);
        let scores: Vec<f64> = (0..n).map(|_| g.gen_range(0..=levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| g.gen()).collect();
        labels[0] = true;
        labels[1] = false;
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        tied += usize::from(sorted.windows(2).any(|w| w[0] == w[1]));
        bad += usize::from(auc(&scores, &labels).unwrap() != pairwise_auc(&scores, &labels));
    }
    r.line("5", "AUC oracle", bad == 0, format!("{bad} of {AUC_SETS} sets differ ({tied} with ties)"), t);
}

// ---------------------------------------------------------------------------
// 7. freezing

fn criterion_7(r: &mut Report) {
    let t = Instant::now();
    let model = Model::new("3:3:1,4:3:1".parse().unwrap(), ProjectorSpec { layers: 2, width: 4 }).unwrap();
    let mut g = rng(7);
    let mut videos = |n: usize| -> Vec<LabeledVideo> {
        (0..n)
            .map(|i| {
                let label = if i % 3 == 0 { Label::Absent } else { Label::Present };
                let images = (0..4)
                    .map(|k| {
                        let px = Tensor::from_fn(&[8, 8], |_| g.gen_range(0.0..255.0)).unwrap();
                        MModeImage::new(px, format!("v{i}"), k, k + 1).unwrap()
                    })
                    .collect();
                LabeledVideo { video_id: format!("v{i}"), label, images }
            })
            .collect()
    };
    let (train, val) = (videos(12), videos(6));
    let mut wrong = Vec::new();
    for (mode, frozen) in [
        (TrainMode::Linear, (|g| matches!(g, ParamGroup::Block(_) | ParamGroup::Projector)) as fn(ParamGroup) -> bool),
        (TrainMode::Finetune, |g| matches!(g, ParamGroup::Block(1) | ParamGroup::Projector)),
    ] {
        let init = model.initialize(3, InitScheme::Random).unwrap();
        let mut cfg = TrainConfig::downstream(mode);
        (cfg.epochs, cfg.batch_size, cfg.image_size, cfg.lr0) = (2, 8, 8, 1e-2);
        let out = train_downstream(&model, init.clone(), &cfg, &train, &val, &mut |_| {}).unwrap();
        let same = |p: &ModelParameters, n: &str| p.require(n).unwrap().data() == init.require(n).unwrap().data();
        for (name, _) in init.iter() {
            let expect = frozen(group_of(name).unwrap());
            if same(&out.final_params, name) != expect {
                wrong.push(format!("{mode:?} {name}"));
            }
        }
    }
    let detail = if wrong.is_empty() { "frozen sets bit-identical, the rest moved".to_string() } else { wrong.join(", ") };
    r.line("7", "freezing contracts", wrong.is_empty(), detail, t);
}

// ---------------------------------------------------------------------------
// CLI helpers

fn mmssl(out: &Path, args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_mmssl"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr).lines().last().unwrap_or("")))
    }
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// 8. determinism

fn criterion_8(r: &mut Report) {
    let t = Instant::now();
    let run = |out: &Path| -> Result<(), String> {
        for cmd in [
            &["synth"][..],
            &["extract"],
            &["pretrain"],
            &["probe"],
            &["finetune"],
            &["evaluate"],
            &["saliency"],
        ] {
            let mut args = cmd.to_vec();
            args.extend(["--config", TINY, "--seed", "11", "--method", "vicreg"]);
            mmssl(out, &args)?;
        }
        Ok(())
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let outcome = run(a.path()).and_then(|_| run(b.path())).map(|_| {
        let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
        let differing: Vec<String> = sa
            .keys()
            .chain(sb.keys())
            .filter(|k| sa.get(*k) != sb.get(*k))
            .map(|k| k.display().to_string())
            .collect();
        (sa.len(), differing)
    });
    match outcome {
        Ok((n, differing)) => {
            let detail = if differing.is_empty() {
                format!("{n} files byte-identical across two runs")
            } else {
                format!("differ: {}", differing.join(", "))
            };
            r.line("8", "CLI determinism", differing.is_empty(), detail, t);
        }
        Err(e) => r.line("8", "CLI determinism", false, e, t),
    }
}

// ---------------------------------------------------------------------------
// 6, 9, 10. desk experiment

fn test_auc(report: &Path) -> Result<f64, String> {
    let text = fs::read_to_string(report).map_err(|e| format!("{}: {e}", report.display()))?;
    let row = text.lines().find(|l| l.starts_with("test,")).ok_or("no test row")?;
    row.split(',').nth(2).and_then(|v| v.parse().ok()).ok_or_else(|| "bad auc".into())
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).map(|t| t.lines().count()).unwrap_or(0)
}

struct Sweep {
    rows: Vec<(String, f64, f64)>,
}

impl Sweep {
    fn series(&self, source: &str) -> Vec<(f64, f64)> {
        self.rows.iter().filter(|(s, _, _)| s == source).map(|&(_, f, a)| (f, a)).collect()
    }

    fn auc(&self, source: &str, fraction: f64) -> Option<f64> {
        self.series(source).into_iter().find(|(f, _)| *f == fraction).map(|(_, a)| a)
    }
}

fn desk_experiment(r: &mut Report) {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = format!("{ROOT}/configs/desk.cfg");
    let with = |args: &[&str]| -> Result<String, String> {
        let mut v = args.to_vec();
        v.extend(["--config", &cfg]);
        mmssl(out, &v)
    };

    let sweep = with(&["sweep", "--label-fractions", "0.1,0.25,0.5,1.0"]).map(|csv| Sweep {
        rows: csv
            .lines()
            .skip(1)
            .filter_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0] == "random").then(|| (f[1].to_string(), f[2].parse().unwrap(), f[3].parse().unwrap()))
            })
            .collect(),
    });
    let sweep = match sweep {
        Ok(s) => s,
        Err(e) => {
            for (id, name) in [("6", "end-to-end synthetic"), ("9", "Grad-CAM sanity"), ("10", "label-efficiency sweep")] {
                r.line(id, name, false, e.clone(), t);
            }
            return;
        }
    };
    let labeled: usize = ["train", "val", "test"].iter().map(|s| line_count(&out.join(format!("data/{s}.tsv")))).sum();
    let unlabeled = line_count(&out.join("data/unlabeled.tsv"));

    // 6: pretrained vs supervised at full labels, then train+unlabeled.
    let six = || -> Result<(bool, String), String> {
        let pre = sweep.auc("pretrained", 1.0).ok_or("missing pretrained row")?;
        let sup = sweep.auc("supervised", 1.0).ok_or("missing supervised row")?;
        for cmd in ["pretrain", "finetune", "evaluate"] {
            with(&[cmd, "--data", "train+unlabeled"])?;
        }
        let unl = test_auc(&out.join("downstream/finetune-barlow_twins-random-mmode-train+unlabeled/eval/report.csv"))?;
        let (a, b, c) = (pre >= E2E_MIN_AUC, pre - sup >= E2E_MIN_GAP, unl >= pre - UNLABELED_SLACK);
        let mark = |ok: bool| if ok { "ok" } else { "FAILED" };
        Ok((
            a && b && c,
            format!(
                "{labeled} labelled + {unlabeled} unlabelled videos; (a) pretrained AUC {pre:.4} >= {E2E_MIN_AUC} {}; \
                 (b) supervised {sup:.4}, gap {:.4} >= {E2E_MIN_GAP} {}; (c) train+unlabeled {unl:.4} >= {:.4} {}",
                mark(a),
                pre - sup,
                mark(b),
                pre - UNLABELED_SLACK,
                mark(c)
            ),
        ))
    };
    match six() {
        Ok((pass, detail)) => r.line("6", "end-to-end synthetic", pass, detail, t),
        Err(e) => r.line("6", "end-to-end synthetic", false, e, t),
    }

    // 9: saliency on the full-label pretrained run, every test image.
    let t9 = Instant::now();
    let nine = || -> Result<(bool, String), String> {
        with(&["saliency", "--count", "0"])?;
        let csv = out.join("downstream/finetune-barlow_twins-random-mmode-train/saliency/regions.csv");
        let text = fs::read_to_string(&csv).map_err(|e| e.to_string())?;
        let (mut hits, mut total) = (0, 0);
        for l in text.lines().skip(1) {
            let f: Vec<&str> = l.split(',').collect();
            let (absent, p): (bool, f64) = (f[1] == "1", f[2].parse().unwrap());
            let (above, below): (f64, f64) = (f[4].parse().unwrap(), f[5].parse().unwrap());
            if absent && p >= THRESHOLD {
                total += 1;
                hits += usize::from(below > above);
            }
        }
        let share = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
        Ok((
            total > 0 && share >= SALIENCY_MIN_SHARE,
            format!("below > above in {hits} of {total} correctly classified absent images ({:.0}% >= {:.0}%)", share * 100.0, SALIENCY_MIN_SHARE * 100.0),
        ))
    };
    match nine() {
        Ok((pass, detail)) => r.line("9", "Grad-CAM sanity", pass, detail, t9),
        Err(e) => r.line("9", "Grad-CAM sanity", false, e, t9),
    }

    // 10: sweep shape.
    let t10 = Instant::now();
    let mut notes = Vec::new();
    let mut pass = true;
    for source in ["pretrained", "supervised"] {
        let s = sweep.series(source);
        let worst_drop = s.windows(2).map(|w| w[0].1 - w[1].1).fold(f64::NEG_INFINITY, f64::max);
        pass &= s.len() == 4 && worst_drop <= SWEEP_SLACK;
        let aucs = s.iter().map(|(_, a)| format!("{a:.3}")).collect::<Vec<_>>().join("/");
        notes.push(format!("{source} {aucs} (largest drop {worst_drop:.3} <= {SWEEP_SLACK})"));
    }
    let gap = |f: f64| sweep.auc("pretrained", f).zip(sweep.auc("supervised", f)).map(|(p, s)| p - s);
    match (gap(0.1), gap(1.0)) {
        (Some(low), Some(full)) => {
            pass &= low >= full;
            notes.push(format!("gap at 0.1 {low:.3} >= gap at 1.0 {full:.3}: {}", if low >= full { "ok" } else { "FAILED" }));
        }
        _ => {
            pass = false;
            notes.push("missing fraction rows".into());
        }
    }
    r.line("10", "label-efficiency sweep", pass, notes.join("; "), t10);
}

fn main() {
    let started = Instant::now();
    let mut r = Report { failures: 0 };
    criterion_1(&mut r);
    criterion_2(&mut r);
    criterion_3(&mut r);
    criterion_4(&mut r);
    criterion_5(&mut r);
    criterion_7(&mut r);
    criterion_8(&mut r);
    desk_experiment(&mut r);
    println!("{} criteria failed; total {:.0} s", r.failures, started.elapsed().as_secs_f64());
    if r.failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
