//! Classification metrics. Absent lung sliding is the positive class.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, with
/// ties counted as one half. Computed from average ranks.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based average ranks of the positives, kept doubled so it
    // stays an integer.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if positive[k] {
                twice_rank_sum += twice_avg;
            }
        }
        i = j + 1;
    }
    let twice_u = twice_rank_sum - (n_pos * (n_pos + 1)) as u64;
    Ok(twice_u as f64 / 2.0 / (n_pos * n_neg) as f64)
}

/// Threshold metrics and AUC for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dataset_id: String,
    pub n_samples: usize,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    /// `None` when there are no positives.
    pub sensitivity: Option<f64>,
    /// `None` when there are no negatives.
    pub specificity: Option<f64>,
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// A score at or above `threshold` is a positive prediction.
pub fn confusion_metrics(dataset_id: &str, scores: &[f64], positive: &[bool], threshold: f64) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::Data(format!("{dataset_id}: no samples to evaluate")));
    }
    if scores.len() != positive.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &p) in scores.iter().zip(positive) {
        match (s >= threshold, p) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { None } else { Some(a as f64 / (a + b) as f64) };
    let both = tp + fn_ > 0 && tn + fp > 0;
    Ok(MetricsReport {
        dataset_id: dataset_id.to_string(),
        n_samples: scores.len(),
        auc: if both { Some(auc(scores, positive)?) } else { None },
        sensitivity: ratio(tp, fn_),
        specificity: ratio(tn, fp),
        accuracy: (tp + tn) as f64 / scores.len() as f64,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Unweighted mean and population standard deviation across datasets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    /// Number of datasets where the metric was defined.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateReport {
    pub auc: Option<MeanStd>,
    pub sensitivity: Option<MeanStd>,
    pub specificity: Option<MeanStd>,
    pub accuracy: MeanStd,
}

fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd { mean, std: var.sqrt(), count: values.len() })
}

/// Mean and population std of each metric over the reports where it is
/// defined. The result does not depend on report order beyond float
/// summation order.
pub fn aggregate_external(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Data("no reports to aggregate".into()));
    }
    let pick = |f: fn(&MetricsReport) -> Option<f64>| -> Vec<f64> { reports.iter().filter_map(f).collect() };
    Ok(AggregateReport {
        auc: mean_std(&pick(|r| r.auc)),
        sensitivity: mean_std(&pick(|r| r.sensitivity)),
        specificity: mean_std(&pick(|r| r.specificity)),
        accuracy: mean_std(&pick(|r| Some(r.accuracy))).expect("non-empty"),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x:.6}"))
}

/// One row per report under a header.
pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("dataset,n,auc,sensitivity,specificity,accuracy,tp,fp,tn,fn\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{},{},{},{}",
            r.dataset_id,
            r.n_samples,
            opt(r.auc),
            opt(r.sensitivity),
            opt(r.specificity),
            r.accuracy,
            r.tp,
            r.fp,
            r.tn,
            r.fn_
        );
    }
    out
}

/// Human-readable summary, with an aggregate block when there is more than
/// one external dataset.
pub fn summary_text(reports: &[MetricsReport], external: Option<&AggregateReport>) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(
            out,
            "{}: n={} auc={} sens={} spec={} acc={:.4} (tp={} fp={} tn={} fn={})",
            r.dataset_id,
            r.n_samples,
            opt(r.auc),
            opt(r.sensitivity),
            opt(r.specificity),
            r.accuracy,
            r.tp,
            r.fp,
            r.tn,
            r.fn_
        );
    }
    if let Some(a) = external {
        let ms = |m: Option<MeanStd>| m.map_or_else(|| "nan".into(), |m| format!("{:.4} [{:.4}]", m.mean, m.std));
        let _ = writeln!(
            out,
            "external mean [std]: auc={} sens={} spec={} acc={}",
            ms(a.auc),
            ms(a.sensitivity),
            ms(a.specificity),
            ms(Some(a.accuracy))
        );
    }
    out
}
