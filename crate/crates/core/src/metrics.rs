//! Fairness and accuracy measurements: treatment effects, counterfactual
//! absolute error, statistical parity, AUC, Kendall's tau-b, Pareto fronts,
//! average ranks and difference-to-reference summaries.

use serde::{Deserialize, Serialize};

use crate::dataset::has_both_classes;
use crate::error::{ensure_len, ForgeError, Result};
use crate::stats;

/// Per-row predicted probabilities for one world, with the protected column
/// each row was predicted under and optional ground-truth labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub probs: Vec<f64>,
    pub labels: Option<Vec<u8>>,
    pub a: Vec<u8>,
}

impl PredictionSet {
    pub fn new(probs: Vec<f64>, labels: Option<Vec<u8>>, a: Vec<u8>) -> Result<Self> {
        check_probs(&probs)?;
        ensure_len(probs.len(), a.len())?;
        if let Some(l) = &labels {
            ensure_len(probs.len(), l.len())?;
        }
        Ok(PredictionSet { probs, labels, a })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn check_probs(p: &[f64]) -> Result<()> {
    match p.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
        Some(v) => Err(ForgeError::OutOfRange(format!("probability {v}"))),
        None => Ok(()),
    }
}

fn check_pair(obs: &[f64], cf: &[f64]) -> Result<()> {
    ensure_len(obs.len(), cf.len())?;
    if obs.is_empty() {
        return Err(ForgeError::Empty("prediction vectors".into()));
    }
    check_probs(obs)?;
    check_probs(cf)
}

/// Average treatment effect of predictions, oriented as
/// `(prediction under A→1) − (prediction under A→0)` per row.
///
/// `probs_obs[i]` was produced under the row's actual `a_obs[i]`,
/// `probs_cf[i]` under the flipped value.
pub fn ate(probs_obs: &[f64], probs_cf: &[f64], a_obs: &[u8]) -> Result<f64> {
    check_pair(probs_obs, probs_cf)?;
    ensure_len(probs_obs.len(), a_obs.len())?;
    let s: f64 = probs_obs
        .iter()
        .zip(probs_cf)
        .zip(a_obs)
        .map(|((&o, &c), &a)| if a == 1 { o - c } else { c - o })
        .sum();
    Ok(s / probs_obs.len() as f64)
}

/// Mean of `p − q` without orientation.
pub fn ate_raw(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(p.iter().zip(q).map(|(a, b)| a - b).sum::<f64>() / p.len() as f64)
}

pub fn absolute_error(probs_obs: &[f64], probs_cf: &[f64]) -> Result<Vec<f64>> {
    check_pair(probs_obs, probs_cf)?;
    Ok(probs_obs.iter().zip(probs_cf).map(|(o, c)| (o - c).abs()).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DspMode {
    /// Threshold at 0.5 before taking group rates.
    #[default]
    Hard,
    /// Use the probabilities directly.
    Probability,
}

/// `|P(ŷ=1 | A=1) − P(ŷ=1 | A=0)|`.
pub fn dsp(preds: &[f64], a: &[u8], mode: DspMode) -> Result<f64> {
    ensure_len(preds.len(), a.len())?;
    check_probs(preds)?;
    if !has_both_classes(a) {
        return Err(ForgeError::SingleClass("protected attribute".into()));
    }
    let counts = group_sums(preds, a, mode);
    Ok(dsp_from_counts(counts))
}

/// Per-group `(sum of ŷ, count)` for `A=0` and `A=1`; the sufficient
/// statistics DSP pools over.
pub fn group_sums(preds: &[f64], a: &[u8], mode: DspMode) -> [(f64, usize); 2] {
    let mut out = [(0.0, 0usize); 2];
    for (&p, &g) in preds.iter().zip(a) {
        let v = match mode {
            DspMode::Hard => f64::from(u8::from(p >= 0.5)),
            DspMode::Probability => p,
        };
        out[g as usize].0 += v;
        out[g as usize].1 += 1;
    }
    out
}

pub fn dsp_from_counts(c: [(f64, usize); 2]) -> f64 {
    (c[1].0 / c[1].1 as f64 - c[0].0 / c[0].1 as f64).abs()
}

/// Area under the ROC curve via the Mann–Whitney statistic with midranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    ensure_len(scores.len(), labels.len())?;
    if !has_both_classes(labels) {
        return Err(ForgeError::SingleClass("labels".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(ForgeError::OutOfRange("non-finite score".into()));
    }
    let ranks = stats::midranks(scores);
    let n1 = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n0 = labels.len() as f64 - n1;
    let r1: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    Ok((r1 - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Kendall's tau-b in O(n log n) (Knight's algorithm).
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    ensure_len(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(ForgeError::Empty("kendall tau needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(ForgeError::OutOfRange("non-finite input".into()));
    }
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    let pairs = |run: u64| run * (run.saturating_sub(1)) / 2;
    let (mut ties_x, mut ties_xy) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x[a] == x[b] {
            run_x += 1;
            if y[a] == y[b] {
                run_xy += 1;
            } else {
                ties_xy += pairs(run_xy);
                run_xy = 1;
            }
        } else {
            ties_x += pairs(run_x);
            ties_xy += pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    ties_x += pairs(run_x);
    ties_xy += pairs(run_xy);

    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);

    let mut ties_y = 0u64;
    let mut run_y = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run_y += 1;
        } else {
            ties_y += pairs(run_y);
            run_y = 1;
        }
    }
    ties_y += pairs(run_y);

    let n0 = pairs(n as u64);
    tau_b_from_counts(n0, ties_x, ties_y, ties_xy, swaps)
}

/// `(n_c − n_d) / sqrt((n0 − n1)(n0 − n2))` from pair counts, where
/// `n_c − n_d = n0 − n1 − n2 + n3 − 2·discordant`.
pub(crate) fn tau_b_from_counts(n0: u64, tx: u64, ty: u64, txy: u64, discordant: u64) -> Result<f64> {
    let denom = ((n0 - tx) as f64) * ((n0 - ty) as f64);
    if denom == 0.0 {
        return Err(ForgeError::Undefined("kendall tau with a constant input".into()));
    }
    let diff = n0 as i128 - tx as i128 - ty as i128 + txy as i128 - 2 * discordant as i128;
    Ok(diff as f64 / denom.sqrt())
}

/// Stable merge sort returning the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Non-dominated flags for `(fairness_cost, error)` points, lower is better
/// on both axes. Identical points do not dominate each other.
pub fn pareto_front(points: &[(f64, f64)]) -> Result<Vec<bool>> {
    if points.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(ForgeError::OutOfRange("non-finite point".into()));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(points[a].1.total_cmp(&points[b].1)));
    let mut on_front = vec![false; points.len()];
    let mut best_before = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        let x = points[order[i]].0;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == x {
            j += 1;
        }
        // sorted by y within the group, so the first is the group minimum
        let y_min = points[order[i]].1;
        if y_min < best_before {
            for &o in &order[i..j] {
                on_front[o] = points[o].1 == y_min;
            }
        }
        best_before = best_before.min(y_min);
        i = j;
    }
    Ok(on_front)
}

/// Mean rank per method over datasets (`table[method][dataset]`, lower value
/// ranks better, ties share midranks).
pub fn average_rank(table: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = table.first() else {
        return Err(ForgeError::Empty("rank table".into()));
    };
    let d = first.len();
    if d == 0 {
        return Err(ForgeError::Empty("rank table has no datasets".into()));
    }
    if table.iter().any(|row| row.len() != d) || table.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ForgeError::Missing("rank table has missing cells".into()));
    }
    let mut sums = vec![0.0; table.len()];
    for j in 0..d {
        let column: Vec<f64> = table.iter().map(|row| row[j]).collect();
        for (s, r) in sums.iter_mut().zip(stats::midranks(&column)) {
            *s += r;
        }
    }
    Ok(sums.into_iter().map(|s| s / d as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffSummary {
    pub mean: f64,
    pub std: f64,
    /// Percentage (0–100) of rows with `|diff − mean| > 3·std`.
    pub outlier_pct: f64,
}

/// Row-wise signed difference `candidate − reference`.
pub fn difference_to_reference(candidate: &PredictionSet, reference: &PredictionSet) -> Result<DiffSummary> {
    ensure_len(candidate.len(), reference.len())?;
    if candidate.a != reference.a {
        return Err(ForgeError::Dimension("prediction sets are not row-aligned".into()));
    }
    let diffs: Vec<f64> = candidate.probs.iter().zip(&reference.probs).map(|(c, r)| c - r).collect();
    summarize_differences(&diffs)
}

pub fn summarize_differences(diffs: &[f64]) -> Result<DiffSummary> {
    if diffs.is_empty() {
        return Err(ForgeError::Empty("difference vector".into()));
    }
    let mean = stats::mean(diffs);
    let std = stats::std_pop(diffs);
    let outliers = diffs.iter().filter(|d| (*d - mean).abs() > 3.0 * std).count();
    Ok(DiffSummary { mean, std, outlier_pct: 100.0 * outliers as f64 / diffs.len() as f64 })
}

pub const AE_HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeSummary {
    pub median: f64,
    pub mean: f64,
    pub max: f64,
    /// Counts over `AE_HISTOGRAM_BINS` equal-width bins on `[0, 1]`.
    pub histogram: Vec<u64>,
}

pub fn summarize_ae(ae: &[f64]) -> Result<AeSummary> {
    if ae.is_empty() {
        return Err(ForgeError::Empty("absolute error vector".into()));
    }
    let mut histogram = vec![0u64; AE_HISTOGRAM_BINS];
    for &v in ae {
        let b = ((v * AE_HISTOGRAM_BINS as f64) as usize).min(AE_HISTOGRAM_BINS - 1);
        histogram[b] += 1;
    }
    Ok(AeSummary {
        median: stats::median(ae),
        mean: stats::mean(ae),
        max: ae.iter().copied().fold(0.0, f64::max),
        histogram,
    })
}

/// One method's measurements on one dataset. Counterfactual quantities are
/// `None` when no counterfactual twin was available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub method: String,
    pub ate: Option<f64>,
    pub ae_summary: Option<AeSummary>,
    pub dsp: f64,
    pub auc: Option<f64>,
    /// `1 − auc`.
    pub error: Option<f64>,
}

impl MetricsReport {
    /// Computes every available metric for one method's predictions.
    pub fn compute(
        dataset: &str,
        method: &str,
        obs: &PredictionSet,
        cf: Option<&PredictionSet>,
    ) -> Result<MetricsReport> {
        let (ate_v, ae) = match cf {
            Some(cf) => {
                ensure_len(obs.len(), cf.len())?;
                let ae = absolute_error(&obs.probs, &cf.probs)?;
                (Some(ate(&obs.probs, &cf.probs, &obs.a)?), Some(summarize_ae(&ae)?))
            }
            None => (None, None),
        };
        let auc_v = match &obs.labels {
            Some(l) if has_both_classes(l) => Some(auc(&obs.probs, l)?),
            _ => None,
        };
        Ok(MetricsReport {
            dataset: dataset.into(),
            method: method.into(),
            ate: ate_v,
            ae_summary: ae,
            dsp: dsp(&obs.probs, &obs.a, DspMode::Hard)?,
            auc: auc_v,
            error: auc_v.map(|a| 1.0 - a),
        })
    }
}
