//! Experiment drivers: suite evaluation, trade-off tables, quintile
//! ablations, stress groups, complexity sweeps and k-fold real-world runs.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{average_worlds, run_method, EvalTask, FairColumns, InContextPredictor, Method, MethodOutput};
use crate::case_studies::{quintile_split, CaseBundle, CaseGroup, FairKind, QuintileKey};
use crate::dataset::TabularDataset;
use crate::error::{ForgeError, Result};
use crate::io::{kfold, LoadedDataset};
use crate::metrics::{self, average_rank, difference_to_reference, pareto_front, MetricsReport, PredictionSet};
use crate::rng::{derive_seed, stream};
use crate::scm_prior::{sample_one, PriorConfig};
use crate::stats;

pub const TRAIN_FRACTION: f64 = 0.7;

/// Seeded 70/30 split of a bundle. AUC is scored against the fair labels.
pub fn split_bundle(bundle: &CaseBundle, seed: u64) -> Result<EvalTask> {
    let n = bundle.n_rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, 0x5B17));
    let n_train = ((TRAIN_FRACTION * n as f64).round() as usize).clamp(1, n - 1);
    let (mut train, mut test) = (order[..n_train].to_vec(), order[n_train..].to_vec());
    train.sort_unstable();
    test.sort_unstable();
    let fair = if bundle.fair_variables.is_empty() {
        None
    } else {
        let cols = |rows: &[usize]| {
            Array2::from_shape_fn((rows.len(), bundle.fair_variables.len()), |(i, j)| bundle.fair_variables[j].values[rows[i]])
        };
        Some(FairColumns {
            names: bundle.fair_variables.iter().map(|v| v.name.clone()).collect(),
            kinds: bundle.fair_variables.iter().map(|v| v.kind).collect(),
            context: cols(&train),
            query: cols(&test),
        })
    };
    Ok(EvalTask {
        name: bundle.id.clone(),
        context: bundle.observational.select_rows(&train),
        query: bundle.observational.select_rows(&test),
        query_cf: Some(bundle.counterfactual.select_rows(&test)),
        auc_labels: test.iter().map(|&i| bundle.y_fair[i]).collect(),
        fair,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BundleEvaluation {
    pub dataset: String,
    pub group: Option<CaseGroup>,
    pub outputs: Vec<MethodOutput>,
    pub reports: Vec<MetricsReport>,
}

impl BundleEvaluation {
    pub fn report(&self, method: Method) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.method == method.name())
    }

    pub fn output(&self, method: Method) -> Option<&MethodOutput> {
        self.outputs.iter().find(|o| o.method == method)
    }
}

pub fn evaluate_task(
    task: &EvalTask,
    group: Option<CaseGroup>,
    methods: &[Method],
    base: Option<&dyn InContextPredictor>,
) -> Result<BundleEvaluation> {
    let mut outputs = Vec::with_capacity(methods.len());
    let mut reports = Vec::with_capacity(methods.len());
    for &m in methods {
        let unfair = outputs.iter().find(|o: &&MethodOutput| o.method == Method::Unfair);
        let out = match (m, unfair) {
            (Method::AvgCntf, Some(u)) => average_worlds(u)?,
            _ => run_method(m, task, base)?,
        };
        reports.push(MetricsReport::compute(&task.name, m.name(), &out.obs, out.cf.as_ref())?);
        outputs.push(out);
    }
    Ok(BundleEvaluation { dataset: task.name.clone(), group, outputs, reports })
}

pub fn evaluate_bundle(
    bundle: &CaseBundle,
    methods: &[Method],
    base: Option<&dyn InContextPredictor>,
    seed: u64,
) -> Result<BundleEvaluation> {
    let task = split_bundle(bundle, derive_seed(seed, bundle.config.seed))?;
    evaluate_task(&task, Some(bundle.config.group), methods, base)
}

/// Evaluates bundles in parallel; results keep the suite order.
pub fn evaluate_suite(
    suite: &[CaseBundle],
    methods: &[Method],
    base: Option<&dyn InContextPredictor>,
    seed: u64,
) -> Result<Vec<BundleEvaluation>> {
    suite.par_iter().map(|b| evaluate_bundle(b, methods, base, seed)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub dataset: String,
    pub group: Option<CaseGroup>,
    pub method: String,
    pub abs_ate: f64,
    pub error: f64,
    pub pareto: bool,
    pub causal_information: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Fraction of datasets on which the method is Pareto-optimal.
    pub pareto_share: f64,
    pub rank_abs_ate: f64,
    pub rank_error: f64,
    pub median_abs_ate: f64,
    pub mean_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub group: Option<CaseGroup>,
    pub method: String,
    pub mean: f64,
    pub std: f64,
    pub outlier_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffTable {
    pub rows: Vec<TradeoffRow>,
    pub summary: Vec<MethodSummary>,
    /// Per-group mean of the row-wise difference to the averaged
    /// counterfactual predictions (present when that method was run).
    pub diff_to_avgcntf: Vec<DiffRow>,
    /// Datasets left out because some method had no ATE or no AUC there.
    pub excluded: Vec<String>,
}

/// Fairness/accuracy trade-off over evaluated bundles. A dataset takes part
/// only if every method has both an ATE and an AUC on it.
pub fn run_tradeoff(evals: &[BundleEvaluation], methods: &[Method]) -> Result<TradeoffTable> {
    if evals.is_empty() {
        return Err(ForgeError::Empty("evaluations".into()));
    }
    let mut rows = Vec::new();
    let mut ate_table = vec![Vec::with_capacity(evals.len()); methods.len()];
    let mut err_table = vec![Vec::with_capacity(evals.len()); methods.len()];
    let mut auc_table = vec![Vec::with_capacity(evals.len()); methods.len()];
    let mut pareto_hits = vec![0usize; methods.len()];
    let mut excluded = Vec::new();
    let mut included = 0usize;
    'datasets: for e in evals {
        let mut points = Vec::with_capacity(methods.len());
        for &m in methods {
            let r = e.report(m).ok_or_else(|| ForgeError::Missing(format!("{m} on {}", e.dataset)))?;
            let (Some(ate), Some(err)) = (r.ate, r.error) else {
                excluded.push(e.dataset.clone());
                continue 'datasets;
            };
            points.push((ate.abs(), err));
        }
        included += 1;
        let front = pareto_front(&points)?;
        for (k, &m) in methods.iter().enumerate() {
            let (abs_ate, error) = points[k];
            ate_table[k].push(abs_ate);
            err_table[k].push(error);
            auc_table[k].push(1.0 - error);
            pareto_hits[k] += usize::from(front[k]);
            rows.push(TradeoffRow {
                dataset: e.dataset.clone(),
                group: e.group,
                method: m.name().into(),
                abs_ate,
                error,
                pareto: front[k],
                causal_information: m.uses_causal_information(),
            });
        }
    }
    if included == 0 {
        return Err(ForgeError::Empty("datasets with both ATE and AUC".into()));
    }
    let rank_ate = average_rank(&ate_table)?;
    let rank_err = average_rank(&err_table)?;
    let summary = methods
        .iter()
        .enumerate()
        .map(|(k, m)| MethodSummary {
            method: m.name().into(),
            pareto_share: pareto_hits[k] as f64 / included as f64,
            rank_abs_ate: rank_ate[k],
            rank_error: rank_err[k],
            median_abs_ate: stats::median(&ate_table[k]),
            mean_auc: stats::mean(&auc_table[k]),
        })
        .collect();
    Ok(TradeoffTable { rows, summary, diff_to_avgcntf: diff_table(evals, methods)?, excluded })
}

fn diff_table(evals: &[BundleEvaluation], methods: &[Method]) -> Result<Vec<DiffRow>> {
    if !methods.contains(&Method::AvgCntf) {
        return Ok(Vec::new());
    }
    let mut acc: BTreeMap<(Option<CaseGroup>, String), Vec<metrics::DiffSummary>> = BTreeMap::new();
    for e in evals {
        let reference = &e.output(Method::AvgCntf).expect("evaluated").obs;
        for &m in methods {
            let cand = &e.output(m).expect("evaluated").obs;
            let d = difference_to_reference(cand, reference)?;
            acc.entry((e.group, m.name().to_string())).or_default().push(d);
            acc.entry((None, m.name().to_string())).or_default().push(d);
        }
    }
    Ok(acc
        .into_iter()
        .map(|((group, method), ds)| {
            let k = ds.len() as f64;
            DiffRow {
                group,
                method,
                mean: ds.iter().map(|d| d.mean).sum::<f64>() / k,
                std: ds.iter().map(|d| d.std).sum::<f64>() / k,
                outlier_pct: ds.iter().map(|d| d.outlier_pct).sum::<f64>() / k,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuintileRow {
    /// 1 (smallest key) to 5.
    pub quintile: usize,
    pub method: String,
    pub count: usize,
    pub key_min: f64,
    pub key_max: f64,
    pub median_abs_ate: f64,
    /// Interquartile range of the signed prediction ATE.
    pub ate_iqr: f64,
    pub median_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSample {
    pub quintile: usize,
    pub dataset: String,
    pub method: String,
    pub key: f64,
    pub ate: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<QuintileRow>,
    pub samples: Vec<AblationSample>,
}

impl AblationTable {
    /// Per-quintile values of `field` for `method`, Q1 first.
    pub fn series(&self, method: Method, field: impl Fn(&QuintileRow) -> f64) -> Vec<f64> {
        let mut rows: Vec<&QuintileRow> = self.rows.iter().filter(|r| r.method == method.name()).collect();
        rows.sort_by_key(|r| r.quintile);
        rows.into_iter().map(field).collect()
    }
}

/// Quintile table over `suite` (row-aligned with `evals`) keyed by `key`.
pub fn run_ablation(
    suite: &[CaseBundle],
    evals: &[BundleEvaluation],
    key: QuintileKey,
    methods: &[Method],
) -> Result<AblationTable> {
    if suite.len() != evals.len() {
        return Err(ForgeError::LengthMismatch { left: suite.len(), right: evals.len() });
    }
    let q = quintile_split(suite, key)?;
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for (b, bucket) in q.buckets.iter().enumerate() {
        for &m in methods {
            let mut ates = Vec::with_capacity(bucket.len());
            let mut aucs = Vec::with_capacity(bucket.len());
            let mut keys = Vec::with_capacity(bucket.len());
            for &i in bucket {
                let r = evals[i].report(m).ok_or_else(|| ForgeError::Missing(format!("{m} on {}", evals[i].dataset)))?;
                let ate = r.ate.ok_or_else(|| ForgeError::Missing(format!("ATE of {m} on {}", r.dataset)))?;
                let auc = r.auc.unwrap_or(f64::NAN);
                let k = key.value(&suite[i]);
                samples.push(AblationSample { quintile: b + 1, dataset: r.dataset.clone(), method: m.name().into(), key: k, ate, auc });
                ates.push(ate);
                aucs.push(auc);
                keys.push(k);
            }
            if ates.is_empty() {
                continue;
            }
            let abs: Vec<f64> = ates.iter().map(|v| v.abs()).collect();
            rows.push(QuintileRow {
                quintile: b + 1,
                method: m.name().into(),
                count: ates.len(),
                key_min: keys.iter().copied().fold(f64::INFINITY, f64::min),
                key_max: keys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                median_abs_ate: stats::median(&abs),
                ate_iqr: stats::iqr(&ates),
                median_auc: stats::median(&aucs),
            });
        }
    }
    let axis = match key {
        QuintileKey::BaseAte => "base_ate",
        QuintileKey::Sigma => "sigma",
        QuintileKey::N => "n",
    };
    Ok(AblationTable { axis: axis.into(), rows, samples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressRow {
    pub group: CaseGroup,
    pub dataset: String,
    pub method: String,
    pub ate: f64,
    pub auc: f64,
}

/// Side-by-side measurements on bundles that break the prior's assumptions.
pub fn run_stress(evals: &[BundleEvaluation], methods: &[Method]) -> Result<Vec<StressRow>> {
    let mut out = Vec::new();
    for e in evals.iter().filter(|e| e.group.is_some_and(CaseGroup::is_stress)) {
        for &m in methods {
            let r = e.report(m).ok_or_else(|| ForgeError::Missing(format!("{m} on {}", e.dataset)))?;
            out.push(StressRow {
                group: e.group.expect("filtered"),
                dataset: e.dataset.clone(),
                method: m.name().into(),
                ate: r.ate.unwrap_or(f64::NAN),
                auc: r.auc.unwrap_or(f64::NAN),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub exogenous: usize,
    pub nodes: usize,
    pub dataset: usize,
    pub method: String,
    pub ate: f64,
    pub auc: f64,
}

/// Measures methods on prior draws of growing graph width. Widths whose
/// feature count would exceed `max_features - 1` are capped there.
pub fn run_complexity(
    widths: &[usize],
    per_level: usize,
    max_features: usize,
    methods: &[Method],
    base: Option<&dyn InContextPredictor>,
    seed: u64,
) -> Result<Vec<ComplexityRow>> {
    let jobs: Vec<(usize, usize)> = widths.iter().flat_map(|&w| (0..per_level).map(move |i| (w, i))).collect();
    let nested: Vec<Vec<ComplexityRow>> = jobs
        .into_par_iter()
        .map(|(w, i)| {
            let depth = 3;
            let cap = crate::scm_prior::available_features(w, depth);
            let cfg = PriorConfig {
                num_exogenous: w,
                depth,
                num_features: cap.min(max_features.saturating_sub(1)).max(1),
                num_samples: 1000,
                ..PriorConfig::default()
            };
            let s = derive_seed(derive_seed(seed, w as u64), i as u64);
            let sample = sample_one(&cfg, s)?;
            let cf = sample.counterfactual()?;
            let n = sample.dataset.n_rows();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream(s, 0x5B17));
            let cut = (TRAIN_FRACTION * n as f64).round() as usize;
            let (mut train, mut test) = (order[..cut].to_vec(), order[cut..].to_vec());
            train.sort_unstable();
            test.sort_unstable();
            let task = EvalTask {
                name: format!("width{w}-{i}"),
                context: sample.dataset.select_rows(&train),
                query: sample.dataset.select_rows(&test),
                query_cf: Some(cf.select_rows(&test)),
                auc_labels: test.iter().map(|&r| sample.y_fair[r]).collect(),
                fair: None,
                seed: s,
            };
            let e = evaluate_task(&task, None, methods, base)?;
            Ok(methods
                .iter()
                .map(|m| {
                    let r = e.report(*m).expect("evaluated");
                    ComplexityRow {
                        exogenous: w,
                        nodes: w * depth,
                        dataset: i,
                        method: m.name().into(),
                        ate: r.ate.unwrap_or(f64::NAN),
                        auc: r.auc.unwrap_or(f64::NAN),
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub method: String,
    pub variable: String,
    pub kendall_tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealWorldReport {
    pub dataset_digest: String,
    pub folds: Vec<MetricsReport>,
    pub pooled: Vec<MetricsReport>,
    /// Kendall τ between pooled predictions and each feature / noise term.
    pub correlations: Vec<CorrelationRow>,
    pub counterfactual_available: bool,
}

impl RealWorldReport {
    pub fn pooled(&self, method: Method) -> Option<&MetricsReport> {
        self.pooled.iter().find(|r| r.method == method.name())
    }
}

fn real_task(data: &LoadedDataset, train: &[usize], validation: &[usize], name: String, seed: u64) -> EvalTask {
    let fair = data.fair_noise.as_ref().map(|(names, values)| FairColumns {
        names: names.clone(),
        kinds: vec![FairKind::Noise; names.len()],
        context: values.select(Axis(0), train),
        query: values.select(Axis(0), validation),
    });
    EvalTask {
        name,
        context: data.data.select_rows(train),
        query: data.data.select_rows(validation),
        query_cf: data.counterfactual.as_ref().map(|cf| cf.select_rows(validation)),
        auc_labels: validation.iter().map(|&i| data.data.y[i]).collect(),
        fair,
        seed,
    }
}

/// K-fold evaluation of every method; pooled metrics use each row's
/// out-of-fold prediction.
pub fn run_realworld(
    data: &LoadedDataset,
    methods: &[Method],
    base: Option<&dyn InContextPredictor>,
    seed: u64,
) -> Result<RealWorldReport> {
    let methods: Vec<Method> = methods
        .iter()
        .copied()
        .filter(|m| data.counterfactual.is_some() || *m != Method::AvgCntf)
        .filter(|m| data.fair_noise.is_some() || !matches!(m, Method::Cfp(_)))
        .collect();
    let n = data.data.n_rows();
    let folds = kfold(n, data.folds, seed)?;
    let evals: Vec<(Vec<usize>, BundleEvaluation)> = folds
        .par_iter()
        .map(|f| {
            let task = real_task(data, &f.train, &f.validation, format!("fold{}", f.fold), derive_seed(seed, f.fold as u64));
            Ok((f.validation.clone(), evaluate_task(&task, None, &methods, base)?))
        })
        .collect::<Result<_>>()?;
    let mut fold_reports = Vec::new();
    let mut pooled = Vec::new();
    let mut correlations = Vec::new();
    for &m in &methods {
        let mut obs = vec![0.0; n];
        let mut cf = vec![0.0; n];
        for (rows, e) in &evals {
            let out = e.output(m).expect("evaluated");
            for (k, &i) in rows.iter().enumerate() {
                obs[i] = out.obs.probs[k];
                if let Some(c) = &out.cf {
                    cf[i] = c.probs[k];
                }
            }
            fold_reports.push(e.report(m).expect("evaluated").clone());
        }
        let obs_set = PredictionSet::new(obs.clone(), Some(data.data.y.clone()), data.data.a.clone())?;
        let cf_set = match &data.counterfactual {
            Some(twin) => Some(PredictionSet::new(cf, None, twin.a.clone())?),
            None => None,
        };
        pooled.push(MetricsReport::compute("pooled", m.name(), &obs_set, cf_set.as_ref())?);
        correlations.extend(correlation_rows(m, &obs, &data.data, data.fair_noise.as_ref()));
    }
    Ok(RealWorldReport {
        dataset_digest: data.digest.clone(),
        folds: fold_reports,
        pooled,
        correlations,
        counterfactual_available: data.counterfactual.is_some(),
    })
}

fn correlation_rows(
    m: Method,
    preds: &[f64],
    data: &TabularDataset,
    noise: Option<&(Vec<String>, Array2<f64>)>,
) -> Vec<CorrelationRow> {
    let mut cols: Vec<(String, Vec<f64>)> = data
        .feature_names()
        .into_iter()
        .enumerate()
        .map(|(j, name)| (name.to_string(), data.x.column(j).to_vec()))
        .collect();
    cols.push((data.protected_name().to_string(), data.a.iter().map(|&v| f64::from(v)).collect()));
    if let Some((names, values)) = noise {
        cols.extend(names.iter().enumerate().map(|(j, name)| (name.clone(), values.column(j).to_vec())));
    }
    cols.into_iter()
        .map(|(variable, values)| CorrelationRow {
            method: m.name().into(),
            variable,
            kendall_tau: metrics::kendall_tau(preds, &values).unwrap_or(f64::NAN),
        })
        .collect()
}
