//! Comparison methods sharing one in-context base predictor.
//!
//! The base predictor runs in "unfair mode": the real protected attribute is
//! moved into the feature columns and the protected slot receives a coin
//! flip per row, which makes the fairness mechanism a no-op.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::case_studies::FairKind;
use crate::dataset::TabularDataset;
use crate::error::{ForgeError, Result};
use crate::metrics::PredictionSet;
use crate::model::{ContextBatch, FairPfn};
use crate::rng::stream;

/// Anything that predicts query probabilities from a labelled context.
pub trait InContextPredictor: Sync {
    fn max_context(&self) -> usize;
    fn predict(&self, batch: &ContextBatch) -> Result<Vec<f64>>;
}

impl InContextPredictor for FairPfn {
    fn max_context(&self) -> usize {
        self.config.max_rows
    }

    fn predict(&self, batch: &ContextBatch) -> Result<Vec<f64>> {
        self.predict_batch(batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CfpLevel {
    Observable,
    Unobservable,
    Noise,
    /// Every fair column the dataset exposes.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    FairPfn,
    Unfair,
    Unaware,
    AvgCntf,
    Constant,
    Random,
    Cfp(CfpLevel),
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FairPfn,
        Method::Unfair,
        Method::Unaware,
        Method::AvgCntf,
        Method::Constant,
        Method::Random,
        Method::Cfp(CfpLevel::Auto),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FairPfn => "fairpfn",
            Method::Unfair => "unfair",
            Method::Unaware => "unaware",
            Method::AvgCntf => "avgcntf",
            Method::Constant => "constant",
            Method::Random => "random",
            Method::Cfp(CfpLevel::Auto) => "cfp",
            Method::Cfp(CfpLevel::Observable) => "cfp-1",
            Method::Cfp(CfpLevel::Unobservable) => "cfp-2",
            Method::Cfp(CfpLevel::Noise) => "cfp-3",
        }
    }

    /// Methods that consume ground-truth causal information.
    pub fn uses_causal_information(self) -> bool {
        matches!(self, Method::AvgCntf | Method::Cfp(_))
    }

    pub fn needs_model(self) -> bool {
        !matches!(self, Method::Constant | Method::Random)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s.trim().to_ascii_lowercase().as_str() {
            "fairpfn" => Method::FairPfn,
            "unfair" => Method::Unfair,
            "unaware" => Method::Unaware,
            "avgcntf" | "avg-cntf" | "cntf-avg" => Method::AvgCntf,
            "constant" => Method::Constant,
            "random" => Method::Random,
            "cfp" | "cfp-auto" => Method::Cfp(CfpLevel::Auto),
            "cfp-1" | "cfp1" => Method::Cfp(CfpLevel::Observable),
            "cfp-2" | "cfp2" => Method::Cfp(CfpLevel::Unobservable),
            "cfp-3" | "cfp3" => Method::Cfp(CfpLevel::Noise),
            other => return Err(ForgeError::Config(format!("unknown method `{other}`"))),
        };
        Ok(m)
    }
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

/// Ground-truth fair columns for the context and query rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FairColumns {
    pub names: Vec<String>,
    pub kinds: Vec<FairKind>,
    pub context: Array2<f64>,
    pub query: Array2<f64>,
}

impl FairColumns {
    fn select(&self, level: CfpLevel) -> Result<(Array2<f64>, Array2<f64>)> {
        let wanted = |k: FairKind| match level {
            CfpLevel::Observable => k == FairKind::Observable,
            CfpLevel::Unobservable => k == FairKind::Unobservable,
            CfpLevel::Noise => k == FairKind::Noise,
            CfpLevel::Auto => true,
        };
        let cols: Vec<usize> = (0..self.kinds.len()).filter(|&j| wanted(self.kinds[j])).collect();
        if cols.is_empty() {
            return Err(ForgeError::Missing(format!("no fair columns for CFP level {level:?}")));
        }
        Ok((self.context.select(Axis(1), &cols), self.query.select(Axis(1), &cols)))
    }
}

/// One evaluation problem: labelled context rows, observational query rows
/// and, when known, their counterfactual twins and fair columns.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTask {
    pub name: String,
    pub context: TabularDataset,
    pub query: TabularDataset,
    pub query_cf: Option<TabularDataset>,
    /// Labels that AUC is scored against.
    pub auc_labels: Vec<u8>,
    pub fair: Option<FairColumns>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodOutput {
    pub method: Method,
    pub obs: PredictionSet,
    pub cf: Option<PredictionSet>,
}

struct Prepared {
    context_rows: Vec<usize>,
    context_noise: Vec<u8>,
    query_noise: Vec<u8>,
}

impl EvalTask {
    fn prepare(&self, max_context: usize) -> Prepared {
        let n = self.context.n_rows();
        let mut rng = stream(self.seed, 0xC0);
        let context_rows = if n > max_context {
            let mut rows = sample(&mut rng, n, max_context).into_vec();
            rows.sort_unstable();
            rows
        } else {
            (0..n).collect()
        };
        let mut noise = stream(self.seed, 0xC1);
        let context_noise = (0..context_rows.len()).map(|_| u8::from(noise.gen::<bool>())).collect();
        let query_noise = (0..self.query.n_rows()).map(|_| u8::from(noise.gen::<bool>())).collect();
        Prepared { context_rows, context_noise, query_noise }
    }

    fn prediction_set(&self, probs: Vec<f64>, world: &TabularDataset) -> Result<PredictionSet> {
        PredictionSet::new(probs, Some(self.auc_labels.clone()), world.a.clone())
    }

    fn validate(&self) -> Result<()> {
        if self.context.n_rows() == 0 {
            return Err(ForgeError::Empty("context".into()));
        }
        if self.auc_labels.len() != self.query.n_rows() {
            return Err(ForgeError::LengthMismatch { left: self.auc_labels.len(), right: self.query.n_rows() });
        }
        if let Some(cf) = &self.query_cf {
            if cf.n_rows() != self.query.n_rows() {
                return Err(ForgeError::LengthMismatch { left: cf.n_rows(), right: self.query.n_rows() });
            }
        }
        Ok(())
    }
}

fn with_protected_feature(ds: &TabularDataset, rows: Option<&[usize]>, flip: bool) -> Array2<f64> {
    let a = Array2::from_shape_fn((ds.n_rows(), 1), |(i, _)| {
        let v = f64::from(ds.a[i]);
        if flip {
            1.0 - v
        } else {
            v
        }
    });
    let full = concatenate![Axis(1), ds.x.view(), a.view()];
    match rows {
        Some(r) => full.select(Axis(0), r),
        None => full,
    }
}

/// Base predictor in unfair mode: `[X, A]` as features, noise as protected.
fn unfair_pass(
    base: &dyn InContextPredictor,
    task: &EvalTask,
    prep: &Prepared,
    world: &TabularDataset,
    flip: bool,
) -> Result<Vec<f64>> {
    let batch = ContextBatch {
        context_features: with_protected_feature(&task.context, Some(&prep.context_rows), false),
        context_protected: prep.context_noise.clone(),
        context_labels: prep.context_rows.iter().map(|&i| task.context.y[i]).collect(),
        query_features: with_protected_feature(world, None, flip),
        query_protected: prep.query_noise.clone(),
    };
    base.predict(&batch)
}

fn fair_pass(base: &dyn InContextPredictor, task: &EvalTask, prep: &Prepared, world: &TabularDataset) -> Result<Vec<f64>> {
    let batch = ContextBatch {
        context_features: task.context.x.select(Axis(0), &prep.context_rows),
        context_protected: prep.context_rows.iter().map(|&i| task.context.a[i]).collect(),
        context_labels: prep.context_rows.iter().map(|&i| task.context.y[i]).collect(),
        query_features: world.x.clone(),
        query_protected: world.a.clone(),
    };
    base.predict(&batch)
}

fn require_cf(task: &EvalTask, method: Method) -> Result<&TabularDataset> {
    task.query_cf
        .as_ref()
        .ok_or_else(|| ForgeError::Missing(format!("{method} needs counterfactual query rows")))
}

fn average_pair(p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let obs = p.iter().zip(q).map(|(p, q)| (p + q) * 0.5).collect();
    let twin = q.iter().zip(p).map(|(q, p)| (q + p) * 0.5).collect();
    (obs, twin)
}

/// The averaged-counterfactual baseline from an existing unfair-mode run;
/// equal to running [`Method::AvgCntf`] on the same task.
pub fn average_worlds(unfair: &MethodOutput) -> Result<MethodOutput> {
    let cf = unfair
        .cf
        .as_ref()
        .ok_or_else(|| ForgeError::Missing("avgcntf needs counterfactual query rows".into()))?;
    let (obs, twin) = average_pair(&unfair.obs.probs, &cf.probs);
    Ok(MethodOutput {
        method: Method::AvgCntf,
        obs: PredictionSet::new(obs, unfair.obs.labels.clone(), unfair.obs.a.clone())?,
        cf: Some(PredictionSet::new(twin, cf.labels.clone(), cf.a.clone())?),
    })
}

/// Runs one method. Counterfactual predictions are produced whenever the
/// task carries counterfactual rows.
pub fn run_method(method: Method, task: &EvalTask, base: Option<&dyn InContextPredictor>) -> Result<MethodOutput> {
    task.validate()?;
    let need_base = || base.ok_or_else(|| ForgeError::Missing(format!("{method} needs a model checkpoint")));
    let max_context = base.map_or(usize::MAX, |b| b.max_context());
    let prep = task.prepare(max_context);
    let cf = task.query_cf.as_ref();
    let (obs, cf_probs) = match method {
        Method::FairPfn => {
            let b = need_base()?;
            (fair_pass(b, task, &prep, &task.query)?, cf.map(|w| fair_pass(b, task, &prep, w)).transpose()?)
        }
        Method::Unfair => {
            let b = need_base()?;
            let obs = unfair_pass(b, task, &prep, &task.query, false)?;
            (obs, cf.map(|w| unfair_pass(b, task, &prep, w, false)).transpose()?)
        }
        Method::Unaware => {
            let b = need_base()?;
            let both = |w: &TabularDataset| -> Result<Vec<f64>> {
                let p = unfair_pass(b, task, &prep, w, false)?;
                let q = unfair_pass(b, task, &prep, w, true)?;
                Ok(p.iter().zip(&q).map(|(p, q)| (p + q) * 0.5).collect())
            };
            (both(&task.query)?, cf.map(both).transpose()?)
        }
        Method::AvgCntf => {
            let b = need_base()?;
            let cf = require_cf(task, method)?;
            let p = unfair_pass(b, task, &prep, &task.query, false)?;
            let q = unfair_pass(b, task, &prep, cf, false)?;
            let (obs, twin) = average_pair(&p, &q);
            (obs, Some(twin))
        }
        Method::Constant => {
            let ones = task.context.y.iter().filter(|&&y| y == 1).count();
            let label = if 2 * ones >= task.context.n_rows() { 1.0 } else { 0.0 };
            let n = task.query.n_rows();
            (vec![label; n], cf.map(|_| vec![label; n]))
        }
        Method::Random => {
            let mut rng = stream(task.seed, 0x4A4D);
            let n = task.query.n_rows();
            let obs = (0..n).map(|_| rng.gen::<f64>()).collect();
            (obs, cf.map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()))
        }
        Method::Cfp(level) => {
            let b = need_base()?;
            let fair = task
                .fair
                .as_ref()
                .ok_or_else(|| ForgeError::Missing("CFP needs ground-truth fair columns".into()))?;
            let (ctx, query) = fair.select(level)?;
            let batch = ContextBatch {
                context_features: ctx.select(Axis(0), &prep.context_rows),
                context_protected: prep.context_noise.clone(),
                context_labels: prep.context_rows.iter().map(|&i| task.context.y[i]).collect(),
                query_features: query,
                query_protected: prep.query_noise.clone(),
            };
            let p = b.predict(&batch)?;
            let twin = cf.map(|_| p.clone());
            (p, twin)
        }
    };
    let obs = task.prediction_set(obs, &task.query)?;
    let cf = match (cf_probs, cf) {
        (Some(p), Some(w)) => Some(task.prediction_set(p, w)?),
        _ => None,
    };
    Ok(MethodOutput { method, obs, cf })
}
