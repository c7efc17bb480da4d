//! Hand-crafted causal benchmark families with exact counterfactual twins
//! and ground-truth fair variables.
//!
//! Structural equations (ε ~ N(0, σ²), U ~ N(0, 1), A ~ Bernoulli(0.5)):
//!
//! | group              | features                                   | latent outcome Y*           |
//! |--------------------|--------------------------------------------|-----------------------------|
//! | Biased             | X_b = exp(w·A + ε_X)                       | w·A + X_b + ε_Y             |
//! | DirectEffect       | X_f = exp(ε_X)                             | w·A + X_f + ε_Y             |
//! | IndirectEffect     | X_b = exp(w·A + ε_X)                       | X_b + ε_Y                   |
//! | FairObservable     | X_f = exp(ε_X), X_b = exp(w·A + ε_Z)       | X_f + X_b + ε_Y             |
//! | FairUnobservable   | X_b = exp(w·A + U + ε_X)                   | w·A + U + ε_Y               |
//! | FairAdditiveNoise  | X_b = exp(w·A) + ε_X                       | w·A + ε_X + ε_Y             |
//! | EndogenousA        | Z ~ N(0,1), A = 1(Z + N(0,1) > 0), X_b as Biased | w·A + X_b + ε_Y       |
//! | MultipleA          | A₂ ~ Bernoulli(0.5), X_b = exp(w·A + w·A₂ + ε_X) | w·A + w·A₂ + X_b + ε_Y |
//!
//! Labels are `Y = 1(Y* ≥ Ȳ)` with `Ȳ` the observational mean (redrawn as a
//! pooled quantile if that leaves a constant column). Counterfactuals flip A
//! and re-propagate with all noise fixed; fair targets re-evaluate the
//! equations with every protected weight set to zero.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{has_both_classes, TabularDataset};
use crate::error::{ForgeError, Result};
use crate::metrics;
use crate::rng::{derive_seed, log_uniform, log_uniform_int, stream};
use crate::scm_prior::MAX_THRESHOLD_ATTEMPTS;
use crate::stats::{self, quantile_sorted};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CaseGroup {
    Biased,
    DirectEffect,
    IndirectEffect,
    FairObservable,
    FairUnobservable,
    FairAdditiveNoise,
    EndogenousA,
    MultipleA,
}

impl CaseGroup {
    /// The six benchmark families (stress groups excluded).
    pub const BENCHMARK: [CaseGroup; 6] = [
        CaseGroup::Biased,
        CaseGroup::DirectEffect,
        CaseGroup::IndirectEffect,
        CaseGroup::FairObservable,
        CaseGroup::FairUnobservable,
        CaseGroup::FairAdditiveNoise,
    ];
    pub const STRESS: [CaseGroup; 2] = [CaseGroup::EndogenousA, CaseGroup::MultipleA];

    pub fn tag(self) -> &'static str {
        match self {
            CaseGroup::Biased => "biased",
            CaseGroup::DirectEffect => "direct-effect",
            CaseGroup::IndirectEffect => "indirect-effect",
            CaseGroup::FairObservable => "fair-observable",
            CaseGroup::FairUnobservable => "fair-unobservable",
            CaseGroup::FairAdditiveNoise => "fair-additive-noise",
            CaseGroup::EndogenousA => "endogenous-a",
            CaseGroup::MultipleA => "multiple-a",
        }
    }

    pub fn is_stress(self) -> bool {
        matches!(self, CaseGroup::EndogenousA | CaseGroup::MultipleA)
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for CaseGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CaseGroup {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['_', ' '], "-");
        let g = match norm.as_str() {
            "biased" => CaseGroup::Biased,
            "direct-effect" | "directeffect" | "direct" => CaseGroup::DirectEffect,
            "indirect-effect" | "indirecteffect" | "indirect" => CaseGroup::IndirectEffect,
            "fair-observable" | "fairobservable" => CaseGroup::FairObservable,
            "fair-unobservable" | "fairunobservable" | "level-two" => CaseGroup::FairUnobservable,
            "fair-additive-noise" | "fairadditivenoise" | "level-three" => CaseGroup::FairAdditiveNoise,
            "endogenous-a" | "endogenousa" | "endogenous" => CaseGroup::EndogenousA,
            "multiple-a" | "multiplea" | "multiple" => CaseGroup::MultipleA,
            _ => return Err(ForgeError::UnknownGroup(s.to_string())),
        };
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyConfig {
    pub group: CaseGroup,
    pub w_a: f64,
    pub sigma: f64,
    pub n: usize,
    pub seed: u64,
}

impl CaseStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(100..=10_000).contains(&self.n) {
            return Err(ForgeError::Config(format!("n = {} outside [100, 10000]", self.n)));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(ForgeError::Config(format!("sigma = {} outside (0, 1]", self.sigma)));
        }
        if !self.w_a.is_finite() {
            return Err(ForgeError::Config("w_a must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FairKind {
    /// Observed variable with no protected ancestor (CFP level one).
    Observable,
    /// Hidden exogenous cause (level two).
    Unobservable,
    /// Additive/structural noise term of an observed feature (level three).
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairVariable {
    pub name: String,
    pub kind: FairKind,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseBundle {
    pub id: String,
    pub config: CaseStudyConfig,
    pub observational: TabularDataset,
    /// Row-aligned twin with A flipped and noise held fixed.
    pub counterfactual: TabularDataset,
    pub y_fair: Vec<u8>,
    /// Ground truth hidden from models; available to CFP and audits.
    pub fair_variables: Vec<FairVariable>,
    pub base_ate: f64,
    pub threshold: f64,
    /// Feature columns that are protected too but not flagged to models.
    pub extra_protected: Vec<String>,
    /// False when A has an observed parent.
    pub exogenous_protected: bool,
}

impl CaseBundle {
    pub fn fair_columns(&self, kind: FairKind) -> impl Iterator<Item = &FairVariable> {
        self.fair_variables.iter().filter(move |v| v.kind == kind)
    }

    pub fn n_rows(&self) -> usize {
        self.observational.n_rows()
    }
}

struct Draws {
    a: Vec<u8>,
    a2: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
    eps_x: Vec<f64>,
    eps_z: Vec<f64>,
    eps_y: Vec<f64>,
}

/// Evaluates the structural equations for row `i` with protected value `a`
/// and protected weight `w`. Returns `(features, latent outcome)`.
fn structural(group: CaseGroup, w: f64, a: f64, d: &Draws, i: usize) -> (Vec<f64>, f64) {
    let (ex, ez, ey, u) = (d.eps_x[i], d.eps_z[i], d.eps_y[i], d.u[i]);
    match group {
        CaseGroup::Biased => {
            let xb = (w * a + ex).exp();
            (vec![xb], w * a + xb + ey)
        }
        CaseGroup::DirectEffect => {
            let xf = ex.exp();
            (vec![xf], w * a + xf + ey)
        }
        CaseGroup::IndirectEffect => {
            let xb = (w * a + ex).exp();
            (vec![xb], xb + ey)
        }
        CaseGroup::FairObservable => {
            let xf = ex.exp();
            let xb = (w * a + ez).exp();
            (vec![xf, xb], xf + xb + ey)
        }
        CaseGroup::FairUnobservable => {
            let xb = (w * a + u + ex).exp();
            (vec![xb], w * a + u + ey)
        }
        CaseGroup::FairAdditiveNoise => {
            let xb = (w * a).exp() + ex;
            (vec![xb], w * a + ex + ey)
        }
        CaseGroup::EndogenousA => {
            let xb = (w * a + ex).exp();
            (vec![d.z[i], xb], w * a + xb + ey)
        }
        CaseGroup::MultipleA => {
            let a2 = d.a2[i];
            let xb = (w * a + w * a2 + ex).exp();
            (vec![a2, xb], w * a + w * a2 + xb + ey)
        }
    }
}

fn feature_names(group: CaseGroup) -> Vec<String> {
    let names: &[&str] = match group {
        CaseGroup::Biased | CaseGroup::IndirectEffect | CaseGroup::FairUnobservable | CaseGroup::FairAdditiveNoise => {
            &["X_b"]
        }
        CaseGroup::DirectEffect => &["X_f"],
        CaseGroup::FairObservable => &["X_f", "X_b"],
        CaseGroup::EndogenousA => &["Z", "X_b"],
        CaseGroup::MultipleA => &["A2", "X_b"],
    };
    names.iter().map(|s| s.to_string()).collect()
}

fn fair_variables(group: CaseGroup, d: &Draws, obs_features: &Array2<f64>) -> Vec<FairVariable> {
    let var = |name: &str, kind, values: Vec<f64>| FairVariable { name: name.into(), kind, values };
    let col = |j: usize| obs_features.column(j).to_vec();
    match group {
        CaseGroup::Biased | CaseGroup::IndirectEffect | CaseGroup::FairAdditiveNoise | CaseGroup::MultipleA => {
            vec![var("eps_X_b", FairKind::Noise, d.eps_x.clone())]
        }
        CaseGroup::DirectEffect => vec![
            var("X_f", FairKind::Observable, col(0)),
            var("eps_X_f", FairKind::Noise, d.eps_x.clone()),
        ],
        CaseGroup::FairObservable => vec![
            var("X_f", FairKind::Observable, col(0)),
            var("eps_X_f", FairKind::Noise, d.eps_x.clone()),
            var("eps_X_b", FairKind::Noise, d.eps_z.clone()),
        ],
        CaseGroup::FairUnobservable => vec![
            var("U", FairKind::Unobservable, d.u.clone()),
            var("eps_X_b", FairKind::Noise, d.eps_x.clone()),
        ],
        CaseGroup::EndogenousA => vec![
            var("Z", FairKind::Observable, d.z.clone()),
            var("eps_X_b", FairKind::Noise, d.eps_x.clone()),
        ],
    }
}

fn draw(config: &CaseStudyConfig) -> Result<Draws> {
    let n = config.n;
    let mut rng = stream(config.seed, 0xCA5E);
    let coin = Bernoulli::new(0.5).expect("valid p");
    let mut normal = |scale: f64| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect() };
    let z = normal(1.0);
    let a_noise = normal(1.0);
    let u = normal(1.0);
    let eps_x = normal(config.sigma);
    let eps_z = normal(config.sigma);
    let eps_y = normal(config.sigma);
    let mut rng = stream(config.seed, 0xA);
    let a: Vec<u8> = match config.group {
        CaseGroup::EndogenousA => z.iter().zip(&a_noise).map(|(z, e)| u8::from(z + e > 0.0)).collect(),
        _ => (0..n).map(|_| u8::from(coin.sample(&mut rng))).collect(),
    };
    let a2 = (0..n).map(|_| f64::from(u8::from(coin.sample(&mut rng)))).collect();
    if !has_both_classes(&a) {
        return Err(ForgeError::DegenerateSample { attempts: 1, what: "protected attribute".into() });
    }
    Ok(Draws { a, a2, z, u, eps_x, eps_z, eps_y })
}

pub fn generate_case(config: &CaseStudyConfig) -> Result<CaseBundle> {
    config.validate()?;
    let group = config.group;
    let d = draw(config)?;
    let n = config.n;
    let names = feature_names(group);
    let m = names.len();

    let mut x_obs = Array2::zeros((n, m));
    let mut x_cf = Array2::zeros((n, m));
    let (mut lat_obs, mut lat_cf, mut lat_fair) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let a = f64::from(d.a[i]);
        let (fo, yo) = structural(group, config.w_a, a, &d, i);
        let (fc, yc) = structural(group, config.w_a, 1.0 - a, &d, i);
        let (_, yf) = structural(group, 0.0, a, &d, i);
        for j in 0..m {
            x_obs[[i, j]] = fo[j];
            x_cf[[i, j]] = fc[j];
        }
        lat_obs.push(yo);
        lat_cf.push(yc);
        lat_fair.push(yf);
    }
    if lat_obs.iter().chain(&lat_cf).chain(x_obs.iter()).chain(x_cf.iter()).any(|v| !v.is_finite()) {
        return Err(ForgeError::Numeric { layer: format!("{group} structural equations") });
    }

    let threshold = pick_threshold(config.seed, &lat_obs, &lat_fair)?;
    let bin = |v: &[f64]| -> Vec<u8> { v.iter().map(|&y| u8::from(y >= threshold)).collect() };
    let (y_obs, y_cf, y_fair) = (bin(&lat_obs), bin(&lat_cf), bin(&lat_fair));

    let (mut ones, mut zeros) = (0i64, 0i64);
    for i in 0..n {
        let (y1, y0) = if d.a[i] == 1 { (y_obs[i], y_cf[i]) } else { (y_cf[i], y_obs[i]) };
        ones += i64::from(y1);
        zeros += i64::from(y0);
    }
    let base_ate = (ones - zeros) as f64 / n as f64;

    let mut column_names = vec!["A".to_string()];
    column_names.extend(names);
    let fair = fair_variables(group, &d, &x_obs);
    let a_cf: Vec<u8> = d.a.iter().map(|&v| 1 - v).collect();
    let observational = TabularDataset::new(d.a, x_obs, y_obs)?.with_names(column_names.clone(), 0, "Y")?;
    let counterfactual = TabularDataset::new(a_cf, x_cf, y_cf)?.with_names(column_names, 0, "Y")?;
    Ok(CaseBundle {
        id: format!("{}-s{}", group.tag(), config.seed),
        config: config.clone(),
        observational,
        counterfactual,
        y_fair,
        fair_variables: fair,
        base_ate,
        threshold,
        extra_protected: if group == CaseGroup::MultipleA { vec!["A2".into()] } else { vec![] },
        exogenous_protected: group != CaseGroup::EndogenousA,
    })
}

/// Fair labels re-derived from the bundle's own draws with every A flipped.
pub fn flipped_fair_labels(bundle: &CaseBundle) -> Result<Vec<u8>> {
    let d = draw(&bundle.config)?;
    Ok((0..bundle.config.n)
        .map(|i| {
            let a = 1.0 - f64::from(d.a[i]);
            let (_, y) = structural(bundle.config.group, 0.0, a, &d, i);
            u8::from(y >= bundle.threshold)
        })
        .collect())
}

/// Each label vector must give its minority class at least this share of rows.
pub const MIN_MINORITY_SHARE: f64 = 0.02;

/// `Ȳ = mean(Y*_obs)`; if that leaves the observational or fair labels
/// (nearly) constant, a pooled-latent quantile in `[0.2, 0.8]` is redrawn.
fn pick_threshold(seed: u64, obs: &[f64], fair: &[f64]) -> Result<f64> {
    let floor = ((MIN_MINORITY_SHARE * obs.len() as f64).ceil() as usize).max(1);
    let balanced = |v: &[f64], t: f64| {
        let ones = v.iter().filter(|&&y| y >= t).count();
        ones >= floor && v.len() - ones >= floor
    };
    let ok = |t: f64| balanced(obs, t) && balanced(fair, t);
    let mean = stats::mean(obs);
    if ok(mean) {
        return Ok(mean);
    }
    let mut pooled: Vec<f64> = obs.iter().chain(fair).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut rng = stream(seed, 0x7E5);
    for _ in 1..MAX_THRESHOLD_ATTEMPTS {
        let t = quantile_sorted(&pooled, rng.gen_range(0.2..=0.8));
        if ok(t) {
            return Ok(t);
        }
    }
    Err(ForgeError::DegenerateSample { attempts: MAX_THRESHOLD_ATTEMPTS, what: "constant outcome".into() })
}

/// Parameters of a generated suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub groups: Vec<CaseGroup>,
    pub per_group: usize,
    pub seed: u64,
    /// Sample sizes, log-uniform.
    pub n_range: (usize, usize),
    /// Noise std, log-uniform.
    pub sigma_range: (f64, f64),
    /// |w_A|, log-uniform; the sign is a fair coin.
    pub w_range: (f64, f64),
}

impl SuiteConfig {
    pub fn new(per_group: usize, seed: u64) -> Self {
        SuiteConfig {
            groups: CaseGroup::BENCHMARK.to_vec(),
            per_group,
            seed,
            n_range: (100, 10_000),
            sigma_range: (0.01, 1.0),
            w_range: (0.25, 4.0),
        }
    }

    pub fn case_config(&self, group: CaseGroup, index: usize) -> CaseStudyConfig {
        let seed = derive_seed(derive_seed(self.seed, group.index()), index as u64);
        let mut rng = stream(seed, 0x5017E);
        let magnitude = log_uniform(&mut rng, self.w_range.0, self.w_range.1);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        CaseStudyConfig {
            group,
            w_a: sign * magnitude,
            sigma: log_uniform(&mut rng, self.sigma_range.0, self.sigma_range.1),
            n: log_uniform_int(&mut rng, self.n_range.0, self.n_range.1),
            seed,
        }
    }
}

pub fn generate_suite(per_group: usize, seed: u64) -> Result<Vec<CaseBundle>> {
    generate_suite_with(&SuiteConfig::new(per_group, seed))
}

pub fn generate_suite_with(config: &SuiteConfig) -> Result<Vec<CaseBundle>> {
    if config.per_group == 0 {
        return Err(ForgeError::Config("per_group must be at least 1".into()));
    }
    let jobs: Vec<(CaseGroup, usize)> = config
        .groups
        .iter()
        .flat_map(|&g| (0..config.per_group).map(move |j| (g, j)))
        .collect();
    jobs.into_par_iter()
        .map(|(g, j)| {
            let mut b = generate_case(&config.case_config(g, j))?;
            b.id = format!("{}-{j:03}", g.tag());
            Ok(b)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuintileKey {
    /// Magnitude of the base effect, `|base_ate|`.
    BaseAte,
    Sigma,
    N,
}

impl QuintileKey {
    pub fn value(self, b: &CaseBundle) -> f64 {
        match self {
            QuintileKey::BaseAte => b.base_ate.abs(),
            QuintileKey::Sigma => b.config.sigma,
            QuintileKey::N => b.config.n as f64,
        }
    }
}

impl FromStr for QuintileKey {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base_ate" | "base-ate" => Ok(QuintileKey::BaseAte),
            "sigma" | "σ" => Ok(QuintileKey::Sigma),
            "n" | "size" => Ok(QuintileKey::N),
            other => Err(ForgeError::Config(format!("unknown quintile key `{other}`"))),
        }
    }
}

/// Five buckets of item indices, Q1 (smallest key) to Q5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quintiles {
    pub buckets: [Vec<usize>; 5],
}

/// Partitions items into five near-equal buckets by ascending key, ties
/// broken by index.
pub fn quintile_split_values(keys: &[f64]) -> Result<Quintiles> {
    if keys.is_empty() {
        return Err(ForgeError::Empty("suite".into()));
    }
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
    let len = order.len();
    let buckets = std::array::from_fn(|q| order[q * len / 5..(q + 1) * len / 5].to_vec());
    Ok(Quintiles { buckets })
}

pub fn quintile_split(suite: &[CaseBundle], key: QuintileKey) -> Result<Quintiles> {
    let keys: Vec<f64> = suite.iter().map(|b| key.value(b)).collect();
    quintile_split_values(&keys)
}

/// Recomputes a bundle's ATE of the 0/1 labels through the metrics module.
pub fn label_ate(bundle: &CaseBundle) -> Result<f64> {
    let obs: Vec<f64> = bundle.observational.y.iter().map(|&v| f64::from(v)).collect();
    let cf: Vec<f64> = bundle.counterfactual.y.iter().map(|&v| f64::from(v)).collect();
    metrics::ate(&obs, &cf, &bundle.observational.a)
}
