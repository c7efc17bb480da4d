//! Sparse-MLP structural causal models with a binary exogenous protected
//! attribute, and paired biased/fair dataset generation.
//!
//! Layout conventions: an SCM of width `U` and depth `H` has `H` layers of
//! `U` nodes. Layer 0 holds the exogenous causes, one of which (row `k`) is
//! the protected attribute. Weights and masks are `U × U × (H−1)` tensors;
//! slice `[.., .., i]` maps layer `i` to layer `i + 1` as
//! `X[i+1] = z[i+1](Σ_r P[r,j,i]·W[r,j,i]·X[i][r] + ε[j,i+1])`.
//! Noise is a `U × H` matrix per sample; column 0 is unused because the
//! exogenous draws are themselves the input layer's noise.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{has_both_classes, TabularDataset};
use crate::error::{ForgeError, Result};
use crate::rng::{derive_seed, log_uniform, log_uniform_int, stream};
use crate::stats::quantile_sorted;

/// Threshold/resample budget for degenerate columns.
pub const MAX_THRESHOLD_ATTEMPTS: usize = 64;
/// Redraw budget per batch element in [`sample_prior_batch`].
pub const MAX_BATCH_RETRIES: usize = 16;
/// Activations are clipped into `±ACTIVATION_CLIP` before thresholding.
pub const ACTIVATION_CLIP: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Nonlinearity {
    Identity,
    Relu,
    Tanh,
}

impl Nonlinearity {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Identity => v,
            Nonlinearity::Relu => v.max(0.0),
            Nonlinearity::Tanh => v.tanh(),
        }
    }
}

/// Ranges used by [`sample_prior_batch`] to vary the architecture and data
/// shape per element. All ranges are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorRanges {
    pub exogenous: (usize, usize),
    pub depth: (usize, usize),
    pub features: (usize, usize),
    /// Sample size, drawn log-uniform.
    pub samples: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub num_exogenous: usize,
    pub depth: usize,
    pub num_features: usize,
    pub num_samples: usize,
    /// Edge keep-probability, drawn log-uniform from this range per SCM.
    pub sparsity_log_range: (f64, f64),
    pub noise_std_range: (f64, f64),
    /// Quantile of the pooled outcome latents used as the label threshold.
    #[serde(default = "default_outcome_quantiles")]
    pub outcome_quantile_range: (f64, f64),
    pub nonlinearities: Vec<Nonlinearity>,
    pub seed: u64,
    #[serde(default)]
    pub vary: Option<PriorRanges>,
}

fn default_outcome_quantiles() -> (f64, f64) {
    (0.2, 0.8)
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            num_exogenous: 5,
            depth: 3,
            num_features: 4,
            num_samples: 500,
            sparsity_log_range: (0.1, 1.0),
            noise_std_range: (0.01, 1.0),
            outcome_quantile_range: default_outcome_quantiles(),
            nonlinearities: vec![Nonlinearity::Identity, Nonlinearity::Relu, Nonlinearity::Tanh],
            seed: 0,
            vary: None,
        }
    }
}

/// Number of nodes eligible as features: layers from 2 onward when the
/// depth allows it (layer 1 otherwise), minus the outcome node.
pub fn available_features(width: usize, depth: usize) -> usize {
    if depth < 2 || width == 0 {
        return 0;
    }
    width * (depth - first_feature_layer(depth)) - 1
}

fn first_feature_layer(depth: usize) -> usize {
    if depth >= 3 {
        2
    } else {
        1
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64), positive: bool) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi || (positive && lo <= 0.0) {
        return Err(ForgeError::Config(format!("{name} range ({lo}, {hi}) is invalid")));
    }
    Ok(())
}

fn check_int_range(name: &str, (lo, hi): (usize, usize)) -> Result<()> {
    if lo == 0 || lo > hi {
        return Err(ForgeError::Config(format!("{name} range ({lo}, {hi}) is invalid")));
    }
    Ok(())
}

impl PriorConfig {
    /// Varied-shape prior used for pre-training the transformer.
    pub fn training() -> Self {
        PriorConfig {
            num_exogenous: 6,
            depth: 3,
            num_features: 4,
            num_samples: 300,
            outcome_quantile_range: (0.02, 0.98),
            vary: Some(PriorRanges { exogenous: (3, 8), depth: (2, 4), features: (1, 8), samples: (100, 600) }),
            ..PriorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_exogenous < 2 {
            return Err(ForgeError::Config("num_exogenous must be at least 2".into()));
        }
        if self.depth < 2 {
            return Err(ForgeError::Config("depth must be at least 2".into()));
        }
        if self.num_samples < 2 {
            return Err(ForgeError::Config("num_samples must be at least 2".into()));
        }
        if self.num_features == 0 || self.num_features > available_features(self.num_exogenous, self.depth) {
            return Err(ForgeError::Config(format!(
                "num_features {} outside 1..={}",
                self.num_features,
                available_features(self.num_exogenous, self.depth)
            )));
        }
        check_range("sparsity", self.sparsity_log_range, true)?;
        if self.sparsity_log_range.1 > 1.0 {
            return Err(ForgeError::Config("sparsity keep-probability above 1".into()));
        }
        check_range("noise std", self.noise_std_range, true)?;
        let (qlo, qhi) = self.outcome_quantile_range;
        if !(0.0 < qlo && qlo <= qhi && qhi < 1.0) {
            return Err(ForgeError::Config(format!("outcome quantile range ({qlo}, {qhi}) must lie inside (0, 1)")));
        }
        if self.nonlinearities.is_empty() {
            return Err(ForgeError::Config("empty nonlinearity set".into()));
        }
        if let Some(v) = &self.vary {
            check_int_range("exogenous", v.exogenous)?;
            check_int_range("depth", v.depth)?;
            check_int_range("features", v.features)?;
            check_int_range("samples", v.samples)?;
            if v.exogenous.0 < 2 || v.depth.0 < 2 || v.samples.0 < 2 {
                return Err(ForgeError::Config("varied ranges must keep U ≥ 2, H ≥ 2, n ≥ 2".into()));
            }
        }
        Ok(())
    }
}

/// A sampled sparse-MLP SCM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub num_exogenous: usize,
    pub depth: usize,
    /// `U × U × (H−1)`, first axis is the source node.
    pub weights: Array3<f64>,
    pub masks: Array3<u8>,
    /// One tag per layer; entry 0 (the exogenous layer) is always `Identity`.
    pub nonlinearities: Vec<Nonlinearity>,
    pub density: f64,
    pub protected_row: usize,
    pub protected_threshold: f64,
    pub protected_values: (f64, f64),
    /// `(layer, node)` pairs.
    pub feature_locations: Vec<(usize, usize)>,
    /// Node index in the last layer.
    pub outcome_location: usize,
    /// Quantile of the pooled latent outcome used for the first threshold try.
    pub outcome_quantile: f64,
    /// Threshold actually applied; set by [`generate_pair`].
    pub outcome_threshold: Option<f64>,
    pub noise_std: f64,
}

impl ScmSpec {
    pub fn validate(&self) -> Result<()> {
        let (u, h) = (self.num_exogenous, self.depth);
        if u < 2 || h < 2 {
            return Err(ForgeError::Dimension(format!("U={u}, H={h}")));
        }
        if self.weights.dim() != (u, u, h - 1) || self.masks.dim() != (u, u, h - 1) {
            return Err(ForgeError::Dimension(format!(
                "weights {:?} / masks {:?}, expected ({u}, {u}, {})",
                self.weights.dim(),
                self.masks.dim(),
                h - 1
            )));
        }
        if self.masks.iter().any(|&m| m > 1) {
            return Err(ForgeError::OutOfRange("mask entry other than 0/1".into()));
        }
        if self.nonlinearities.len() != h {
            return Err(ForgeError::Dimension("one nonlinearity per layer required".into()));
        }
        if self.protected_row >= u || self.outcome_location >= u {
            return Err(ForgeError::OutOfRange("protected/outcome index".into()));
        }
        for &(l, j) in &self.feature_locations {
            if l == 0 || l >= h || j >= u || (l == h - 1 && j == self.outcome_location) {
                return Err(ForgeError::OutOfRange(format!("feature location ({l}, {j})")));
            }
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(ForgeError::OutOfRange("noise std".into()));
        }
        Ok(())
    }

    /// Layer-0 values for one sample: the exogenous draws with the protected
    /// slot replaced by `a_0`/`a_1`.
    fn input_layer(&self, exogenous: ArrayView1<f64>, a: u8) -> Array1<f64> {
        let mut x0 = exogenous.to_owned();
        x0[self.protected_row] = if a == 1 { self.protected_values.1 } else { self.protected_values.0 };
        x0
    }
}

pub fn sample_scm(config: &PriorConfig, seed: u64) -> Result<ScmSpec> {
    config.validate()?;
    let (u, h, m) = (config.num_exogenous, config.depth, config.num_features);
    let mut rng = stream(seed, 0x5C3);
    let scale = 1.0 / (u as f64).sqrt();
    let weights = Array3::from_shape_simple_fn((u, u, h - 1), || rng.sample::<f64, _>(StandardNormal) * scale);
    let density = log_uniform(&mut rng, config.sparsity_log_range.0, config.sparsity_log_range.1);
    let keep = Bernoulli::new(density.clamp(0.0, 1.0)).map_err(|e| ForgeError::Config(e.to_string()))?;
    let masks = Array3::from_shape_simple_fn((u, u, h - 1), || u8::from(keep.sample(&mut rng)));
    let mut nonlinearities = vec![Nonlinearity::Identity];
    for _ in 1..h {
        nonlinearities.push(config.nonlinearities[rng.gen_range(0..config.nonlinearities.len())]);
    }
    let protected_row = rng.gen_range(0..u);
    let q: f64 = rng.gen_range(0.2..=0.8);
    let protected_threshold = Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(q);
    let protected_values = (rng.sample(StandardNormal), rng.sample(StandardNormal));

    let outcome_location = rng.gen_range(0..u);
    let first = first_feature_layer(h);
    let candidates: Vec<(usize, usize)> = (first..h)
        .flat_map(|l| (0..u).map(move |j| (l, j)))
        .filter(|&(l, j)| !(l == h - 1 && j == outcome_location))
        .collect();
    let feature_locations = sample_indices(&mut rng, candidates.len(), m)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let (qlo, qhi) = config.outcome_quantile_range;
    let outcome_quantile = rng.gen_range(qlo..=qhi);
    let noise_std = log_uniform(&mut rng, config.noise_std_range.0, config.noise_std_range.1);

    let scm = ScmSpec {
        num_exogenous: u,
        depth: h,
        weights,
        masks,
        nonlinearities,
        density,
        protected_row,
        protected_threshold,
        protected_values,
        feature_locations,
        outcome_location,
        outcome_quantile,
        outcome_threshold: None,
        noise_std,
    };
    scm.validate()?;
    Ok(scm)
}

/// Runs one sample through the MLP and returns all layer activations
/// (`U × H`, column `i` is layer `i`).
///
/// With `protected_masked` set, the protected node's outgoing weights into
/// layer 1 are treated as zero; nothing else changes.
pub fn forward_pass(
    scm: &ScmSpec,
    exogenous: ArrayView1<f64>,
    noise: ArrayView2<f64>,
    protected_masked: bool,
) -> Result<Array2<f64>> {
    let (u, h) = (scm.num_exogenous, scm.depth);
    if exogenous.len() != u || noise.dim() != (u, h) {
        return Err(ForgeError::Dimension(format!(
            "exogenous {} / noise {:?}, expected {u} / ({u}, {h})",
            exogenous.len(),
            noise.dim()
        )));
    }
    if scm.weights.dim() != (u, u, h - 1) || scm.masks.dim() != (u, u, h - 1) {
        return Err(ForgeError::Dimension("scm tensors do not match U and H".into()));
    }
    if noise.iter().chain(exogenous.iter()).any(|v| !v.is_finite()) {
        return Err(ForgeError::Numeric { layer: "input".into() });
    }
    let mut out = Array2::zeros((u, h));
    out.column_mut(0).assign(&exogenous);
    for layer in 1..h {
        let z = scm.nonlinearities[layer];
        for j in 0..u {
            let mut s = 0.0;
            for r in 0..u {
                if protected_masked && layer == 1 && r == scm.protected_row {
                    continue;
                }
                if scm.masks[[r, j, layer - 1]] == 1 {
                    s += scm.weights[[r, j, layer - 1]] * out[[r, layer - 1]];
                }
            }
            let v = z.apply(s + noise[[j, layer]]);
            if !v.is_finite() {
                return Err(ForgeError::Numeric { layer: format!("layer {layer}") });
            }
            out[[j, layer]] = v;
        }
    }
    Ok(out)
}

/// Exogenous and noise draws behind a [`PriorSample`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraws {
    /// `n × U`; the protected column holds the continuous pre-binarization draw.
    pub exogenous: Array2<f64>,
    /// `n × U × H`.
    pub noise: Array3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSample {
    pub dataset: TabularDataset,
    pub y_fair: Vec<u8>,
    pub scm: ScmSpec,
    pub noise_draws: NoiseDraws,
}

/// Latent features/outcomes of every sample under a given protected vector.
struct Propagated {
    features: Array2<f64>,
    latent: Vec<f64>,
}

fn propagate(scm: &ScmSpec, draws: &NoiseDraws, a: &[u8], masked: bool) -> Result<Propagated> {
    let n = a.len();
    let m = scm.feature_locations.len();
    let mut features = Array2::zeros((n, m));
    let mut latent = Vec::with_capacity(n);
    for i in 0..n {
        let x0 = scm.input_layer(draws.exogenous.row(i), a[i]);
        let acts = forward_pass(scm, x0.view(), draws.noise.index_axis(Axis(0), i), masked)?;
        for (f, &(l, j)) in scm.feature_locations.iter().enumerate() {
            features[[i, f]] = acts[[j, l]].clamp(-ACTIVATION_CLIP, ACTIVATION_CLIP);
        }
        latent.push(acts[[scm.outcome_location, scm.depth - 1]].clamp(-ACTIVATION_CLIP, ACTIVATION_CLIP));
    }
    Ok(Propagated { features, latent })
}

fn binarize(latent: &[f64], threshold: f64) -> Vec<u8> {
    latent.iter().map(|&v| u8::from(v >= threshold)).collect()
}

/// Shared outcome threshold: the `q`-quantile of the pooled biased and fair
/// latents, with `q` redrawn from `[0.2, 0.8]` until both label vectors have
/// both classes or `budget` tries are spent.
fn pick_outcome_threshold<R: Rng>(
    rng: &mut R,
    biased: &[f64],
    fair: &[f64],
    first_q: f64,
    budget: usize,
) -> Option<(f64, f64, Vec<u8>, Vec<u8>)> {
    let mut pooled: Vec<f64> = biased.iter().chain(fair).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut q = first_q;
    for _ in 0..budget {
        let y_t = quantile_sorted(&pooled, q);
        let y_bias = binarize(biased, y_t);
        let y_fair = binarize(fair, y_t);
        if has_both_classes(&y_bias) && has_both_classes(&y_fair) {
            return Some((y_t, q, y_bias, y_fair));
        }
        q = rng.gen_range(0.2..=0.8);
    }
    None
}

/// Draws `n` samples from `scm`, runs the biased and the protected-masked
/// pass on the same draws, and binarizes A and both outcomes.
pub fn generate_pair(scm: &ScmSpec, n: usize, seed: u64) -> Result<PriorSample> {
    if n < 2 {
        return Err(ForgeError::Config("n must be at least 2".into()));
    }
    scm.validate()?;
    let (u, h) = (scm.num_exogenous, scm.depth);
    let mut rng = stream(seed, 0xD47A);
    let exogenous = Array2::from_shape_simple_fn((n, u), || rng.sample::<f64, _>(StandardNormal));
    let sigma = scm.noise_std;
    let mut noise = Array3::from_shape_simple_fn((n, u, h), || rng.sample::<f64, _>(StandardNormal) * sigma);
    noise.index_axis_mut(Axis(2), 0).fill(0.0);
    let draws = NoiseDraws { exogenous, noise };

    let mut raw_a: Vec<f64> = draws.exogenous.column(scm.protected_row).to_vec();
    raw_a.sort_by(f64::total_cmp);

    let mut scm = scm.clone();
    let mut attempts = 0;
    let mut a_threshold = scm.protected_threshold;
    let y_quantile = scm.outcome_quantile;
    while attempts < MAX_THRESHOLD_ATTEMPTS {
        attempts += 1;
        let a: Vec<u8> = draws
            .exogenous
            .column(scm.protected_row)
            .iter()
            .map(|&v| u8::from(v > a_threshold))
            .collect();
        if !has_both_classes(&a) {
            a_threshold = quantile_sorted(&raw_a, rng.gen_range(0.2..=0.8));
            continue;
        }
        let biased = propagate(&scm, &draws, &a, false)?;
        let fair = propagate(&scm, &draws, &a, true)?;
        let budget = MAX_THRESHOLD_ATTEMPTS + 1 - attempts;
        let found = pick_outcome_threshold(&mut rng, &biased.latent, &fair.latent, y_quantile, budget);
        match found {
            Some((y_t, q, y_bias, y_fair)) => {
                scm.protected_threshold = a_threshold;
                scm.outcome_quantile = q;
                scm.outcome_threshold = Some(y_t);
                let dataset = TabularDataset::new(a, biased.features, y_bias)?;
                return Ok(PriorSample { dataset, y_fair, scm, noise_draws: draws });
            }
            None => break,
        }
    }
    Err(ForgeError::DegenerateSample {
        attempts: MAX_THRESHOLD_ATTEMPTS,
        what: "constant protected or outcome column".into(),
    })
}

impl PriorSample {
    fn threshold(&self) -> f64 {
        self.scm.outcome_threshold.unwrap_or(f64::NAN)
    }

    /// Features and outcome labels with the protected column forced to `a`
    /// (same draws), optionally through the masked (fair) pass.
    pub fn intervene(&self, a: &[u8], masked: bool) -> Result<(Array2<f64>, Vec<u8>)> {
        crate::error::ensure_len(a.len(), self.dataset.n_rows())?;
        let p = propagate(&self.scm, &self.noise_draws, a, masked)?;
        Ok((p.features, binarize(&p.latent, self.threshold())))
    }

    /// The counterfactual twin: every A flipped, features and outcome
    /// re-propagated through the biased pass with identical draws.
    pub fn counterfactual(&self) -> Result<TabularDataset> {
        let flipped: Vec<u8> = self.dataset.a.iter().map(|&v| 1 - v).collect();
        let (x, y) = self.intervene(&flipped, false)?;
        TabularDataset::new(flipped, x, y)
    }

    /// Mean over samples of `y_bias(do A=1) − y_bias(do A=0)`.
    pub fn base_ate(&self) -> Result<f64> {
        let n = self.dataset.n_rows();
        let (_, y1) = self.intervene(&vec![1; n], false)?;
        let (_, y0) = self.intervene(&vec![0; n], false)?;
        let s: f64 = y1.iter().zip(&y0).map(|(&p, &q)| f64::from(p) - f64::from(q)).sum();
        Ok(s / n as f64)
    }

    /// Drops the noise record (for compact serialization).
    pub fn without_noise(&self) -> PriorSample {
        PriorSample {
            noise_draws: NoiseDraws { exogenous: Array2::zeros((0, 0)), noise: Array3::zeros((0, 0, 0)) },
            ..self.clone()
        }
    }
}

/// Draws `batch_size` independent prior samples. Element `i` uses its own
/// derived seed, so the batch is reproducible regardless of scheduling.
pub fn sample_prior_batch(config: &PriorConfig, batch_size: usize, seed: u64) -> Result<Vec<PriorSample>> {
    if batch_size == 0 {
        return Err(ForgeError::Config("batch_size must be at least 1".into()));
    }
    config.validate()?;
    (0..batch_size as u64)
        .into_par_iter()
        .map(|i| sample_one(config, derive_seed(seed, i)))
        .collect()
}

/// Draws a single prior sample from `seed`, redrawing the SCM on degenerate
/// or numerically failed draws.
pub fn sample_one(config: &PriorConfig, seed: u64) -> Result<PriorSample> {
    let mut last = None;
    for attempt in 0..MAX_BATCH_RETRIES as u64 {
        let s = derive_seed(seed, attempt);
        let (cfg, n) = element_config(config, s);
        let outcome = sample_scm(&cfg, s).and_then(|scm| generate_pair(&scm, n, s));
        match outcome {
            Ok(sample) => return Ok(sample),
            Err(e @ (ForgeError::DegenerateSample { .. } | ForgeError::Numeric { .. })) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| ForgeError::DegenerateSample { attempts: 0, what: "no attempt".into() }))
}

fn element_config(config: &PriorConfig, seed: u64) -> (PriorConfig, usize) {
    let Some(v) = &config.vary else {
        return (config.clone(), config.num_samples);
    };
    let mut rng = stream(seed, 0x5A3E);
    let u = rng.gen_range(v.exogenous.0..=v.exogenous.1);
    let h = rng.gen_range(v.depth.0..=v.depth.1);
    let cap = available_features(u, h).max(1);
    let m = rng.gen_range(v.features.0.min(cap)..=v.features.1.min(cap));
    let n = log_uniform_int(&mut rng, v.samples.0, v.samples.1);
    let cfg = PriorConfig { num_exogenous: u, depth: h, num_features: m, num_samples: n, vary: None, ..config.clone() };
    (cfg, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    fn dense_config() -> PriorConfig {
        PriorConfig { sparsity_log_range: (1.0, 1.0), ..PriorConfig::default() }
    }

    #[test]
    fn weight_tensor_shape_follows_width_and_depth() {
        let cfg = PriorConfig { num_exogenous: 4, depth: 3, num_features: 2, ..PriorConfig::default() };
        let scm = sample_scm(&cfg, 1).unwrap();
        assert_eq!(scm.weights.dim(), (4, 4, 2));
        assert_eq!(scm.masks.dim(), (4, 4, 2));
        assert_eq!(scm.nonlinearities.len(), 3);
        assert!(scm.feature_locations.iter().all(|&(l, _)| l == 2));
    }

    #[test]
    fn full_density_keeps_every_edge() {
        let scm = sample_scm(&dense_config(), 3).unwrap();
        assert!(scm.masks.iter().all(|&m| m == 1));
    }

    #[test]
    fn depth_two_falls_back_to_first_hidden_layer() {
        let cfg = PriorConfig { depth: 2, num_exogenous: 3, num_features: 2, ..PriorConfig::default() };
        let scm = sample_scm(&cfg, 9).unwrap();
        assert!(scm.feature_locations.iter().all(|&(l, _)| l == 1));
    }

    #[test]
    fn invalid_ranges_are_configuration_errors() {
        let bad = [
            PriorConfig { sparsity_log_range: (0.9, 0.1), ..PriorConfig::default() },
            PriorConfig { noise_std_range: (0.0, 1.0), ..PriorConfig::default() },
            PriorConfig { num_exogenous: 1, ..PriorConfig::default() },
            PriorConfig { depth: 1, ..PriorConfig::default() },
            PriorConfig { num_features: 100, ..PriorConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(sample_scm(&cfg, 0), Err(ForgeError::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = PriorConfig::default();
        assert_eq!(sample_scm(&cfg, 42).unwrap(), sample_scm(&cfg, 42).unwrap());
        assert_ne!(sample_scm(&cfg, 42).unwrap(), sample_scm(&cfg, 43).unwrap());
    }

    fn scalar_scm(w: f64, z: Nonlinearity) -> ScmSpec {
        ScmSpec {
            num_exogenous: 1,
            depth: 2,
            weights: Array::from_elem((1, 1, 1), w),
            masks: Array::from_elem((1, 1, 1), 1),
            nonlinearities: vec![Nonlinearity::Identity, z],
            density: 1.0,
            protected_row: 0,
            protected_threshold: 0.0,
            protected_values: (0.0, 1.0),
            feature_locations: vec![],
            outcome_location: 0,
            outcome_quantile: 0.5,
            outcome_threshold: None,
            noise_std: 1.0,
        }
    }

    #[test]
    fn single_unit_layer_evaluates_directly() {
        let scm = scalar_scm(1.0, Nonlinearity::Identity);
        let acts = forward_pass(&scm, array![2.0].view(), array![[0.0, 0.5]].view(), false).unwrap();
        assert_eq!(acts, array![[2.0, 2.5]]);
    }

    #[test]
    fn zero_weights_and_noise_give_zero_activations() {
        let cfg = PriorConfig { nonlinearities: vec![Nonlinearity::Identity], ..PriorConfig::default() };
        let mut scm = sample_scm(&cfg, 5).unwrap();
        scm.weights.fill(0.0);
        let u = scm.num_exogenous;
        let acts = forward_pass(&scm, Array1::zeros(u).view(), Array2::zeros((u, scm.depth)).view(), false).unwrap();
        assert!(acts.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_unit_tanh_matches_hand_evaluation() {
        // Independent scalar evaluation of a 2-wide, 3-layer network.
        let mut scm = scalar_scm(0.0, Nonlinearity::Tanh);
        scm.num_exogenous = 2;
        scm.depth = 3;
        scm.weights = Array::from_shape_vec((2, 2, 2), vec![0.3, -1.2, 0.7, 0.4, 1.5, -0.8, 0.25, 0.9]).unwrap();
        scm.masks = Array::from_shape_vec((2, 2, 2), vec![1, 1, 0, 1, 1, 1, 1, 0]).unwrap();
        scm.nonlinearities = vec![Nonlinearity::Identity, Nonlinearity::Tanh, Nonlinearity::Tanh];
        let x = [0.6, -1.1];
        let e = [[0.0, 0.1, -0.2], [0.0, 0.05, 0.3]];
        // weights[[r, j, l]] flattened as r*4 + j*2 + l
        let w = |r: usize, j: usize, l: usize| scm.weights[[r, j, l]] * f64::from(scm.masks[[r, j, l]]);
        let h1_0 = (w(0, 0, 0) * x[0] + w(1, 0, 0) * x[1] + e[0][1]).tanh();
        let h1_1 = (w(0, 1, 0) * x[0] + w(1, 1, 0) * x[1] + e[1][1]).tanh();
        let h2_0 = (w(0, 0, 1) * h1_0 + w(1, 0, 1) * h1_1 + e[0][2]).tanh();
        let h2_1 = (w(0, 1, 1) * h1_0 + w(1, 1, 1) * h1_1 + e[1][2]).tanh();
        let noise = array![[e[0][0], e[0][1], e[0][2]], [e[1][0], e[1][1], e[1][2]]];
        let acts = forward_pass(&scm, array![x[0], x[1]].view(), noise.view(), false).unwrap();
        for (got, want) in [acts[[0, 1]], acts[[1, 1]], acts[[0, 2]], acts[[1, 2]]]
            .iter()
            .zip([h1_0, h1_1, h2_0, h2_1])
        {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let scm = sample_scm(&PriorConfig::default(), 1).unwrap();
        let r = forward_pass(&scm, Array1::zeros(3).view(), Array2::zeros((5, 3)).view(), false);
        assert!(matches!(r, Err(ForgeError::Dimension(_))));
    }

    #[test]
    fn overflow_names_the_layer() {
        let mut scm = scalar_scm(1e300, Nonlinearity::Identity);
        scm.depth = 3;
        scm.weights = Array::from_elem((1, 1, 2), 1e300);
        scm.masks = Array::from_elem((1, 1, 2), 1);
        scm.nonlinearities = vec![Nonlinearity::Identity; 3];
        let r = forward_pass(&scm, array![1e10].view(), Array2::zeros((1, 3)).view(), false);
        match r {
            Err(ForgeError::Numeric { layer }) => assert_eq!(layer, "layer 1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn masking_a_zero_row_is_the_identity() {
        let mut scm = sample_scm(&dense_config(), 11).unwrap();
        let k = scm.protected_row;
        for j in 0..scm.num_exogenous {
            scm.weights[[k, j, 0]] = 0.0;
        }
        let s = generate_pair(&scm, 300, 4).unwrap();
        assert_eq!(s.dataset.y, s.y_fair);
    }

    #[test]
    fn generated_pairs_satisfy_sample_invariants() {
        let cfg = PriorConfig::default();
        for seed in 0..20 {
            let scm = sample_scm(&cfg, seed).unwrap();
            let s = generate_pair(&scm, 200, seed).unwrap();
            s.dataset.validate().unwrap();
            assert_eq!(s.y_fair.len(), 200);
            assert!(has_both_classes(&s.dataset.a));
            assert!(has_both_classes(&s.dataset.y));
            assert!(has_both_classes(&s.y_fair));
            assert_eq!(s.noise_draws.noise.dim(), (200, scm.num_exogenous, scm.depth));
        }
    }

    #[test]
    fn constant_latent_exhausts_the_threshold_budget() {
        let mut rng = stream(0, 0);
        let constant = vec![0.25; 40];
        let varied: Vec<f64> = (0..40).map(f64::from).collect();
        assert!(pick_outcome_threshold(&mut rng, &varied, &constant, 0.5, MAX_THRESHOLD_ATTEMPTS).is_none());
        let found = pick_outcome_threshold(&mut rng, &varied, &varied, 0.5, MAX_THRESHOLD_ATTEMPTS).unwrap();
        assert_eq!(found.2, found.3);
    }

    #[test]
    fn n_below_two_is_rejected() {
        let scm = sample_scm(&PriorConfig::default(), 2).unwrap();
        assert!(generate_pair(&scm, 1, 0).is_err());
    }

    #[test]
    fn batch_is_reproducible_with_distinct_elements() {
        let cfg = PriorConfig {
            vary: Some(PriorRanges { exogenous: (3, 6), depth: (2, 4), features: (1, 5), samples: (50, 200) }),
            ..PriorConfig::default()
        };
        let a = sample_prior_batch(&cfg, 8, 77).unwrap();
        let b = sample_prior_batch(&cfg, 8, 77).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
        for i in 0..8 {
            for j in (i + 1)..8 {
                assert_ne!(a[i].dataset, a[j].dataset);
            }
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(sample_prior_batch(&PriorConfig::default(), 0, 1).is_err());
    }
}
