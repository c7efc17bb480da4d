//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use forge_core::model::{
    init_params, loss_and_grads, param_layout, train_step, training_example, AdamState, ContextBatch, FairPfn,
    ModelConfig, PreparedBatch,
};
use forge_core::rng::stream;
use forge_core::scm_prior::{sample_one, PriorConfig, PriorRanges};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn tiny_prior() -> PriorConfig {
    PriorConfig {
        num_exogenous: 4,
        depth: 3,
        num_features: 3,
        num_samples: 40,
        vary: Some(PriorRanges { exogenous: (3, 4), depth: (2, 3), features: (1, 3), samples: (30, 50) }),
        ..PriorConfig::default()
    }
}

pub fn random_batch(seed: u64, n_ctx: usize, n_query: usize, m: usize) -> ContextBatch {
    let mut rng = stream(seed, 1);
    let mut normal = |r: usize| Array2::from_shape_simple_fn((r, m), || rng.sample::<f64, _>(StandardNormal));
    let context_features = normal(n_ctx);
    let query_features = normal(n_query);
    let mut rng = stream(seed, 2);
    let mut bits = |k: usize| (0..k).map(|_| u8::from(rng.gen::<bool>())).collect::<Vec<u8>>();
    ContextBatch {
        context_features,
        context_protected: bits(n_ctx),
        context_labels: bits(n_ctx),
        query_features,
        query_protected: bits(n_query),
    }
}

/// Miniature model: embed 8, one layer.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig { embed_dim: 8, num_layers: 1, num_heads: 2, ff_dim: 16, max_features: 4, ..ModelConfig::tiny() }
}

/// Relative error between the tape gradient and central differences
/// (step 1e-4), per parameter tensor, in f64.
pub fn finite_difference_errors() -> Vec<(String, f64)> {
    let cfg = grad_check_config();
    let params: Vec<Array2<f64>> = init_params(&cfg);
    let batch = random_batch(11, 7, 5, 3);
    let prepared: PreparedBatch<f64> = PreparedBatch::from_rows(&batch, 0..5, &cfg).unwrap();
    let targets = [1.0, 0.0, 0.0, 1.0, 1.0];
    let (_, analytic) = loss_and_grads(&cfg, &params, &prepared, &targets).unwrap();
    let h = 1e-4;
    let loss_at = |p: &[Array2<f64>]| loss_and_grads(&cfg, p, &prepared, &targets).unwrap().0;
    let norm = |a: &Array2<f64>| a.mapv(|v| v * v).sum().sqrt();
    param_layout(&cfg)
        .iter()
        .enumerate()
        .map(|(k, (name, _))| {
            let mut numeric = Array2::zeros(params[k].raw_dim());
            for idx in ndarray::indices(params[k].raw_dim()) {
                let mut up = params.clone();
                up[k][idx] += h;
                let mut down = params.clone();
                down[k][idx] -= h;
                numeric[idx] = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
            }
            let diff = norm(&(&analytic[k] - &numeric));
            let scale = norm(&analytic[k]).max(norm(&numeric));
            (name.clone(), if scale < 1e-12 { diff } else { diff / scale })
        })
        .collect()
}

/// First and last loss of 200 Adam steps on one repeated batch.
pub fn overfit_run(seed: u64) -> (f64, f64) {
    let cfg = ModelConfig { seed, learning_rate: 3e-3, noise_protected_prob: 0.0, ..grad_check_config() };
    let sample = sample_one(&tiny_prior(), seed).unwrap();
    let ex = training_example(&sample, &cfg, seed).unwrap();
    let mut model = FairPfn::new(cfg.clone()).unwrap();
    let mut opt = AdamState::zeros_like(&model.params);
    let batch = [ex];
    let first = train_step(&mut model.params, &mut opt, &batch, &cfg).unwrap().loss;
    for _ in 1..199 {
        train_step(&mut model.params, &mut opt, &batch, &cfg).unwrap();
    }
    let last = train_step(&mut model.params, &mut opt, &batch, &cfg).unwrap().loss;
    (first, last)
}

/// Seeds out of 20 whose repeated-batch loss ends below where it started.
pub fn overfit_seeds_decreasing() -> usize {
    (0..20u64)
        .filter(|&s| {
            let (first, last) = overfit_run(s);
            last < first
        })
        .count()
}

pub fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut total) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            total += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / total
}

pub fn tau_b_pairs(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            match (x[i] == x[j], y[i] == y[j]) {
                (true, true) => {}
                (true, false) => tx += 1,
                (false, true) => ty += 1,
                _ if (x[i] < x[j]) == (y[i] < y[j]) => c += 1,
                _ => d += 1,
            }
        }
    }
    let n1 = (c + d + tx) as f64;
    let n2 = (c + d + ty) as f64;
    (c - d) as f64 / (n1 * n2).sqrt()
}

pub fn pareto_pairs(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(a, b)| !points.iter().any(|&(c, d)| c <= a && d <= b && (c < a || d < b)))
        .collect()
}

/// Mean midrank per row of `table[method][dataset]`, by pair counting.
pub fn ranks_pairs(table: &[Vec<f64>]) -> Vec<f64> {
    let d = table[0].len();
    table
        .iter()
        .map(|row| {
            let mut s = 0.0;
            for j in 0..d {
                let below = table.iter().filter(|r| r[j] < row[j]).count() as f64;
                let ties = table.iter().filter(|r| r[j] == row[j]).count() as f64;
                s += below + (ties + 1.0) / 2.0;
            }
            s / d as f64
        })
        .collect()
}

/// One of `levels` evenly spaced values in `[0, 1]`, so ties are common.
pub fn coarse<R: Rng>(rng: &mut R, levels: u32) -> f64 {
    f64::from(rng.gen_range(0..levels)) / f64::from(levels - 1)
}
