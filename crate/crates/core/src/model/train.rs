use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{forward_logits, loss_and_grads, PreparedBatch};
use super::tape::{sigmoid, PROB_CLAMP};
use super::{ContextBatch, FairPfn, ModelCheckpoint, ModelConfig};
use crate::error::{ForgeError, Result};
use crate::rng::{derive_seed, stream};
use crate::scm_prior::{sample_one, PriorConfig, PriorSample};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.99;
const ADAM_EPS: f64 = 1e-8;
const SPLIT_RANGE: (f64, f64) = (0.5, 0.8);

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub batch: PreparedBatch<f32>,
    pub targets: Vec<f32>,
    /// True when the protected slot holds a coin flip and targets are biased.
    pub noise_protected: bool,
}

/// Splits a prior draw into context and query rows with a split fraction
/// drawn from `U(0.5, 0.8)`. Context labels are the observed outcome, query
/// targets the fair outcome.
pub fn training_example(sample: &PriorSample, config: &ModelConfig, seed: u64) -> Result<TrainingExample> {
    let mut rng = stream(seed, 0x7A1);
    let ds = &sample.dataset;
    let n = ds.n_rows();
    if n < 2 {
        return Err(ForgeError::Empty("prior sample needs at least two rows".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let frac = rng.gen_range(SPLIT_RANGE.0..SPLIT_RANGE.1);
    let n_ctx = ((frac * n as f64).round() as usize).clamp(1, n - 1).min(config.max_rows);
    let n_query = (n - n_ctx).min(config.max_rows);
    let (ctx_rows, query_rows) = (&order[..n_ctx], &order[n_ctx..n_ctx + n_query]);

    let noise_protected = rng.gen_bool(config.noise_protected_prob);
    let (x, protected, targets): (Array2<f64>, Vec<u8>, &[u8]) = if noise_protected {
        let a_col = Array2::from_shape_fn((n, 1), |(i, _)| f64::from(ds.a[i]));
        let x = concatenate![Axis(1), ds.x.view(), a_col.view()];
        (x, (0..n).map(|_| u8::from(rng.gen::<bool>())).collect(), &ds.y)
    } else {
        (ds.x.clone(), ds.a.clone(), &sample.y_fair)
    };
    let pick = |rows: &[usize]| x.select(Axis(0), rows);
    let batch = ContextBatch {
        context_features: pick(ctx_rows),
        context_protected: ctx_rows.iter().map(|&i| protected[i]).collect(),
        context_labels: ctx_rows.iter().map(|&i| ds.y[i]).collect(),
        query_features: pick(query_rows),
        query_protected: query_rows.iter().map(|&i| protected[i]).collect(),
    };
    Ok(TrainingExample {
        batch: PreparedBatch::from_rows(&batch, 0..n_query, config)?,
        targets: query_rows.iter().map(|&i| f32::from(targets[i])).collect(),
        noise_protected,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Array2<f32>>,
    pub v: Vec<Array2<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Array2<f32>]) -> Self {
        let z: Vec<Array2<f32>> = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        AdamState { m: z.clone(), v: z, t: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

/// One Adam update on the mean loss over `examples`. A non-finite loss or
/// gradient leaves parameters and moments untouched and reports `skipped`.
pub fn train_step(
    params: &mut [Array2<f32>],
    opt: &mut AdamState,
    examples: &[TrainingExample],
    config: &ModelConfig,
) -> Result<StepOutcome> {
    if examples.is_empty() {
        return Err(ForgeError::Empty("training batch".into()));
    }
    let results: Vec<Result<(f32, Vec<Array2<f32>>)>> = examples
        .par_iter()
        .map(|ex| loss_and_grads(config, params, &ex.batch, &ex.targets))
        .collect();
    let mut loss = 0.0f64;
    let mut grads: Option<Vec<Array2<f32>>> = None;
    for r in results {
        let (l, g) = match r {
            Ok(v) => v,
            Err(ForgeError::Numeric { .. }) => return Ok(StepOutcome { loss: f64::NAN, grad_norm: f64::NAN, skipped: true }),
            Err(e) => return Err(e),
        };
        loss += f64::from(l);
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        }
    }
    let k = examples.len() as f32;
    let mut grads = grads.expect("non-empty batch");
    grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v / k));
    loss /= examples.len() as f64;
    let norm = grads.iter().flat_map(|g| g.iter()).map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    if !loss.is_finite() || !norm.is_finite() {
        return Ok(StepOutcome { loss, grad_norm: norm, skipped: true });
    }
    if norm > config.grad_clip {
        let s = (config.grad_clip / norm) as f32;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    opt.t += 1;
    let t = opt.t as i32;
    let c1 = (1.0 - BETA1.powi(t)) as f32;
    let c2 = (1.0 - BETA2.powi(t)) as f32;
    let (b1, b2, eps, lr) = (BETA1 as f32, BETA2 as f32, ADAM_EPS as f32, config.learning_rate as f32);
    for ((p, g), (m, v)) in params.iter_mut().zip(&grads).zip(opt.m.iter_mut().zip(opt.v.iter_mut())) {
        m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
        v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        if lr > 0.0 {
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
    Ok(StepOutcome { loss, grad_norm: norm, skipped: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where periodic checkpoints and `loss.csv` go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Steps between periodic checkpoints (0 disables them).
    pub checkpoint_every: usize,
    /// Steps between progress lines on stderr (0 silences them).
    pub log_every: usize,
    /// Stop after this many steps in this call, even if the schedule has more.
    pub max_steps_this_run: Option<usize>,
}

fn max_prior_features(prior: &PriorConfig) -> usize {
    prior.vary.as_ref().map_or(prior.num_features, |r| r.features.1.max(prior.num_features))
}

/// Training examples consumed at global step `step`.
pub fn step_examples(config: &ModelConfig, prior: &PriorConfig, step: usize) -> Result<Vec<TrainingExample>> {
    let step_seed = derive_seed(config.seed ^ 0x5EED_7A11, step as u64);
    (0..config.batch_datasets)
        .into_par_iter()
        .map(|b| {
            let seed = derive_seed(step_seed, b as u64);
            let sample = sample_one(prior, seed)?;
            training_example(&sample, config, derive_seed(seed, 1))
        })
        .collect()
}

/// Runs the full `epochs × steps` schedule from a fresh initialization.
pub fn pretrain(config: &ModelConfig, prior: &PriorConfig, options: &TrainOptions) -> Result<(ModelCheckpoint, Vec<LossRecord>)> {
    let model = FairPfn::new(config.clone())?;
    let ckpt = ModelCheckpoint::fresh(model, prior.clone());
    resume(ckpt, options)
}

/// Continues a checkpoint's schedule from `steps_completed`. Each step draws
/// its datasets from a seed derived from the step index, so an interrupted
/// and resumed run follows the same loss sequence as an uninterrupted one.
pub fn resume(mut ckpt: ModelCheckpoint, options: &TrainOptions) -> Result<(ModelCheckpoint, Vec<LossRecord>)> {
    let config = ckpt.config.clone();
    config.validate()?;
    ckpt.prior_config.validate()?;
    let needed = max_prior_features(&ckpt.prior_config) + 1;
    if needed > config.max_features {
        return Err(ForgeError::Config(format!(
            "prior can emit {} features plus the moved protected column, above max_features {}",
            needed - 1,
            config.max_features
        )));
    }
    if let Some(dir) = &options.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let total = config.total_steps();
    let start = ckpt.provenance.steps_completed;
    let end = options.max_steps_this_run.map_or(total, |k| (start + k).min(total));
    let mut log = Vec::with_capacity(end.saturating_sub(start));
    let mut running = None::<f64>;
    for step in start..end {
        let examples = step_examples(&config, &ckpt.prior_config, step)?;
        let outcome = train_step(&mut ckpt.params, &mut ckpt.adam, &examples, &config)?;
        let prov = &mut ckpt.provenance;
        prov.steps_completed = step + 1;
        prov.datasets_seen += examples.len() as u64;
        if outcome.skipped {
            prov.skipped_steps += 1;
        } else {
            prov.final_loss = Some(outcome.loss);
            running = Some(running.map_or(outcome.loss, |r| 0.99 * r + 0.01 * outcome.loss));
        }
        log.push(LossRecord { step, loss: outcome.loss, skipped: outcome.skipped });
        if options.log_every > 0 && (step + 1) % options.log_every == 0 {
            eprintln!("step {}/{total} loss {:.4} avg {:.4}", step + 1, outcome.loss, running.unwrap_or(f64::NAN));
        }
        if let Some(dir) = &options.checkpoint_dir {
            if options.checkpoint_every > 0 && (step + 1) % options.checkpoint_every == 0 {
                ckpt.save(&dir.join("checkpoint.bin"))?;
                append_log(dir, &log[log.len() - options.checkpoint_every.min(log.len())..])?;
            }
        }
    }
    if let Some(dir) = &options.checkpoint_dir {
        ckpt.save(&dir.join("checkpoint.bin"))?;
        let every = options.checkpoint_every;
        let unsaved = if every > 0 { log.len() % every } else { log.len() };
        append_log(dir, &log[log.len() - unsaved..])?;
    }
    Ok((ckpt, log))
}

fn append_log(dir: &std::path::Path, records: &[LossRecord]) -> Result<()> {
    let path = dir.join("loss.csv");
    let fresh = !path.exists();
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(file, "step,loss")?;
    }
    for r in records {
        writeln!(file, "{},{}", r.step, r.loss)?;
    }
    Ok(())
}

/// Mean query BCE against fair targets over `count` fresh prior draws.
pub fn heldout_loss(model: &FairPfn, prior: &PriorConfig, count: usize, seed: u64) -> Result<f64> {
    let config = ModelConfig { noise_protected_prob: 0.0, ..model.config.clone() };
    let losses: Vec<f64> = (0..count)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let sample = sample_one(prior, s)?;
            let ex = training_example(&sample, &config, derive_seed(s, 1))?;
            let logits = forward_logits(&config, &model.params, &ex.batch)?;
            Ok(bce(&logits, &ex.targets))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / count.max(1) as f64)
}

fn bce(logits: &[f32], targets: &[f32]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            let p = f64::from(sigmoid(f64::from(z))).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let y = f64::from(y);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / logits.len() as f64
}
