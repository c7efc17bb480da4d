//! Row-tokenized in-context transformer that maps a labelled biased context
//! to fair predictions for query rows.

mod checkpoint;
mod net;
pub mod tape;
mod train;

use ndarray::{Array2, NdFloat};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::TabularDataset;
use crate::error::{ForgeError, Result};
use crate::rng::stream;

pub use checkpoint::{ModelCheckpoint, Provenance, CHECKPOINT_VERSION};
pub use net::{embed, forward_logits, loss_and_grads, PreparedBatch};
pub use train::{
    heldout_loss, pretrain, resume, step_examples, train_step, training_example, AdamState, LossRecord, StepOutcome, TrainOptions,
    TrainingExample,
};

/// Standardized feature values are clipped to this many context std devs.
pub const FEATURE_CLIP: f64 = 6.0;
/// Queries are run in chunks of this many rows at inference.
pub const QUERY_CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_features: usize,
    pub max_rows: usize,
    pub learning_rate: f64,
    /// Prior datasets per optimizer step.
    pub batch_datasets: usize,
    pub steps: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Chance that a training dataset swaps its protected column for a coin
    /// flip and moves A among the features, with biased targets.
    #[serde(default = "default_noise_protected")]
    pub noise_protected_prob: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

fn default_noise_protected() -> f64 {
    0.2
}

fn default_clip() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ff_dim: 128,
            max_features: 16,
            max_rows: 1024,
            learning_rate: 3e-4,
            batch_datasets: 4,
            steps: 12_500,
            epochs: 1,
            seed: 0,
            noise_protected_prob: default_noise_protected(),
            grad_clip: default_clip(),
        }
    }
}

impl ModelConfig {
    /// A miniature configuration for tests.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 16,
            max_features: 4,
            max_rows: 64,
            batch_datasets: 1,
            steps: 1,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("max_features", self.max_features),
            ("max_rows", self.max_rows),
            ("batch_datasets", self.batch_datasets),
            ("epochs", self.epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ForgeError::Config(format!("{name} must be positive")));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(ForgeError::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ForgeError::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_protected_prob) {
            return Err(ForgeError::Config("noise_protected_prob must lie in [0, 1]".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(ForgeError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.steps * self.epochs
    }
}

/// Names and shapes of every parameter tensor, in storage order.
pub fn param_layout(config: &ModelConfig) -> Vec<(String, [usize; 2])> {
    let (d, f) = (config.embed_dim, config.ff_dim);
    let mut out = vec![
        ("embed.features.weight".to_string(), [config.max_features, d]),
        ("embed.features.bias".to_string(), [1, d]),
        ("embed.protected.weight".to_string(), [1, d]),
        ("embed.protected.bias".to_string(), [1, d]),
        ("embed.label".to_string(), [2, d]),
    ];
    for l in 0..config.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("attn_norm.gain"), [1, d]),
            (p("attn_norm.bias"), [1, d]),
            (p("attn.query"), [d, d]),
            (p("attn.key"), [d, d]),
            (p("attn.value"), [d, d]),
            (p("attn.out.weight"), [d, d]),
            (p("attn.out.bias"), [1, d]),
            (p("ff_norm.gain"), [1, d]),
            (p("ff_norm.bias"), [1, d]),
            (p("ff.in.weight"), [d, f]),
            (p("ff.in.bias"), [1, f]),
            (p("ff.out.weight"), [f, d]),
            (p("ff.out.bias"), [1, d]),
        ]);
    }
    out.extend([
        ("final_norm.gain".to_string(), [1, d]),
        ("final_norm.bias".to_string(), [1, d]),
        ("head.weight".to_string(), [d, 1]),
        ("head.bias".to_string(), [1, 1]),
    ]);
    out
}

/// Seeded initial parameters: scaled normal weights, unit norm gains, zero
/// biases.
pub fn init_params<T: NdFloat>(config: &ModelConfig) -> Vec<Array2<T>> {
    let mut rng = stream(config.seed, 0x1417);
    param_layout(config)
        .into_iter()
        .map(|(name, [r, c])| {
            if name.ends_with(".gain") {
                Array2::ones((r, c))
            } else if name.ends_with("bias") {
                Array2::zeros((r, c))
            } else {
                let fan_in = if name == "embed.label" { 1 } else { r };
                let scale = 1.0 / (fan_in as f64).sqrt();
                Array2::from_shape_simple_fn((r, c), || {
                    T::from(rng.sample::<f64, _>(StandardNormal) * scale).expect("finite")
                })
            }
        })
        .collect()
}

/// Labelled context plus unlabelled query rows sharing one schema with a
/// single flagged protected column.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBatch {
    pub context_features: Array2<f64>,
    pub context_protected: Vec<u8>,
    pub context_labels: Vec<u8>,
    pub query_features: Array2<f64>,
    pub query_protected: Vec<u8>,
}

impl ContextBatch {
    pub fn from_datasets(context: &TabularDataset, query: &TabularDataset) -> Result<Self> {
        if context.feature_names() != query.feature_names() || context.protected_name() != query.protected_name() {
            return Err(ForgeError::Schema("context and query columns differ".into()));
        }
        Ok(ContextBatch {
            context_features: context.x.clone(),
            context_protected: context.a.clone(),
            context_labels: context.y.clone(),
            query_features: query.x.clone(),
            query_protected: query.a.clone(),
        })
    }

    pub fn n_context(&self) -> usize {
        self.context_labels.len()
    }

    pub fn n_query(&self) -> usize {
        self.query_protected.len()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let m = self.context_features.ncols();
        if self.query_features.ncols() != m {
            return Err(ForgeError::Schema(format!(
                "context has {m} feature columns, query has {}",
                self.query_features.ncols()
            )));
        }
        if m > config.max_features {
            return Err(ForgeError::Dimension(format!("{m} features exceed max_features {}", config.max_features)));
        }
        let n = self.n_context();
        if n == 0 {
            return Err(ForgeError::Empty("context".into()));
        }
        if n > config.max_rows {
            return Err(ForgeError::Dimension(format!("{n} context rows exceed max_rows {}", config.max_rows)));
        }
        if self.context_features.nrows() != n || self.context_protected.len() != n {
            return Err(ForgeError::LengthMismatch { left: self.context_features.nrows(), right: n });
        }
        if self.query_features.nrows() != self.n_query() {
            return Err(ForgeError::LengthMismatch { left: self.query_features.nrows(), right: self.n_query() });
        }
        let binary = |v: &[u8]| v.iter().all(|&x| x <= 1);
        if !binary(&self.context_protected) || !binary(&self.query_protected) || !binary(&self.context_labels) {
            return Err(ForgeError::Schema("protected values and labels must be 0/1".into()));
        }
        Ok(())
    }
}

/// Trained (or freshly initialized) parameters with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct FairPfn {
    pub config: ModelConfig,
    pub params: Vec<Array2<f32>>,
}

impl FairPfn {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config);
        Ok(FairPfn { config, params })
    }

    /// Query-row probabilities in one read-only pass over the context.
    pub fn predict_batch(&self, batch: &ContextBatch) -> Result<Vec<f64>> {
        batch.validate(&self.config)?;
        let mut out = Vec::with_capacity(batch.n_query());
        let mut start = 0;
        while start < batch.n_query() {
            let end = (start + QUERY_CHUNK).min(batch.n_query());
            let prepared: PreparedBatch<f32> = PreparedBatch::from_rows(batch, start..end, &self.config)?;
            let logits = forward_logits(&self.config, &self.params, &prepared)?;
            out.extend(logits.iter().map(|&z| f64::from(tape::sigmoid(z))));
            start = end;
        }
        Ok(out)
    }

    /// Predicts `query` rows from the labelled `context` using each table's
    /// flagged protected column.
    pub fn predict(&self, context: &TabularDataset, query: &TabularDataset) -> Result<Vec<f64>> {
        self.predict_batch(&ContextBatch::from_datasets(context, query)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_init_shapes() {
        let cfg = ModelConfig::tiny();
        let params: Vec<Array2<f64>> = init_params(&cfg);
        for ((_, shape), p) in param_layout(&cfg).iter().zip(&params) {
            assert_eq!(p.shape(), shape);
        }
        assert_eq!(params.len(), 5 + 13 + 4);
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig { embed_dim: 10, num_heads: 4, ..ModelConfig::tiny() };
        assert!(matches!(cfg.validate(), Err(ForgeError::Config(_))));
    }
}
