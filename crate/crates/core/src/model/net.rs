use std::ops::Range;

use ndarray::{Array2, NdFloat};

use super::tape::{Tape, Var};
use super::{param_layout, ContextBatch, ModelConfig, FEATURE_CLIP};
use crate::error::{ForgeError, Result};

/// Token inputs for one forward pass: context rows first, then queries.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch<T> {
    /// Standardized, clipped, zero-padded features (`rows × max_features`).
    pub features: Array2<T>,
    /// Protected flag as `2a - 1` (`rows × 1`).
    pub protected: Array2<T>,
    /// One-hot context labels; zero rows for queries (`rows × 2`).
    pub labels: Array2<T>,
    pub n_context: usize,
}

fn cast<T: NdFloat>(v: f64) -> T {
    T::from(v).expect("finite value")
}

impl<T: NdFloat> PreparedBatch<T> {
    /// Prepares the context plus query rows `queries` of `batch`.
    pub fn from_rows(batch: &ContextBatch, queries: Range<usize>, config: &ModelConfig) -> Result<Self> {
        batch.validate(config)?;
        let nc = batch.n_context();
        let nq = queries.len();
        let n = nc + nq;
        let m = batch.context_features.ncols();
        let mut features = Array2::zeros((n, config.max_features));
        for j in 0..m {
            let col = batch.context_features.column(j);
            let mean = col.sum() / nc as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nc as f64;
            let std = var.sqrt();
            let scale = |v: f64| -> T {
                if std > 0.0 && std.is_finite() {
                    cast(((v - mean) / std).clamp(-FEATURE_CLIP, FEATURE_CLIP))
                } else {
                    T::zero()
                }
            };
            for i in 0..nc {
                features[[i, j]] = scale(batch.context_features[[i, j]]);
            }
            for (r, i) in queries.clone().enumerate() {
                features[[nc + r, j]] = scale(batch.query_features[[i, j]]);
            }
        }
        let signed = |a: u8| -> T { cast(2.0 * f64::from(a) - 1.0) };
        let mut protected = Array2::zeros((n, 1));
        let mut labels = Array2::zeros((n, 2));
        for i in 0..nc {
            protected[[i, 0]] = signed(batch.context_protected[i]);
            labels[[i, usize::from(batch.context_labels[i])]] = T::one();
        }
        for (r, i) in queries.enumerate() {
            protected[[nc + r, 0]] = signed(batch.query_protected[i]);
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(ForgeError::Numeric { layer: "feature standardization".into() });
        }
        Ok(PreparedBatch { features, protected, labels, n_context: nc })
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_query(&self) -> usize {
        self.n_rows() - self.n_context
    }
}

struct Net {
    vars: Vec<Var>,
}

impl Net {
    fn load<T: NdFloat>(tape: &mut Tape<T>, config: &ModelConfig, params: &[Array2<T>], track: bool) -> Result<Self> {
        let layout = param_layout(config);
        if layout.len() != params.len() {
            return Err(ForgeError::Dimension(format!("expected {} parameter tensors, got {}", layout.len(), params.len())));
        }
        for ((name, shape), p) in layout.iter().zip(params) {
            if p.shape() != shape {
                return Err(ForgeError::Dimension(format!("{name}: expected {shape:?}, got {:?}", p.shape())));
            }
        }
        let vars = params.iter().map(|p| if track { tape.param(p.clone()) } else { tape.input(p.clone()) }).collect();
        Ok(Net { vars })
    }

    fn global(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn layer(&self, l: usize, i: usize) -> Var {
        self.vars[5 + 13 * l + i]
    }

    fn tail(&self, i: usize) -> Var {
        self.vars[self.vars.len() - 4 + i]
    }
}

fn check<T: NdFloat>(tape: &Tape<T>, v: Var, layer: impl FnOnce() -> String) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ForgeError::Numeric { layer: layer() })
    }
}

fn embed_tokens<T: NdFloat>(tape: &mut Tape<T>, net: &Net, batch: &PreparedBatch<T>) -> Var {
    let feats = tape.input(batch.features.clone());
    let prot = tape.input(batch.protected.clone());
    let labels = tape.input(batch.labels.clone());
    let f = tape.matmul(feats, net.global(0));
    let f = tape.add_bias(f, net.global(1));
    let p = tape.matmul(prot, net.global(2));
    let p = tape.add_bias(p, net.global(3));
    let l = tape.matmul(labels, net.global(4));
    let x = tape.add(f, p);
    tape.add(x, l)
}

fn logits_node<T: NdFloat>(tape: &mut Tape<T>, config: &ModelConfig, net: &Net, batch: &PreparedBatch<T>) -> Result<Var> {
    if batch.n_context == 0 {
        return Err(ForgeError::Empty("context".into()));
    }
    let mut x = embed_tokens(tape, net, batch);
    check(tape, x, || "embedding".into())?;
    for l in 0..config.num_layers {
        let h = tape.layer_norm(x, net.layer(l, 0), net.layer(l, 1));
        let q = tape.matmul(h, net.layer(l, 2));
        let k = tape.matmul(h, net.layer(l, 3));
        let v = tape.matmul(h, net.layer(l, 4));
        let a = tape.masked_attention(q, k, v, batch.n_context, config.num_heads);
        let a = tape.matmul(a, net.layer(l, 5));
        let a = tape.add_bias(a, net.layer(l, 6));
        x = tape.add(x, a);
        check(tape, x, || format!("layer {l} attention"))?;
        let h = tape.layer_norm(x, net.layer(l, 7), net.layer(l, 8));
        let f = tape.matmul(h, net.layer(l, 9));
        let f = tape.add_bias(f, net.layer(l, 10));
        let f = tape.gelu(f);
        let f = tape.matmul(f, net.layer(l, 11));
        let f = tape.add_bias(f, net.layer(l, 12));
        x = tape.add(x, f);
        check(tape, x, || format!("layer {l} feed-forward"))?;
    }
    let q = tape.rows(x, batch.n_context, batch.n_rows());
    let q = tape.layer_norm(q, net.tail(0), net.tail(1));
    let z = tape.matmul(q, net.tail(2));
    let z = tape.add_bias(z, net.tail(3));
    check(tape, z, || "head".into())?;
    Ok(z)
}

/// Initial row tokens (before any transformer layer).
pub fn embed<T: NdFloat>(config: &ModelConfig, params: &[Array2<T>], batch: &PreparedBatch<T>) -> Result<Array2<T>> {
    let mut tape = Tape::new();
    let net = Net::load(&mut tape, config, params, false)?;
    let x = embed_tokens(&mut tape, &net, batch);
    Ok(tape.value(x).clone())
}

/// Query-row logits.
pub fn forward_logits<T: NdFloat>(config: &ModelConfig, params: &[Array2<T>], batch: &PreparedBatch<T>) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let net = Net::load(&mut tape, config, params, false)?;
    let z = logits_node(&mut tape, config, &net, batch)?;
    Ok(tape.value(z).iter().copied().collect())
}

/// Mean query BCE against `targets` and its gradient for every parameter.
pub fn loss_and_grads<T: NdFloat>(
    config: &ModelConfig,
    params: &[Array2<T>],
    batch: &PreparedBatch<T>,
    targets: &[T],
) -> Result<(T, Vec<Array2<T>>)> {
    if targets.len() != batch.n_query() {
        return Err(ForgeError::LengthMismatch { left: targets.len(), right: batch.n_query() });
    }
    let mut tape = Tape::new();
    let net = Net::load(&mut tape, config, params, true)?;
    let z = logits_node(&mut tape, config, &net, batch)?;
    let loss = tape.bce_with_logits(z, targets);
    let mut grads = tape.backward(loss);
    let out = net
        .vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads[v.index()].take().unwrap_or_else(|| Array2::zeros(p.raw_dim())))
        .collect();
    Ok((tape.value(loss)[[0, 0]], out))
}
