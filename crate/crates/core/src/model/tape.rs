//! Reverse-mode differentiation over 2-D tensors.
//!
//! Nodes are appended in evaluation order and differentiated in reverse;
//! every operation caches whatever its backward rule needs.

use ndarray::{s, Array2, ArrayView1, Axis, NdFloat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Array2<T>, inv_std: Vec<T> },
    Gelu(Var),
    Rows { x: Var, start: usize },
    Attention { q: Var, k: Var, v: Var, context: usize, heads: usize, probs: Vec<Array2<T>>, self_probs: Vec<Vec<T>> },
    Bce { logits: Var, targets: Vec<T>, probs: Vec<T> },
}

pub struct Tape<T> {
    values: Vec<Array2<T>>,
    ops: Vec<Op<T>>,
    tracked: Vec<bool>,
}

impl<T: NdFloat> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn c<T: NdFloat>(v: f64) -> T {
    T::from(v).expect("representable constant")
}

fn dot<T: NdFloat>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.dot(&b)
}

impl<T: NdFloat> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), tracked: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, tracked: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.tracked.push(tracked);
        Var(self.values.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient is propagated into it.
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.values[v.0]
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.tracked[v.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].dot(&self.values[b.0]);
        let t = self.any_tracked(&[a, b]);
        self.push(out, Op::MatMul(a, b), t)
    }

    /// `x + bias` with a `1 × d` bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let out = &self.values[x.0] + &self.values[bias.0];
        let t = self.any_tracked(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.values[a.0] + &self.values[b.0];
        let t = self.any_tracked(&[a, b]);
        self.push(out, Op::Add(a, b), t)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = &self.values[x.0];
        let d = xv.ncols();
        let mut normed = Array2::zeros(xv.raw_dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (row, mut out) in xv.rows().into_iter().zip(normed.rows_mut()) {
            let mean = row.sum() / c(d as f64);
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).fold(T::zero(), |a, b| a + b) / c(d as f64);
            let is = T::one() / (var + c(LN_EPS)).sqrt();
            out.zip_mut_with(&row, |o, &v| *o = (v - mean) * is);
            inv_std.push(is);
        }
        let out = &normed * &self.values[gain.0] + &self.values[bias.0];
        let t = self.any_tracked(&[x, gain, bias]);
        self.push(out, Op::LayerNorm { x, gain, bias, normed, inv_std }, t)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let k = c::<T>((2.0 / std::f64::consts::PI).sqrt());
        let a = c::<T>(0.044715);
        let half = c::<T>(0.5);
        let out = self.values[x.0].mapv(|v| half * v * (T::one() + (k * (v + a * v * v * v)).tanh()));
        let t = self.tracked[x.0];
        self.push(out, Op::Gelu(x), t)
    }

    /// Rows `start..end` of `x`.
    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.values[x.0].slice(s![start..end, ..]).to_owned();
        let t = self.tracked[x.0];
        self.push(out, Op::Rows { x, start }, t)
    }

    /// Multi-head attention where the first `context` rows attend only to
    /// each other and every later row attends to the context plus itself.
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, context: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let (n, d) = qv.dim();
        assert!(context >= 1 && context <= n, "attention needs a non-empty context");
        assert!(d % heads == 0, "width must split evenly across heads");
        let dh = d / heads;
        let scale = T::one() / c::<T>(dh as f64).sqrt();
        let mut out = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        let mut self_probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let (qh, kh, vh) = (qv.slice(cols), kv.slice(cols), vv.slice(cols));
            let kc = kh.slice(s![..context, ..]);
            let vc = vh.slice(s![..context, ..]);
            let mut p = qh.dot(&kc.t());
            p.mapv_inplace(|x| x * scale);
            let mut ps = vec![T::zero(); n];
            for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                let self_score = (i >= context).then(|| dot(qh.row(i), kh.row(i)) * scale);
                let mut max = row.fold(T::neg_infinity(), |m, &x| m.max(x));
                if let Some(s) = self_score {
                    max = max.max(s);
                }
                row.mapv_inplace(|x| (x - max).exp());
                let mut total = row.sum();
                let e_self = self_score.map(|s| (s - max).exp());
                if let Some(e) = e_self {
                    total += e;
                }
                row.mapv_inplace(|x| x / total);
                if let Some(e) = e_self {
                    ps[i] = e / total;
                }
            }
            let mut oh = p.dot(&vc);
            for i in context..n {
                let w = ps[i];
                oh.row_mut(i).zip_mut_with(&vh.row(i), |o, &x| *o += w * x);
            }
            out.slice_mut(cols).assign(&oh);
            probs.push(p);
            self_probs.push(ps);
        }
        let t = self.any_tracked(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, context, heads, probs, self_probs }, t)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` (an `n × 1` column)
    /// against 0/1 targets, with probabilities clamped to
    /// `[1e-7, 1 - 1e-7]`. Produces a `1 × 1` node.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Var {
        let lv = &self.values[logits.0];
        assert_eq!(lv.len(), targets.len(), "targets must align with logits");
        let lo = c::<T>(PROB_CLAMP);
        let hi = T::one() - lo;
        let probs: Vec<T> = lv.iter().map(|&z| sigmoid(z).max(lo).min(hi)).collect();
        let n = c::<T>(targets.len() as f64);
        let total = probs
            .iter()
            .zip(targets)
            .map(|(&p, &y)| -(y * p.ln() + (T::one() - y) * (T::one() - p).ln()))
            .fold(T::zero(), |a, b| a + b);
        let out = Array2::from_elem((1, 1), total / n);
        let t = self.tracked[logits.0];
        self.push(out, Op::Bce { logits, targets: targets.to_vec(), probs }, t)
    }

    /// Gradients of the scalar node `root` with respect to every tracked
    /// node; untracked entries are `None`.
    pub fn backward(&self, root: Var) -> Vec<Option<Array2<T>>> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.values.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.values[root.0].raw_dim()));
        for idx in (0..=root.0).rev() {
            if !self.tracked[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
        if !self.tracked[v.0] {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, idx: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked[a.0] {
                    self.accumulate(grads, *a, g.dot(&self.values[b.0].t()));
                }
                if self.tracked[b.0] {
                    self.accumulate(grads, *b, self.values[a.0].t().dot(g));
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                self.accumulate(grads, *gain, (g * normed).sum_axis(Axis(0)).insert_axis(Axis(0)));
                self.accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                if self.tracked[x.0] {
                    let gain_v = &self.values[gain.0];
                    let d = c::<T>(g.ncols() as f64);
                    let dn = g * gain_v;
                    let mut dx = Array2::zeros(g.raw_dim());
                    for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
                        let dr = dn.row(i);
                        let nr = normed.row(i);
                        let sum_d = dr.sum();
                        let sum_dn = dot(dr, nr);
                        let k = inv_std[i] / d;
                        for j in 0..out.len() {
                            out[j] = k * (d * dr[j] - sum_d - nr[j] * sum_dn);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(x) => {
                let k = c::<T>((2.0 / std::f64::consts::PI).sqrt());
                let a = c::<T>(0.044715);
                let half = c::<T>(0.5);
                let three = c::<T>(3.0);
                let mut dx = self.values[x.0].clone();
                dx.zip_mut_with(g, |v, &gv| {
                    let x = *v;
                    let t = (k * (x + a * x * x * x)).tanh();
                    let dt = (T::one() - t * t) * k * (T::one() + three * a * x * x);
                    *v = gv * (half * (T::one() + t) + half * x * dt);
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Rows { x, start } => {
                let mut dx = Array2::zeros(self.values[x.0].raw_dim());
                dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, context, heads, probs, self_probs } => {
                self.attention_backward(g, (*q, *k, *v), *context, *heads, probs, self_probs, grads);
            }
            Op::Bce { logits, targets, probs } => {
                let lo = c::<T>(PROB_CLAMP);
                let hi = T::one() - lo;
                let n = c::<T>(targets.len() as f64);
                let scale = g[[0, 0]] / n;
                let lv = &self.values[logits.0];
                let dz = Array2::from_shape_fn(lv.raw_dim(), |(i, j)| {
                    let r = i * lv.ncols() + j;
                    let raw = sigmoid(lv[[i, j]]);
                    if raw <= lo || raw >= hi {
                        T::zero()
                    } else {
                        (probs[r] - targets[r]) * scale
                    }
                });
                self.accumulate(grads, *logits, dz);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Array2<T>,
        (q, k, v): (Var, Var, Var),
        context: usize,
        heads: usize,
        probs: &[Array2<T>],
        self_probs: &[Vec<T>],
        grads: &mut [Option<Array2<T>>],
    ) {
        let (qv, kv, vv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let (n, d) = qv.dim();
        let dh = d / heads;
        let scale = T::one() / c::<T>(dh as f64).sqrt();
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let (qh, kh, vh) = (qv.slice(cols), kv.slice(cols), vv.slice(cols));
            let kc = kh.slice(s![..context, ..]);
            let vc = vh.slice(s![..context, ..]);
            let go = g.slice(cols);
            let p = &probs[h];
            let ps = &self_probs[h];

            let mut ds = go.dot(&vc.t());
            dv.slice_mut(s![..context, h * dh..(h + 1) * dh]).scaled_add(T::one(), &p.t().dot(&go));
            let mut dself = vec![T::zero(); n];
            for i in 0..n {
                let mut r = dot(p.row(i), ds.row(i));
                let mut dps = T::zero();
                if i >= context {
                    dps = dot(go.row(i), vh.row(i));
                    r += ps[i] * dps;
                    let w = ps[i];
                    dv.slice_mut(s![i, h * dh..(h + 1) * dh]).zip_mut_with(&go.row(i), |o, &x| *o += w * x);
                }
                ds.row_mut(i).zip_mut_with(&p.row(i), |dsv, &pv| *dsv = pv * (*dsv - r) * scale);
                if i >= context {
                    dself[i] = ps[i] * (dps - r) * scale;
                }
            }
            let mut dqh = ds.dot(&kc);
            let dkc = ds.t().dot(&qh);
            for i in context..n {
                let w = dself[i];
                dqh.row_mut(i).scaled_add(w, &kh.row(i));
                dk.slice_mut(s![i, h * dh..(h + 1) * dh]).scaled_add(w, &qh.row(i));
            }
            dq.slice_mut(cols).scaled_add(T::one(), &dqh);
            dk.slice_mut(s![..context, h * dh..(h + 1) * dh]).scaled_add(T::one(), &dkc);
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

pub fn sigmoid<T: NdFloat>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
