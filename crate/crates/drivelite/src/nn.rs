//! Parameter storage and the small set of network building blocks used
//! by the connector and the lite language model.

use std::collections::BTreeMap;

use crate::error::Error;
use crate::rng::RngStream;
use crate::scalar::{lit, Scalar};
use crate::tape::{Graph, NodeId};
use crate::tensor::Tensor2;
use crate::Result;

/// A named parameter tensor with its accumulated gradient buffer.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Tensor2<T>,
    pub grad: Tensor2<T>,
}

/// Named parameter tensors. Names are unique; gradient buffers always
/// match the parameter shape.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    map: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor2<T>) -> Result<()> {
        let grad = value.zeros_like();
        if self.map.insert(name.to_string(), Param { value, grad }).is_some() {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &Tensor2<T> {
        &self.map.get(name).unwrap_or_else(|| panic!("unknown parameter: {name}")).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor2<T> {
        &mut self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter: {name}")).value
    }

    pub fn grad(&self, name: &str) -> &Tensor2<T> {
        &self.map.get(name).unwrap_or_else(|| panic!("unknown parameter: {name}")).grad
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Tensor2<T> {
        &mut self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter: {name}")).grad
    }

    pub fn zero_grads(&mut self) {
        for p in self.map.values_mut() {
            p.grad = p.value.zeros_like();
        }
    }

    /// Deterministic (sorted-name) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn grad_global_norm(&self) -> T {
        let mut acc = T::zero();
        for p in self.map.values() {
            for &g in p.grad.data() {
                acc += g * g;
            }
        }
        acc.sqrt()
    }
}

/// Gaussian init scaled by 1/sqrt(fan_in).
pub fn gaussian_init<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Tensor2<T> {
    let mut t = Tensor2::zeros(rows, cols);
    for v in t.data_mut() {
        *v = lit::<T>(rng.normal() * std);
    }
    t
}

/// Multi-layer perceptron over a layer-size list, GELU between layers
/// and no activation after the final one.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub widths: Vec<usize>,
}

impl Mlp {
    pub fn new(name: impl Into<String>, widths: Vec<usize>) -> Self {
        assert!(widths.len() >= 2, "Mlp needs at least input and output widths");
        Mlp { name: name.into(), widths }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<()> {
        for l in 0..self.widths.len() - 1 {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let w = gaussian_init(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng);
            store.insert(&format!("{}.w{l}", self.name), w)?;
            store.insert(&format!("{}.b{l}", self.name), Tensor2::zeros(1, fan_out))?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for l in 0..self.widths.len() - 1 {
            let got = g.value(h).cols();
            if got != self.widths[l] {
                return Err(Error::dim(
                    format!("{} layer {l}", self.name),
                    format!("{} input columns", self.widths[l]),
                    format!("{got}"),
                ));
            }
            let w = g.param(store, &format!("{}.w{l}", self.name));
            let b = g.param(store, &format!("{}.b{l}", self.name));
            let z = g.tape.matmul(h, w);
            h = g.tape.add_row(z, b);
            if l + 1 < self.widths.len() - 1 {
                h = g.tape.gelu(h);
            }
        }
        Ok(h)
    }
}

/// Row-wise layer norm with learnable gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

pub const LN_EPS: f64 = 1e-9;

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm { name: name.into(), dim }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(&format!("{}.g", self.name), Tensor2::filled(1, self.dim, T::one()))?;
        store.insert(&format!("{}.b", self.name), Tensor2::zeros(1, self.dim))?;
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let n = g.tape.layer_norm_rows(x, lit::<T>(LN_EPS));
        let gain = g.param(store, &format!("{}.g", self.name));
        let bias = g.param(store, &format!("{}.b", self.name));
        let s = g.tape.mul_row(n, gain);
        g.tape.add_row(s, bias)
    }
}

/// Multi-head attention with plain softmax rows (bidirectional). Queries
/// and keys/values may come from different sequences (cross-attention).
#[derive(Debug, Clone)]
pub struct MultiHeadAttn {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttn {
    pub fn new(name: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttn { name: name.into(), dim, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<()> {
        let std = 1.0 / (self.dim as f64).sqrt();
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(
                &format!("{}.{w}", self.name),
                gaussian_init(self.dim, self.dim, std, rng),
            )?;
        }
        Ok(())
    }

    /// Returns the output plus the per-head attention matrices.
    pub fn forward_with_attn<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q_in: NodeId,
        kv_in: NodeId,
    ) -> (NodeId, Vec<NodeId>) {
        let wq = g.param(store, &format!("{}.wq", self.name));
        let wk = g.param(store, &format!("{}.wk", self.name));
        let wv = g.param(store, &format!("{}.wv", self.name));
        let wo = g.param(store, &format!("{}.wo", self.name));
        let q = g.tape.matmul(q_in, wq);
        let k = g.tape.matmul(kv_in, wk);
        let v = g.tape.matmul(kv_in, wv);
        let dh = self.head_dim();
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let mut parts = Vec::with_capacity(self.heads);
        let mut attns = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.tape.slice_cols(q, h * dh, dh);
            let kh = g.tape.slice_cols(k, h * dh, dh);
            let vh = g.tape.slice_cols(v, h * dh, dh);
            let logits = g.tape.matmul_nt(qh, kh);
            let logits = g.tape.scale(logits, scale);
            let attn = g.tape.softmax_rows(logits);
            attns.push(attn);
            parts.push(g.tape.matmul(attn, vh));
        }
        let mut cat = parts[0];
        for &p in &parts[1..] {
            cat = g.tape.concat_cols(cat, p);
        }
        (g.tape.matmul(cat, wo), attns)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q_in: NodeId,
        kv_in: NodeId,
    ) -> NodeId {
        self.forward_with_attn(g, store, q_in, kv_in).0
    }
}

/// Straight-through Gumbel-Softmax sample over row-wise logits.
///
/// Returns `(soft, hard)` node ids: `soft` is the temperature-scaled
/// softmax of the (optionally noised) logits; `hard` carries the per-row
/// one-hot argmax forward while routing gradients to `soft`.
pub fn gumbel_softmax<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    tau: T,
    rng: &mut RngStream,
    noise: bool,
) -> Result<(NodeId, NodeId)> {
    if tau <= T::zero() {
        return Err(Error::Config(format!("gumbel_softmax: tau must be positive, got {tau}")));
    }
    let shape = g.value(logits).shape();
    let noised = if noise {
        let mut n = Tensor2::zeros(shape.0, shape.1);
        for v in n.data_mut() {
            *v = lit::<T>(rng.gumbel());
        }
        let n = g.constant(n);
        g.tape.add(logits, n)
    } else {
        logits
    };
    let scaled = g.tape.scale(noised, T::one() / tau);
    let soft = g.tape.softmax_rows(scaled);
    let sv = g.value(soft);
    let mut hard = Tensor2::zeros(shape.0, shape.1);
    for r in 0..shape.0 {
        let row = sv.row(r);
        let mut best = 0;
        for c in 1..shape.1 {
            if row[c] > row[best] {
                best = c;
            }
        }
        hard[(r, best)] = T::one();
    }
    let hard = g.tape.straight_through(soft, hard);
    Ok((soft, hard))
}

/// Momentum SGD with global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct MomentumSgd<T: Scalar> {
    pub lr: T,
    pub momentum: T,
    pub clip: T,
    velocity: BTreeMap<String, Tensor2<T>>,
}

impl<T: Scalar> MomentumSgd<T> {
    pub fn new(lr: T, momentum: T, clip: T) -> Self {
        MomentumSgd { lr, momentum, clip, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) {
        let norm = store.grad_global_norm();
        let scale = if norm > self.clip { self.clip / norm } else { T::one() };
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let grad = store.grad(&name).scale(scale);
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| grad.zeros_like());
            *vel = vel.scale(self.momentum).add(&grad);
            let delta = vel.scale(self.lr);
            let value = store.value_mut(&name);
            *value = value.sub(&delta);
        }
        store.zero_grads();
    }
}
