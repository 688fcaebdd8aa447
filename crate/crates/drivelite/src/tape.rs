//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! Every operation records its output value, its parent node ids, and a
//! closure mapping the output gradient to per-parent gradient
//! contributions. `backward` replays the tape in reverse and returns a
//! gradient tensor per node.

use crate::error::Error;
use crate::nn::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor2;
use crate::Result;

pub type NodeId = usize;

type BackwardFn<T> = Box<dyn Fn(&Tensor2<T>, &Tensor2<T>, &[&Tensor2<T>]) -> Vec<Tensor2<T>>>;

struct Node<T: Scalar> {
    value: Tensor2<T>,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn<T>>,
}

/// Selector entry for [`Tape::combine_logits`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitSource {
    /// Take the entry from the first logit matrix.
    First,
    /// Take the entry from the second logit matrix.
    Second,
    /// Attention forbidden: the entry becomes −∞ (zero weight after softmax).
    Masked,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2<T> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor2<T>, parents: Vec<NodeId>, backward: Option<BackwardFn<T>>) -> NodeId {
        self.nodes.push(Node { value, parents, backward });
        self.nodes.len() - 1
    }

    /// Leaf node. Receives a gradient but has no parents; used for both
    /// constants and differentiable inputs.
    pub fn leaf(&mut self, value: Tensor2<T>) -> NodeId {
        self.push(value, vec![], None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.add(&self.nodes[b].value);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|_, g, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.sub(&self.nodes[b].value);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|_, g, _| vec![g.clone(), g.scale(-T::one())])),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.mul_elem(&self.nodes[b].value);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|_, g, p| {
                vec![g.mul_elem(p[1]), g.mul_elem(p[0])]
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.nodes[a].value.scale(c);
        self.push(v, vec![a], Some(Box::new(move |_, g, _| vec![g.scale(c)])))
    }

    /// N×C plus a 1×C row broadcast over all rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (&self.nodes[a].value, &self.nodes[row].value);
        assert_eq!(rv.rows(), 1, "add_row: second arg must be 1 x C");
        assert_eq!(av.cols(), rv.cols(), "add_row: column mismatch");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for c in 0..v.cols() {
                v[(r, c)] += rv[(0, c)];
            }
        }
        self.push(
            v,
            vec![a, row],
            Some(Box::new(|_, g, _| {
                let mut rg = Tensor2::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        rg[(0, c)] += g[(r, c)];
                    }
                }
                vec![g.clone(), rg]
            })),
        )
    }

    /// N×C times a 1×C row broadcast over all rows.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (&self.nodes[a].value, &self.nodes[row].value);
        assert_eq!(rv.rows(), 1, "mul_row: second arg must be 1 x C");
        assert_eq!(av.cols(), rv.cols(), "mul_row: column mismatch");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for c in 0..v.cols() {
                v[(r, c)] *= rv[(0, c)];
            }
        }
        self.push(
            v,
            vec![a, row],
            Some(Box::new(|_, g, p| {
                let (a, row) = (p[0], p[1]);
                let mut ag = g.clone();
                let mut rg = Tensor2::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        ag[(r, c)] = g[(r, c)] * row[(0, c)];
                        rg[(0, c)] += g[(r, c)] * a[(r, c)];
                    }
                }
                vec![ag, rg]
            })),
        )
    }

    /// N×C times an N×1 column broadcast over all columns.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (av, cv) = (&self.nodes[a].value, &self.nodes[col].value);
        assert_eq!(cv.cols(), 1, "mul_col: second arg must be N x 1");
        assert_eq!(av.rows(), cv.rows(), "mul_col: row mismatch");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for c in 0..v.cols() {
                v[(r, c)] *= cv[(r, 0)];
            }
        }
        self.push(
            v,
            vec![a, col],
            Some(Box::new(|_, g, p| {
                let (a, col) = (p[0], p[1]);
                let mut ag = g.clone();
                let mut cg = Tensor2::zeros(g.rows(), 1);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        ag[(r, c)] = g[(r, c)] * col[(r, 0)];
                        cg[(r, 0)] += g[(r, c)] * a[(r, c)];
                    }
                }
                vec![ag, cg]
            })),
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|_, g, p| {
                vec![g.matmul_nt(p[1]), p[0].matmul_tn(g)]
            })),
        )
    }

    /// a (m×k) · bᵀ with b given as n×k.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.matmul_nt(&self.nodes[b].value);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|_, g, p| {
                vec![g.matmul(p[1]), g.matmul_tn(p[0])]
            })),
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(gelu_fwd);
        self.push(
            v,
            vec![a],
            Some(Box::new(|_, g, p| {
                vec![g.zip_map(p[0], |gi, xi| gi * gelu_bwd(xi))]
            })),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.tanh());
        self.push(
            v,
            vec![a],
            Some(Box::new(|out, g, _| {
                vec![g.zip_map(out, |gi, yi| gi * (T::one() - yi * yi))]
            })),
        )
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.abs());
        self.push(
            v,
            vec![a],
            Some(Box::new(|_, g, p| {
                vec![g.zip_map(p[0], |gi, xi| {
                    if xi >= T::zero() {
                        gi
                    } else {
                        -gi
                    }
                })]
            })),
        )
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.ln());
        self.push(
            v,
            vec![a],
            Some(Box::new(|_, g, p| vec![g.zip_map(p[0], |gi, xi| gi / xi)])),
        )
    }

    /// Numerically stable row-wise softmax. Entries equal to −∞ get weight
    /// exactly 0; a row must contain at least one finite entry.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for r in 0..x.rows() {
            let row = x.row(r);
            let m = row.iter().fold(T::neg_infinity(), |acc, &e| acc.max(e));
            debug_assert!(m.is_finite(), "softmax row with no finite entries");
            let mut z = T::zero();
            for c in 0..x.cols() {
                let e = (x[(r, c)] - m).exp();
                v[(r, c)] = e;
                z += e;
            }
            for c in 0..x.cols() {
                v[(r, c)] = v[(r, c)] / z;
            }
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(|out, g, _| {
                let mut dx = g.clone();
                for r in 0..out.rows() {
                    let mut dot = T::zero();
                    for c in 0..out.cols() {
                        dot += g[(r, c)] * out[(r, c)];
                    }
                    for c in 0..out.cols() {
                        dx[(r, c)] = out[(r, c)] * (g[(r, c)] - dot);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: T) -> NodeId {
        let x = &self.nodes[a].value;
        let n = x.cols();
        let inv_n = T::one() / lit::<T>(n as f64);
        let mut v = x.clone();
        let mut inv_sigmas = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let mut mu = T::zero();
            for c in 0..n {
                mu += x[(r, c)];
            }
            mu = mu * inv_n;
            let mut var = T::zero();
            for c in 0..n {
                let d = x[(r, c)] - mu;
                var += d * d;
            }
            var = var * inv_n;
            let inv_sigma = T::one() / (var + eps).sqrt();
            inv_sigmas.push(inv_sigma);
            for c in 0..n {
                v[(r, c)] = (x[(r, c)] - mu) * inv_sigma;
            }
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |out, g, _| {
                let n = out.cols();
                let inv_n = T::one() / lit::<T>(n as f64);
                let mut dx = g.clone();
                for r in 0..out.rows() {
                    let mut gm = T::zero();
                    let mut gym = T::zero();
                    for c in 0..n {
                        gm += g[(r, c)];
                        gym += g[(r, c)] * out[(r, c)];
                    }
                    gm = gm * inv_n;
                    gym = gym * inv_n;
                    for c in 0..n {
                        dx[(r, c)] = inv_sigmas[r] * (g[(r, c)] - gm - out[(r, c)] * gym);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Column-wise mean over rows: N×C → 1×C.
    pub fn avg_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let n = x.rows();
        assert!(n >= 1, "avg_rows on empty input");
        let inv_n = T::one() / lit::<T>(n as f64);
        let mut v = Tensor2::zeros(1, x.cols());
        for r in 0..n {
            for c in 0..x.cols() {
                v[(0, c)] += x[(r, c)] * inv_n;
            }
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |_, g, p| {
                let mut dx = p[0].zeros_like();
                for r in 0..dx.rows() {
                    for c in 0..dx.cols() {
                        dx[(r, c)] = g[(0, c)] * inv_n;
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Sum over all entries: N×C → 1×1.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum();
        let v = Tensor2::from_vec(1, 1, vec![s]).unwrap();
        self.push(
            v,
            vec![a],
            Some(Box::new(|_, g, p| {
                vec![Tensor2::filled(p[0].rows(), p[0].cols(), g[(0, 0)])]
            })),
        )
    }

    /// Row sums: N×C → N×1.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = Tensor2::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                v[(r, 0)] += x[(r, c)];
            }
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(|_, g, p| {
                let mut dx = p[0].zeros_like();
                for r in 0..dx.rows() {
                    for c in 0..dx.cols() {
                        dx[(r, c)] = g[(r, 0)];
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.rows(), bv.rows(), "concat_cols: row mismatch");
        let (ca, cb) = (av.cols(), bv.cols());
        let mut v = Tensor2::zeros(av.rows(), ca + cb);
        for r in 0..av.rows() {
            v.row_mut(r)[..ca].copy_from_slice(av.row(r));
            v.row_mut(r)[ca..].copy_from_slice(bv.row(r));
        }
        self.push(
            v,
            vec![a, b],
            Some(Box::new(move |_, g, _| {
                let mut ga = Tensor2::zeros(g.rows(), ca);
                let mut gb = Tensor2::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                vec![ga, gb]
            })),
        )
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0]].value.cols();
        let mut rows = 0;
        let mut splits = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.nodes[p].value;
            assert_eq!(v.cols(), cols, "concat_rows: column mismatch");
            splits.push(v.rows());
            rows += v.rows();
        }
        let mut v = Tensor2::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            for r in 0..pv.rows() {
                v.row_mut(at + r).copy_from_slice(pv.row(r));
            }
            at += pv.rows();
        }
        self.push(
            v,
            parts.to_vec(),
            Some(Box::new(move |_, g, _| {
                let mut grads = Vec::with_capacity(splits.len());
                let mut at = 0;
                for &n in &splits {
                    let mut gp = Tensor2::zeros(n, g.cols());
                    for r in 0..n {
                        gp.row_mut(r).copy_from_slice(g.row(at + r));
                    }
                    grads.push(gp);
                    at += n;
                }
                grads
            })),
        )
    }

    /// Column slice [start, start+len).
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = &self.nodes[a].value;
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut v = Tensor2::zeros(x.rows(), len);
        for r in 0..x.rows() {
            v.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |_, g, p| {
                let mut dx = p[0].zeros_like();
                for r in 0..g.rows() {
                    dx.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                }
                vec![dx]
            })),
        )
    }

    /// Row gather; duplicate indices accumulate in the backward pass.
    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let x = &self.nodes[a].value;
        for &i in &indices {
            assert!(i < x.rows(), "gather_rows index out of range");
        }
        let mut v = Tensor2::zeros(indices.len(), x.cols());
        for (r, &i) in indices.iter().enumerate() {
            v.row_mut(r).copy_from_slice(x.row(i));
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |_, g, p| {
                let mut dx = p[0].zeros_like();
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..g.cols() {
                        dx[(i, c)] += g[(r, c)];
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Scatter `src` rows into `base` at `indices`. In replace mode the
    /// base rows at those indices are overwritten; in add mode they are
    /// summed with the source rows.
    pub fn scatter_rows(&mut self, base: NodeId, src: NodeId, indices: Vec<usize>, add: bool) -> NodeId {
        let (bv, sv) = (&self.nodes[base].value, &self.nodes[src].value);
        assert_eq!(sv.rows(), indices.len(), "scatter_rows: index count mismatch");
        assert_eq!(bv.cols(), sv.cols(), "scatter_rows: column mismatch");
        let mut v = bv.clone();
        for (r, &i) in indices.iter().enumerate() {
            assert!(i < bv.rows(), "scatter_rows index out of range");
            for c in 0..bv.cols() {
                v[(i, c)] = if add { v[(i, c)] + sv[(r, c)] } else { sv[(r, c)] };
            }
        }
        self.push(
            v,
            vec![base, src],
            Some(Box::new(move |_, g, _| {
                let mut gb = g.clone();
                let mut gs = Tensor2::zeros(indices.len(), g.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..g.cols() {
                        gs[(r, c)] = g[(i, c)];
                        if !add {
                            gb[(i, c)] = T::zero();
                        }
                    }
                }
                vec![gb, gs]
            })),
        )
    }

    /// Repeat a 1×C row N times.
    pub fn broadcast_row(&mut self, a: NodeId, n: usize) -> NodeId {
        let x = &self.nodes[a].value;
        assert_eq!(x.rows(), 1, "broadcast_row expects 1 x C input");
        let mut v = Tensor2::zeros(n, x.cols());
        for r in 0..n {
            v.row_mut(r).copy_from_slice(x.row(0));
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(|_, g, _| {
                let mut dx = Tensor2::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        dx[(0, c)] += g[(r, c)];
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Rotary rotation applied per row with the given integer positions.
    /// The backward pass is the inverse rotation (rotations are orthogonal).
    pub fn rope_rows(&mut self, a: NodeId, positions: Vec<usize>, base: T) -> NodeId {
        let x = &self.nodes[a].value;
        assert_eq!(x.rows(), positions.len(), "rope_rows: position count mismatch");
        assert!(x.cols() % 2 == 0, "rope_rows: head dim must be even");
        let v = rope_apply(x, &positions, base, false);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |_, g, _| {
                vec![rope_apply(g, &positions, base, true)]
            })),
        )
    }

    /// Straight-through node: forward takes the given hard value, backward
    /// passes the output gradient to the soft parent unchanged.
    pub fn straight_through(&mut self, soft: NodeId, hard: Tensor2<T>) -> NodeId {
        assert_eq!(self.nodes[soft].value.shape(), hard.shape(), "straight_through shape mismatch");
        self.push(hard, vec![soft], Some(Box::new(|_, g, _| vec![g.clone()])))
    }

    /// Per-entry choice between two logit matrices of equal shape, with a
    /// masked state mapping to −∞. Gradients route back only to the chosen
    /// source entry.
    pub fn combine_logits(&mut self, a: NodeId, b: NodeId, selector: Vec<LogitSource>) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.shape(), bv.shape(), "combine_logits shape mismatch");
        assert_eq!(selector.len(), av.rows() * av.cols(), "combine_logits selector length");
        let (rows, cols) = av.shape();
        let mut v = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                v[(r, c)] = match selector[r * cols + c] {
                    LogitSource::First => av[(r, c)],
                    LogitSource::Second => bv[(r, c)],
                    LogitSource::Masked => T::neg_infinity(),
                };
            }
        }
        self.push(
            v,
            vec![a, b],
            Some(Box::new(move |_, g, p| {
                let mut ga = p[0].zeros_like();
                let mut gb = p[1].zeros_like();
                let cols = g.cols();
                for r in 0..g.rows() {
                    for c in 0..cols {
                        match selector[r * cols + c] {
                            LogitSource::First => ga[(r, c)] = g[(r, c)],
                            LogitSource::Second => gb[(r, c)] = g[(r, c)],
                            LogitSource::Masked => {}
                        }
                    }
                }
                vec![ga, gb]
            })),
        )
    }

    /// Reverse sweep from a scalar (1×1) root; returns one gradient tensor
    /// per node, in node order.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Tensor2<T>>> {
        let rv = &self.nodes[root].value;
        if rv.shape() != (1, 1) {
            return Err(Error::dim("Tape::backward", "1x1 root", format!("{:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Tensor2<T>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor2::filled(1, 1, T::one()));
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(f) = &self.nodes[i].backward {
                let node = &self.nodes[i];
                let parent_values: Vec<&Tensor2<T>> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let pgrads = f(&node.value, &g, &parent_values);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(pgrads) {
                    if !pg.all_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient flowing into node {p}"
                        )));
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| self.nodes[i].value.zeros_like()))
            .collect())
    }
}

fn rope_apply<T: Scalar>(x: &Tensor2<T>, positions: &[usize], base: T, inverse: bool) -> Tensor2<T> {
    let d = x.cols();
    let mut out = x.clone();
    for (r, &m) in positions.iter().enumerate() {
        for t in 0..d / 2 {
            let mut theta =
                lit::<T>(m as f64) * base.powf(lit::<T>(-2.0 * t as f64 / d as f64));
            if inverse {
                theta = -theta;
            }
            let (s, c) = (theta.sin(), theta.cos());
            let x0 = x[(r, 2 * t)];
            let x1 = x[(r, 2 * t + 1)];
            out[(r, 2 * t)] = x0 * c - x1 * s;
            out[(r, 2 * t + 1)] = x0 * s + x1 * c;
        }
    }
    out
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    // tanh approximation; the backward below is its exact derivative
    let c = lit::<T>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = lit::<T>(0.044715);
    let u = c * (x + k * x * x * x);
    lit::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = lit::<T>(0.797_884_560_802_865_4);
    let k = lit::<T>(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + lit::<T>(3.0) * k * x * x);
    lit::<T>(0.5) * (T::one() + t) + lit::<T>(0.5) * x * (T::one() - t * t) * du
}

/// A tape plus the parameter bindings made while building it, so parameter
/// gradients can be routed back into a [`ParamStore`] after `backward`.
pub struct Graph<T: Scalar> {
    pub tape: Tape<T>,
    bindings: Vec<(NodeId, String)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            tape: Tape::new(),
            bindings: Vec::new(),
        }
    }

    /// Constant leaf (no parameter binding).
    pub fn constant(&mut self, value: Tensor2<T>) -> NodeId {
        self.tape.leaf(value)
    }

    /// Leaf bound to a named parameter; its gradient is accumulated into
    /// the store by [`Graph::backward_into`].
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> NodeId {
        let value = store.value(name).clone();
        let id = self.tape.leaf(value);
        self.bindings.push((id, name.to_string()));
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor2<T> {
        self.tape.value(id)
    }

    /// Backward from a scalar root, accumulating parameter gradients into
    /// the store. Returns the full per-node gradient vector.
    pub fn backward_into(&self, root: NodeId, store: &mut ParamStore<T>) -> Result<Vec<Tensor2<T>>> {
        let grads = self.tape.backward(root)?;
        for (id, name) in &self.bindings {
            store.grad_mut(name).add_assign(&grads[*id]);
        }
        Ok(grads)
    }
}
