//! Token sparsification: score each visual token, sample a binary
//! retention mask with a straight-through Gumbel-Softmax, and gather the
//! kept rows.

use crate::error::Error;
use crate::nn::{Mlp, ParamStore};
use crate::rng::RngStream;
use crate::scalar::{lit, Scalar};
use crate::tape::{Graph, NodeId};
use crate::tensor::Tensor2;
use crate::Result;

/// Per-token binary retention decision with its soft companion.
///
/// `node` is the N×1 mask column on the tape: the hard values flow
/// forward while gradients reach the soft keep-probabilities
/// (straight-through), except in [`MaskMode::SoftRelax`] where the soft
/// column itself flows forward.
#[derive(Debug, Clone)]
pub struct RetentionMask<T: Scalar> {
    pub hard: Vec<bool>,
    pub soft: Vec<T>,
    pub kept_indices: Vec<usize>,
    pub node: NodeId,
}

impl<T: Scalar> RetentionMask<T> {
    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    pub fn n_kept(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn kept_ratio(&self) -> f64 {
        self.n_kept() as f64 / self.len() as f64
    }
}

/// How the retention mask is realized on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Gumbel noise + straight-through hard values.
    Train,
    /// Noise-free deterministic threshold.
    Eval,
    /// No hardening: the soft keep-probability column flows forward.
    /// Used by gradient checks, which must avoid the argmax kink.
    SoftRelax,
}

/// Token scorer: a local projection, a global average, and a decision
/// head over the combined features.
#[derive(Debug, Clone)]
pub struct Sparsifier {
    pub local: Mlp,
    pub decision: Mlp,
    pub channels: usize,
}

impl Sparsifier {
    pub fn new(name: impl Into<String>, channels: usize) -> Result<Self> {
        if channels % 4 != 0 {
            return Err(Error::Config(format!(
                "sparsifier channel count must be divisible by 4, got {channels}"
            )));
        }
        let name = name.into();
        Ok(Sparsifier {
            local: Mlp::new(format!("{name}.local"), vec![channels, channels / 2]),
            decision: Mlp::new(format!("{name}.decision"), vec![channels, channels / 4, 2]),
            channels,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<()> {
        self.local.init(store, rng)?;
        self.decision.init(store, rng)
    }

    /// Per-token keep/prune probabilities S (N×2): local features, their
    /// row-average broadcast back to every row, and a softmaxed decision
    /// head over the concatenation.
    pub fn score_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_i: NodeId,
    ) -> Result<NodeId> {
        let n = g.value(f_i).rows();
        if n < 1 {
            return Err(Error::Input("score_tokens: no tokens".into()));
        }
        let local = self.local.forward(g, store, f_i)?;
        let global = g.tape.avg_rows(local);
        let global_rows = g.tape.broadcast_row(global, n);
        let combined = g.tape.concat_cols(global_rows, local);
        let logits = self.decision.forward(g, store, combined)?;
        Ok(g.tape.softmax_rows(logits))
    }
}

/// Sample a retention mask from row-wise probabilities S (N×2), column 1
/// being the keep class. If every token would be pruned, the single
/// highest-soft-score token is forced kept.
pub fn sample_mask<T: Scalar>(
    g: &mut Graph<T>,
    s_i: NodeId,
    tau: T,
    mode: MaskMode,
    rng: &mut RngStream,
) -> Result<RetentionMask<T>> {
    if tau <= T::zero() {
        return Err(Error::Config(format!("sample_mask: tau must be positive, got {tau}")));
    }
    let n = g.value(s_i).rows();
    if g.value(s_i).cols() != 2 {
        return Err(Error::dim("sample_mask", "N x 2 probabilities", format!("{:?}", g.value(s_i).shape())));
    }

    // Gumbel logits are the log-probabilities, so the keep-probability
    // interpretation of S survives the second softmax.
    let soft2 = match mode {
        MaskMode::Train => {
            let logits = g.tape.ln(s_i);
            let mut noise = Tensor2::zeros(n, 2);
            for v in noise.data_mut() {
                *v = lit::<T>(rng.gumbel());
            }
            let noise = g.constant(noise);
            let noised = g.tape.add(logits, noise);
            let scaled = g.tape.scale(noised, T::one() / tau);
            g.tape.softmax_rows(scaled)
        }
        MaskMode::Eval | MaskMode::SoftRelax => s_i,
    };
    let soft_col = g.tape.slice_cols(soft2, 1, 1);
    let sv = g.value(soft_col);
    let soft: Vec<T> = (0..n).map(|r| sv[(r, 0)]).collect();

    let mut hard: Vec<bool> = soft.iter().map(|&p| p >= lit::<T>(0.5)).collect();
    if !hard.iter().any(|&k| k) {
        // floor rule: keep at least one token
        let mut best = 0;
        for (j, &p) in soft.iter().enumerate() {
            if p > soft[best] {
                best = j;
            }
        }
        hard[best] = true;
    }
    let kept_indices: Vec<usize> = (0..n).filter(|&j| hard[j]).collect();

    let node = match mode {
        MaskMode::SoftRelax => soft_col,
        MaskMode::Train | MaskMode::Eval => {
            let mut hard_t = Tensor2::zeros(n, 1);
            for (j, &k) in hard.iter().enumerate() {
                if k {
                    hard_t[(j, 0)] = T::one();
                }
            }
            g.tape.straight_through(soft_col, hard_t)
        }
    };

    Ok(RetentionMask { hard, soft, kept_indices, node })
}

/// Gather the kept rows of F (ascending index order), each scaled by its
/// straight-through mask value so gradients reach the decision head.
pub fn gather_kept<T: Scalar>(
    g: &mut Graph<T>,
    f_i: NodeId,
    mask: &RetentionMask<T>,
) -> Result<NodeId> {
    if g.value(f_i).rows() != mask.len() {
        return Err(Error::dim(
            "gather_kept",
            format!("mask length {}", g.value(f_i).rows()),
            format!("{}", mask.len()),
        ));
    }
    let rows = g.tape.gather_rows(f_i, mask.kept_indices.clone());
    let mask_rows = g.tape.gather_rows(mask.node, mask.kept_indices.clone());
    Ok(g.tape.mul_col(rows, mask_rows))
}
