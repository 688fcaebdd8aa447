//! Memory-enhanced feature aggregation: a bounded FIFO of recent frame
//! features, a temporal encoding MLP over the bank average, and a
//! query-transformer whose queries are the kept tokens.

use crate::error::Error;
use crate::nn::{LayerNorm, Mlp, MultiHeadAttn, ParamStore};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::{Graph, NodeId};
use crate::tensor::Tensor2;
use crate::Result;

/// Bounded FIFO of the most recent frame feature matrices, oldest first.
#[derive(Debug, Clone)]
pub struct MemoryBank<T: Scalar> {
    capacity: usize,
    frames: Vec<Tensor2<T>>,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "memory bank capacity must be positive");
        MemoryBank { capacity, frames: Vec::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Tensor2<T>] {
        &self.frames
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    /// Append a frame, evicting the oldest when over capacity. Frames
    /// must all share one shape.
    pub fn push(&mut self, frame: Tensor2<T>) -> Result<()> {
        if let Some(first) = self.frames.first() {
            if first.shape() != frame.shape() {
                return Err(Error::dim(
                    "MemoryBank::push",
                    format!("{:?}", first.shape()),
                    format!("{:?}", frame.shape()),
                ));
            }
        }
        self.frames.push(frame);
        if self.frames.len() > self.capacity {
            self.frames.remove(0);
        }
        Ok(())
    }

    /// Element-wise mean over stored frames. With an empty bank the
    /// current frame stands in for the average (warm-up rule).
    pub fn average(&self, current: &Tensor2<T>) -> Tensor2<T> {
        if self.frames.is_empty() {
            return current.clone();
        }
        let mut acc = self.frames[0].zeros_like();
        for f in &self.frames {
            acc.add_assign(f);
        }
        acc.scale(T::one() / T::from_f64c(self.frames.len() as f64))
    }
}

/// The aggregator: temporal MLP plus a small stack of cross-attention
/// blocks (kept tokens as queries), pre-layer-norm, with a final
/// projection into the language width.
#[derive(Debug, Clone)]
pub struct Mefa {
    pub temporal: Mlp,
    blocks: Vec<CrossBlock>,
    final_ln: LayerNorm,
    out_proj: Mlp,
    pub channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
struct CrossBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttn,
    ln_ffn: LayerNorm,
    ffn: Mlp,
}

impl Mefa {
    pub fn new(
        name: impl Into<String>,
        channels: usize,
        out_channels: usize,
        blocks: usize,
        heads: usize,
    ) -> Result<Self> {
        let name = name.into();
        let mut bs = Vec::with_capacity(blocks);
        for b in 0..blocks {
            bs.push(CrossBlock {
                ln_q: LayerNorm::new(format!("{name}.b{b}.ln_q"), channels),
                ln_kv: LayerNorm::new(format!("{name}.b{b}.ln_kv"), channels),
                attn: MultiHeadAttn::new(format!("{name}.b{b}.attn"), channels, heads)?,
                ln_ffn: LayerNorm::new(format!("{name}.b{b}.ln_ffn"), channels),
                ffn: Mlp::new(format!("{name}.b{b}.ffn"), vec![channels, 4 * channels, channels]),
            });
        }
        Ok(Mefa {
            temporal: Mlp::new(format!("{name}.temporal"), vec![2 * channels, channels]),
            blocks: bs,
            final_ln: LayerNorm::new(format!("{name}.final_ln"), channels),
            out_proj: Mlp::new(format!("{name}.out_proj"), vec![channels, out_channels]),
            channels,
            out_channels,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<()> {
        self.temporal.init(store, rng)?;
        for b in &self.blocks {
            b.ln_q.init(store)?;
            b.ln_kv.init(store)?;
            b.attn.init(store, rng)?;
            b.ln_ffn.init(store)?;
            b.ffn.init(store, rng)?;
        }
        self.final_ln.init(store)?;
        self.out_proj.init(store, rng)
    }

    /// TE = MLP([F; B_avg]) with row-wise channel concatenation.
    pub fn temporal_encoding<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_i: NodeId,
        bank: &MemoryBank<T>,
    ) -> Result<NodeId> {
        let avg = bank.average(g.value(f_i));
        let avg = g.constant(avg);
        let cat = g.tape.concat_cols(f_i, avg);
        self.temporal.forward(g, store, cat)
    }

    /// Cross-attention aggregation: queries are the kept tokens, keys and
    /// values the temporally enhanced frame. Output has exactly as many
    /// rows as there are queries, projected to the language width.
    pub fn aggregate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        kept: NodeId,
        f_i: NodeId,
        te_i: NodeId,
    ) -> Result<NodeId> {
        if g.value(kept).rows() == 0 {
            return Err(Error::Input("aggregate: no kept tokens (floor rule violated upstream)".into()));
        }
        if g.value(f_i).shape() != g.value(te_i).shape() {
            return Err(Error::dim(
                "aggregate",
                format!("{:?}", g.value(f_i).shape()),
                format!("{:?}", g.value(te_i).shape()),
            ));
        }
        let kv = g.tape.add(f_i, te_i);
        let mut x = kept;
        for b in &self.blocks {
            let q_in = b.ln_q.forward(g, store, x);
            let kv_in = b.ln_kv.forward(g, store, kv);
            let attn_out = b.attn.forward(g, store, q_in, kv_in);
            x = g.tape.add(x, attn_out);
            let f_in = b.ln_ffn.forward(g, store, x);
            let ffn_out = b.ffn.forward(g, store, f_in)?;
            x = g.tape.add(x, ffn_out);
        }
        let x = self.final_ln.forward(g, store, x);
        self.out_proj.forward(g, store, x)
    }
}
