//! The lite language model: mixed instruction/visual token streams,
//! distance-decoupled instruction attention, a small block stack, and the
//! waypoint-prediction head.
//!
//! Attention rules per query:
//! - instruction queries attend bidirectionally over instruction keys,
//!   with rotary position applied to both sides;
//! - visual queries attend to all instruction keys with raw
//!   (position-free) similarities and to strictly-earlier visual keys
//!   with rotary similarities, one softmax over the union.

use crate::error::Error;
use crate::nn::{gaussian_init, LayerNorm, Mlp, ParamStore};
use crate::rng::RngStream;
use crate::scalar::{lit, Scalar};
use crate::tape::{Graph, LogitSource, NodeId};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Instruction,
    Visual,
}

/// Ordered mixed token sequence: all instruction tokens first, then the
/// visual tokens of each frame in time order, positions 0..L-1.
#[derive(Debug, Clone)]
pub struct TokenStream {
    pub segments: Vec<Segment>,
    pub positions: Vec<usize>,
    pub frame_ids: Vec<Option<usize>>,
}

impl TokenStream {
    pub fn new(n_instruction: usize, frame_sizes: &[usize]) -> Result<Self> {
        if n_instruction == 0 {
            return Err(Error::Input("token stream requires at least one instruction token".into()));
        }
        let mut segments = vec![Segment::Instruction; n_instruction];
        let mut frame_ids: Vec<Option<usize>> = vec![None; n_instruction];
        for (f, &n) in frame_sizes.iter().enumerate() {
            if n == 0 {
                return Err(Error::Input(format!("frame {f} contributes no visual tokens")));
            }
            segments.extend(std::iter::repeat(Segment::Visual).take(n));
            frame_ids.extend(std::iter::repeat(Some(f)).take(n));
        }
        let positions = (0..segments.len()).collect();
        Ok(TokenStream { segments, positions, frame_ids })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn n_instruction(&self) -> usize {
        self.segments.iter().filter(|s| **s == Segment::Instruction).count()
    }

    pub fn n_visual(&self) -> usize {
        self.len() - self.n_instruction()
    }

    /// Index of the last visual token of the latest frame.
    pub fn last_visual_index(&self) -> Option<usize> {
        self.segments.iter().rposition(|s| *s == Segment::Visual)
    }
}

/// Attention wiring inside the block stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    /// Distance-decoupled instruction attention.
    Ddia,
    /// Vanilla causal attention with rotary position everywhere
    /// (ablation arm).
    Causal,
}

fn selector_for(stream: &TokenStream, mode: AttnMode) -> Vec<LogitSource> {
    let l = stream.len();
    let mut sel = Vec::with_capacity(l * l);
    for j in 0..l {
        for i in 0..l {
            let s = match mode {
                AttnMode::Causal => {
                    if stream.positions[i] <= stream.positions[j] {
                        LogitSource::First
                    } else {
                        LogitSource::Masked
                    }
                }
                AttnMode::Ddia => match (stream.segments[j], stream.segments[i]) {
                    (Segment::Instruction, Segment::Instruction) => LogitSource::First,
                    (Segment::Instruction, Segment::Visual) => LogitSource::Masked,
                    (Segment::Visual, Segment::Instruction) => LogitSource::Second,
                    (Segment::Visual, Segment::Visual) => {
                        if stream.positions[i] < stream.positions[j] {
                            LogitSource::First
                        } else {
                            LogitSource::Masked
                        }
                    }
                },
            };
            sel.push(s);
        }
    }
    sel
}

/// Pre-softmax logit matrix (L×L) for one head: rotary logits where
/// position matters, position-free logits on the visual→instruction
/// branch, -inf where attention is forbidden.
pub fn ddia_logits<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    stream: &TokenStream,
    base: T,
    mode: AttnMode,
) -> Result<NodeId> {
    let d = g.value(q).cols();
    if d % 2 != 0 {
        return Err(Error::dim("ddia_logits", "even head dim", format!("{d}")));
    }
    let l = stream.len();
    if g.value(q).rows() != l || g.value(k).rows() != l {
        return Err(Error::dim("ddia_logits", format!("{l} rows"), format!("{}", g.value(q).rows())));
    }
    let scale = lit::<T>(1.0 / (d as f64).sqrt());
    let qr = g.tape.rope_rows(q, stream.positions.clone(), base);
    let kr = g.tape.rope_rows(k, stream.positions.clone(), base);
    let roped = g.tape.matmul_nt(qr, kr);
    let roped = g.tape.scale(roped, scale);
    let raw = g.tape.matmul_nt(q, k);
    let raw = g.tape.scale(raw, scale);
    Ok(g.tape.combine_logits(roped, raw, selector_for(stream, mode)))
}

/// One attention head over per-head Q/K/V slices (L×d). Returns the
/// output rows and the attention matrix node.
pub fn ddia_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    stream: &TokenStream,
    base: T,
    mode: AttnMode,
) -> Result<(NodeId, NodeId)> {
    if g.value(v).rows() != stream.len() {
        return Err(Error::dim("ddia_attention", format!("{} rows", stream.len()), format!("{}", g.value(v).rows())));
    }
    let logits = ddia_logits(g, q, k, stream, base, mode)?;
    let attn = g.tape.softmax_rows(logits);
    Ok((g.tape.matmul(attn, v), attn))
}

/// Attention matrix captured during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AttnCapture {
    pub layer: usize,
    pub head: usize,
    pub node: NodeId,
}

#[derive(Debug, Clone)]
struct LmBlock {
    ln_attn: LayerNorm,
    name: String,
    ln_ffn: LayerNorm,
    ffn: Mlp,
}

/// 4-block lite transformer over a mixed token stream plus the waypoint
/// MLP head reading the last visual token's hidden state.
#[derive(Debug, Clone)]
pub struct DdiaLm {
    name: String,
    pub dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub rope_base: f64,
    blocks: Vec<LmBlock>,
    final_ln: LayerNorm,
    head: Mlp,
    pub n_waypoints: usize,
}

/// K future ego-frame waypoints, ordered by increasing time offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Waypoints {
    pub points: Vec<(f64, f64)>,
}

impl Waypoints {
    pub fn from_row(row: &[f64]) -> Result<Self> {
        if row.len() % 2 != 0 || row.is_empty() {
            return Err(Error::dim("Waypoints::from_row", "2K values, K >= 1", format!("{}", row.len())));
        }
        let points: Vec<(f64, f64)> = row.chunks(2).map(|c| (c[0], c[1])).collect();
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Numeric("non-finite waypoint coordinates".into()));
        }
        Ok(Waypoints { points })
    }

    pub fn k(&self) -> usize {
        self.points.len()
    }
}

impl DdiaLm {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        heads: usize,
        n_blocks: usize,
        vocab: usize,
        n_waypoints: usize,
        head_hidden: usize,
        rope_base: f64,
    ) -> Result<Self> {
        if dim % heads != 0 || (dim / heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "lm dim {dim} must split into {heads} heads of even width"
            )));
        }
        if n_waypoints == 0 {
            return Err(Error::Config("need at least one waypoint".into()));
        }
        let name = name.into();
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            blocks.push(LmBlock {
                ln_attn: LayerNorm::new(format!("{name}.b{b}.ln_attn"), dim),
                name: format!("{name}.b{b}.attn"),
                ln_ffn: LayerNorm::new(format!("{name}.b{b}.ln_ffn"), dim),
                ffn: Mlp::new(format!("{name}.b{b}.ffn"), vec![dim, 4 * dim, dim]),
            });
        }
        Ok(DdiaLm {
            final_ln: LayerNorm::new(format!("{name}.final_ln"), dim),
            head: Mlp::new(format!("{name}.head"), vec![dim, head_hidden, 2 * n_waypoints]),
            name,
            dim,
            heads,
            vocab,
            rope_base,
            blocks,
            n_waypoints,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<()> {
        store.insert(
            &format!("{}.embed", self.name),
            gaussian_init(self.vocab, self.dim, 0.02, rng),
        )?;
        let std = 1.0 / (self.dim as f64).sqrt();
        for b in &self.blocks {
            b.ln_attn.init(store)?;
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(&format!("{}.{w}", b.name), gaussian_init(self.dim, self.dim, std, rng))?;
            }
            b.ln_ffn.init(store)?;
            b.ffn.init(store, rng)?;
        }
        self.final_ln.init(store)?;
        self.head.init(store, rng)
    }

    /// Embed the instruction tokens and concatenate the visual frames in
    /// time order.
    pub fn assemble_stream<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        instruction: &[usize],
        frames: &[NodeId],
    ) -> Result<(NodeId, TokenStream)> {
        if instruction.is_empty() {
            return Err(Error::Input("lm_forward: instruction tokens required".into()));
        }
        if frames.is_empty() {
            return Err(Error::Input("lm_forward: at least one visual frame required".into()));
        }
        for &t in instruction {
            if t >= self.vocab {
                return Err(Error::Input(format!("instruction token {t} outside vocabulary {}", self.vocab)));
            }
        }
        let mut frame_sizes = Vec::with_capacity(frames.len());
        for &f in frames {
            if g.value(f).cols() != self.dim {
                return Err(Error::dim("assemble_stream", format!("{} channels", self.dim), format!("{}", g.value(f).cols())));
            }
            frame_sizes.push(g.value(f).rows());
        }
        let stream = TokenStream::new(instruction.len(), &frame_sizes)?;
        let table = g.param(store, &format!("{}.embed", self.name));
        let instr = g.tape.gather_rows(table, instruction.to_vec());
        let mut parts = vec![instr];
        parts.extend_from_slice(frames);
        let embeddings = g.tape.concat_rows(&parts);
        Ok((embeddings, stream))
    }

    /// Run the block stack; returns the final hidden states and the
    /// per-layer per-head attention matrices.
    pub fn forward_hidden<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        embeddings: NodeId,
        stream: &TokenStream,
        mode: AttnMode,
    ) -> Result<(NodeId, Vec<AttnCapture>)> {
        let dh = self.dim / self.heads;
        let base = lit::<T>(self.rope_base);
        let mut captures = Vec::new();
        let mut x = embeddings;
        for (layer, b) in self.blocks.iter().enumerate() {
            let h = b.ln_attn.forward(g, store, x);
            let wq = g.param(store, &format!("{}.wq", b.name));
            let wk = g.param(store, &format!("{}.wk", b.name));
            let wv = g.param(store, &format!("{}.wv", b.name));
            let wo = g.param(store, &format!("{}.wo", b.name));
            let q = g.tape.matmul(h, wq);
            let k = g.tape.matmul(h, wk);
            let v = g.tape.matmul(h, wv);
            let mut parts = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let qh = g.tape.slice_cols(q, hd * dh, dh);
                let kh = g.tape.slice_cols(k, hd * dh, dh);
                let vh = g.tape.slice_cols(v, hd * dh, dh);
                let (out, attn) = ddia_attention(g, qh, kh, vh, stream, base, mode)?;
                captures.push(AttnCapture { layer, head: hd, node: attn });
                parts.push(out);
            }
            let mut cat = parts[0];
            for &p in &parts[1..] {
                cat = g.tape.concat_cols(cat, p);
            }
            let attn_out = g.tape.matmul(cat, wo);
            x = g.tape.add(x, attn_out);
            let f_in = b.ln_ffn.forward(g, store, x);
            let ffn_out = b.ffn.forward(g, store, f_in)?;
            x = g.tape.add(x, ffn_out);
        }
        Ok((self.final_ln.forward(g, store, x), captures))
    }

    /// Full stack: stream assembly plus the block stack.
    pub fn lm_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        instruction: &[usize],
        frames: &[NodeId],
        mode: AttnMode,
    ) -> Result<(NodeId, TokenStream, Vec<AttnCapture>)> {
        let (embeddings, stream) = self.assemble_stream(g, store, instruction, frames)?;
        let (hidden, captures) = self.forward_hidden(g, store, embeddings, &stream, mode)?;
        Ok((hidden, stream, captures))
    }

    /// Waypoint readout: head MLP on the hidden state of the last visual
    /// token of the latest frame, reshaped to K (x, y) pairs.
    pub fn predict_waypoints<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        hidden: NodeId,
        stream: &TokenStream,
    ) -> Result<NodeId> {
        let idx = stream
            .last_visual_index()
            .ok_or_else(|| Error::Input("predict_waypoints: stream has no visual token".into()))?;
        let row = g.tape.gather_rows(hidden, vec![idx]);
        self.head.forward(g, store, row)
    }

    pub fn decode_waypoints<T: Scalar>(&self, g: &Graph<T>, node: NodeId) -> Result<Waypoints> {
        let v = g.value(node);
        let row: Vec<f64> = v.row(0).iter().map(|x| x.to_f64c()).collect();
        Waypoints::from_row(&row)
    }
}
