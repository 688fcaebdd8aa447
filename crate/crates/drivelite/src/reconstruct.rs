//! Training-only token reconstruction: scatter enhanced kept tokens back
//! to their original positions, fill pruned positions with a learnable
//! embedding, and run a small bidirectional transformer.

use crate::error::Error;
use crate::nn::{gaussian_init, LayerNorm, Mlp, MultiHeadAttn, ParamStore};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::sparsify::RetentionMask;
use crate::tape::{Graph, NodeId};
use crate::tensor::Tensor2;
use crate::Result;

/// How enhanced rows are combined with the original rows at kept
/// positions when assembling the reconstruction input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScatterMode {
    /// Kept positions carry the aligned enhanced row.
    Replace,
    /// Kept positions carry the aligned enhanced row plus the original.
    Add,
}

#[derive(Debug, Clone)]
pub struct Reconstructor {
    pub align: Mlp,
    blocks: Vec<SelfBlock>,
    final_ln: LayerNorm,
    head: Mlp,
    embed_name: String,
    pub n_tokens: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
struct SelfBlock {
    ln_attn: LayerNorm,
    attn: MultiHeadAttn,
    ln_ffn: LayerNorm,
    ffn: Mlp,
}

impl Reconstructor {
    /// 4 pre-norm transformer blocks over N tokens of width C, no
    /// positional encoding (position identity comes from the scatter).
    pub fn new(
        name: impl Into<String>,
        n_tokens: usize,
        channels: usize,
        in_channels: usize,
        heads: usize,
    ) -> Result<Self> {
        let name = name.into();
        let mut blocks = Vec::with_capacity(4);
        for b in 0..4 {
            blocks.push(SelfBlock {
                ln_attn: LayerNorm::new(format!("{name}.b{b}.ln_attn"), channels),
                attn: MultiHeadAttn::new(format!("{name}.b{b}.attn"), channels, heads)?,
                ln_ffn: LayerNorm::new(format!("{name}.b{b}.ln_ffn"), channels),
                ffn: Mlp::new(format!("{name}.b{b}.ffn"), vec![channels, 4 * channels, channels]),
            });
        }
        Ok(Reconstructor {
            align: Mlp::new(format!("{name}.align"), vec![in_channels, channels]),
            blocks,
            final_ln: LayerNorm::new(format!("{name}.final_ln"), channels),
            head: Mlp::new(format!("{name}.head"), vec![channels, channels]),
            embed_name: format!("{name}.embed"),
            n_tokens,
            channels,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<()> {
        self.align.init(store, rng)?;
        for b in &self.blocks {
            b.ln_attn.init(store)?;
            b.attn.init(store, rng)?;
            b.ln_ffn.init(store)?;
            b.ffn.init(store, rng)?;
        }
        self.final_ln.init(store)?;
        self.head.init(store, rng)?;
        // learnable fill embedding, one row per token position
        store.insert(&self.embed_name, gaussian_init(self.n_tokens, self.channels, 0.02, rng))
    }

    /// Assemble the reconstruction input: kept position j carries the
    /// aligned enhanced row (times the straight-through mask), pruned
    /// position j carries the learnable embedding row. The mask stays in
    /// the computational graph so pruning decisions receive
    /// reconstruction gradients.
    pub fn assemble_rec_input<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_v: NodeId,
        f_i: NodeId,
        mask: &RetentionMask<T>,
        mode: ScatterMode,
    ) -> Result<NodeId> {
        if g.value(f_v).rows() != mask.n_kept() {
            return Err(Error::dim(
                "assemble_rec_input",
                format!("{} enhanced rows", mask.n_kept()),
                format!("{}", g.value(f_v).rows()),
            ));
        }
        let n = g.value(f_i).rows();
        if mask.len() != n {
            return Err(Error::dim("assemble_rec_input", format!("mask length {n}"), format!("{}", mask.len())));
        }
        let aligned = self.align.forward(g, store, f_v)?;
        let scattered = g.tape.scatter_rows(
            f_i,
            aligned,
            mask.kept_indices.clone(),
            matches!(mode, ScatterMode::Add),
        );
        let embed = g.param(store, &self.embed_name);
        let ones = g.constant(Tensor2::filled(n, 1, T::one()));
        let inv_mask = g.tape.sub(ones, mask.node);
        let kept_part = g.tape.mul_col(scattered, mask.node);
        let fill_part = g.tape.mul_col(embed, inv_mask);
        Ok(g.tape.add(kept_part, fill_part))
    }

    /// 4 bidirectional self-attention blocks plus a linear head;
    /// shape-preserving and permutation-equivariant over rows.
    pub fn reconstruct<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_rec: NodeId,
    ) -> Result<NodeId> {
        let mut x = f_rec;
        for b in &self.blocks {
            let h = b.ln_attn.forward(g, store, x);
            let attn_out = b.attn.forward(g, store, h, h);
            x = g.tape.add(x, attn_out);
            let h = b.ln_ffn.forward(g, store, x);
            let ffn_out = b.ffn.forward(g, store, h)?;
            x = g.tape.add(x, ffn_out);
        }
        let x = self.final_ln.forward(g, store, x);
        self.head.forward(g, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsify::{sample_mask, MaskMode};
    use crate::tape::Graph;

    fn randt(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor2<f64> {
        let mut t = Tensor2::zeros(rows, cols);
        for v in t.data_mut() {
            *v = rng.normal();
        }
        t
    }

    fn setup(n: usize, c: usize, ct: usize, seed: u64) -> (Reconstructor, ParamStore<f64>, RngStream) {
        let mut rng = RngStream::new(seed);
        let rec = Reconstructor::new("rec", n, c, ct, 4).unwrap();
        let mut store = ParamStore::new();
        rec.init(&mut store, &mut rng).unwrap();
        (rec, store, rng)
    }

    fn mask_from_probs(g: &mut Graph<f64>, keep: &[f64]) -> RetentionMask<f64> {
        let rows: Vec<Vec<f64>> = keep.iter().map(|&p| vec![1.0 - p, p]).collect();
        let s = g.constant(Tensor2::from_rows(&rows).unwrap());
        sample_mask(g, s, 1.0, MaskMode::Eval, &mut RngStream::new(0)).unwrap()
    }

    #[test]
    fn all_kept_means_aligned_rows_everywhere() {
        let (rec, store, mut rng) = setup(5, 8, 6, 1);
        let mut g = Graph::new();
        let f_i = g.constant(randt(5, 8, &mut rng));
        let f_v = randt(5, 6, &mut rng);
        let f_vx = g.constant(f_v.clone());
        let mask = mask_from_probs(&mut g, &[0.9; 5]);
        let out = rec
            .assemble_rec_input(&mut g, &store, f_vx, f_i, &mask, ScatterMode::Replace)
            .unwrap();
        let aligned = rec.align.forward(&mut g, &store, f_vx).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(aligned)) < 1e-15);
    }

    #[test]
    fn all_pruned_yields_embedding_exactly() {
        // hypothetical all-zero mask with the floor disabled by hand
        let (rec, store, mut rng) = setup(4, 8, 6, 3);
        let mut g = Graph::new();
        let f_i = g.constant(randt(4, 8, &mut rng));
        let f_v = g.constant(Tensor2::zeros(0, 6));
        let soft = g.constant(Tensor2::zeros(4, 1));
        let node = g.tape.straight_through(soft, Tensor2::zeros(4, 1));
        let mask = RetentionMask {
            hard: vec![false; 4],
            soft: vec![0.0; 4],
            kept_indices: vec![],
            node,
        };
        let out = rec
            .assemble_rec_input(&mut g, &store, f_v, f_i, &mask, ScatterMode::Replace)
            .unwrap();
        assert!(g.value(out).max_abs_diff(store.value("rec.embed")) < 1e-15);
    }

    #[test]
    fn assemble_matches_loop_oracle() {
        let (rec, store, mut rng) = setup(6, 8, 6, 5);
        let keep = [0.9, 0.1, 0.8, 0.2, 0.7, 0.1];
        let f_i = randt(6, 8, &mut rng);
        let mut g = Graph::new();
        let f_ix = g.constant(f_i.clone());
        let mask = mask_from_probs(&mut g, &keep);
        let f_v = randt(mask.n_kept(), 6, &mut rng);
        let f_vx = g.constant(f_v.clone());
        let out = rec
            .assemble_rec_input(&mut g, &store, f_vx, f_ix, &mask, ScatterMode::Replace)
            .unwrap();
        let aligned = rec.align.forward(&mut g, &store, f_vx).unwrap();
        let e = store.value("rec.embed");
        // loop oracle: kept j -> aligned row for j; pruned j -> e[j]
        for j in 0..6 {
            let row = g.value(out).row(j);
            if let Some(k) = mask.kept_indices.iter().position(|&i| i == j) {
                let want = g.value(aligned).row(k);
                for c in 0..8 {
                    assert!((row[c] - want[c]).abs() < 1e-12, "kept row {j}");
                }
            } else {
                for c in 0..8 {
                    assert!((row[c] - e[(j, c)]).abs() < 1e-12, "pruned row {j}");
                }
            }
        }
    }

    #[test]
    fn assemble_rejects_count_mismatch() {
        let (rec, store, mut rng) = setup(4, 8, 6, 7);
        let mut g = Graph::new();
        let f_i = g.constant(randt(4, 8, &mut rng));
        let f_v = g.constant(randt(3, 6, &mut rng)); // mask keeps 2, not 3
        let mask = mask_from_probs(&mut g, &[0.9, 0.1, 0.9, 0.1]);
        assert!(rec
            .assemble_rec_input(&mut g, &store, f_v, f_i, &mask, ScatterMode::Replace)
            .is_err());
    }

    #[test]
    fn reconstruct_is_permutation_equivariant() {
        let (rec, store, mut rng) = setup(5, 8, 6, 9);
        let x = randt(5, 8, &mut rng);
        let perm = [4usize, 2, 0, 3, 1];
        let mut xp = Tensor2::zeros(5, 8);
        for (r, &p) in perm.iter().enumerate() {
            xp.row_mut(r).copy_from_slice(x.row(p));
        }
        let mut g1 = Graph::new();
        let x1 = g1.constant(x);
        let y1 = rec.reconstruct(&mut g1, &store, x1).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.constant(xp);
        let y2 = rec.reconstruct(&mut g2, &store, x2).unwrap();
        for (r, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!(
                    (g2.value(y2)[(r, c)] - g1.value(y1)[(p, c)]).abs() < 1e-10,
                    "row {r}"
                );
            }
        }
    }

    #[test]
    fn zero_weight_blocks_pass_through_to_head() {
        let (rec, mut store, mut rng) = setup(4, 8, 6, 11);
        for b in 0..4 {
            for w in ["wq", "wk", "wv", "wo"] {
                *store.value_mut(&format!("rec.b{b}.attn.{w}")) = Tensor2::zeros(8, 8);
            }
            *store.value_mut(&format!("rec.b{b}.ffn.w0")) = Tensor2::zeros(8, 32);
            *store.value_mut(&format!("rec.b{b}.ffn.b0")) = Tensor2::zeros(1, 32);
            *store.value_mut(&format!("rec.b{b}.ffn.w1")) = Tensor2::zeros(32, 8);
            *store.value_mut(&format!("rec.b{b}.ffn.b1")) = Tensor2::zeros(1, 8);
        }
        let x = randt(4, 8, &mut rng);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let y = rec.reconstruct(&mut g, &store, xn).unwrap();
        // with zero blocks, output = head(final_ln(x))
        let mut g2 = Graph::new();
        let xn2 = g2.constant(x);
        let ln = rec.final_ln.forward(&mut g2, &store, xn2);
        let want = rec.head.forward(&mut g2, &store, ln).unwrap();
        assert!(g.value(y).max_abs_diff(g2.value(want)) < 1e-12);
    }
}
