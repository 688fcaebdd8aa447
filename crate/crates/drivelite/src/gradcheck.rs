//! Finite-difference gradient checking.
//!
//! Compares analytic reverse-mode gradients against central-difference
//! Jacobian-vector products along random directions, one report entry per
//! input tensor and per parameter.

use crate::error::Error;
use crate::nn::ParamStore;
use crate::rng::RngStream;
use crate::scalar::{lit, Scalar};
use crate::tape::{Graph, NodeId};
use crate::tensor::Tensor2;
use crate::Result;

/// Builds a scalar (1×1) loss from input leaves.
pub type LossFn<T> = dyn Fn(&mut Graph<T>, &ParamStore<T>, &[NodeId]) -> Result<NodeId>;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per checked tensor ("input{k}" or parameter name).
    pub entries: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, (_, e)| acc.max(*e))
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.entries
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

fn random_direction<T: Scalar>(shape: (usize, usize), rng: &mut RngStream) -> Tensor2<T> {
    let mut d = Tensor2::zeros(shape.0, shape.1);
    let mut norm = 0.0;
    for v in d.data_mut() {
        let x = rng.normal();
        *v = lit::<T>(x);
        norm += x * x;
    }
    let norm = norm.sqrt().max(1e-30);
    d.scale(lit::<T>(1.0 / norm))
}

fn eval_loss<T: Scalar>(
    store: &ParamStore<T>,
    inputs: &[Tensor2<T>],
    f: &LossFn<T>,
) -> Result<(f64, Graph<T>, Vec<NodeId>, NodeId)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, store, &ids)?;
    let v = g.value(loss);
    if v.shape() != (1, 1) {
        return Err(Error::dim("grad_check loss", "1x1", format!("{:?}", v.shape())));
    }
    let lv = v[(0, 0)].to_f64c();
    if !lv.is_finite() {
        return Err(Error::Numeric("non-finite loss value in grad_check".into()));
    }
    Ok((lv, g, ids, loss))
}

fn dot<T: Scalar>(a: &Tensor2<T>, b: &Tensor2<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x.to_f64c() * y.to_f64c())
        .sum()
}

/// Check gradients of a scalar loss w.r.t. the given inputs and every
/// parameter in `store`, using `n_dirs` random central-difference
/// directions per tensor.
pub fn grad_check_params<T: Scalar>(
    store: &ParamStore<T>,
    inputs: &[Tensor2<T>],
    f: &LossFn<T>,
    h: f64,
    n_dirs: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, g, ids, loss) = eval_loss(store, inputs, f)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    let grads = g.backward_into(loss, &mut analytic_store)?;

    let mut rng = RngStream::new(seed ^ 0x6A09_E667_F3BC_C908);
    let mut entries = Vec::new();

    // inputs
    for (k, (inp, &id)) in inputs.iter().zip(&ids).enumerate() {
        let mut worst = 0.0f64;
        for _ in 0..n_dirs {
            let dir = random_direction::<T>(inp.shape(), &mut rng);
            let a_jvp = dot(&grads[id], &dir);
            let mut plus = inputs.to_vec();
            plus[k] = plus[k].add(&dir.scale(lit::<T>(h)));
            let mut minus = inputs.to_vec();
            minus[k] = minus[k].sub(&dir.scale(lit::<T>(h)));
            let (lp, ..) = eval_loss(store, &plus, f)?;
            let (lm, ..) = eval_loss(store, &minus, f)?;
            let n_jvp = (lp - lm) / (2.0 * h);
            worst = worst.max(rel_err(a_jvp, n_jvp));
        }
        entries.push((format!("input{k}"), worst));
    }

    // parameters
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let shape = store.value(&name).shape();
        let mut worst = 0.0f64;
        for _ in 0..n_dirs {
            let dir = random_direction::<T>(shape, &mut rng);
            let a_jvp = dot(analytic_store.grad(&name), &dir);
            let mut plus = store.clone();
            {
                let v = plus.value_mut(&name);
                *v = v.add(&dir.scale(lit::<T>(h)));
            }
            let mut minus = store.clone();
            {
                let v = minus.value_mut(&name);
                *v = v.sub(&dir.scale(lit::<T>(h)));
            }
            let (lp, ..) = eval_loss(&plus, inputs, f)?;
            let (lm, ..) = eval_loss(&minus, inputs, f)?;
            let n_jvp = (lp - lm) / (2.0 * h);
            worst = worst.max(rel_err(a_jvp, n_jvp));
        }
        entries.push((name, worst));
    }

    Ok(GradCheckReport { entries })
}

/// Parameter-free variant.
pub fn grad_check<T: Scalar>(
    inputs: &[Tensor2<T>],
    f: &LossFn<T>,
    h: f64,
    n_dirs: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    grad_check_params(&ParamStore::new(), inputs, f, h, n_dirs, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randt(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor2<f64> {
        let mut t = Tensor2::zeros(rows, cols);
        for v in t.data_mut() {
            *v = rng.normal();
        }
        t
    }

    #[test]
    fn linear_map_agrees_nearly_exactly() {
        let mut rng = RngStream::new(11);
        let x = randt(3, 4, &mut rng);
        let w = randt(4, 2, &mut rng);
        let report = grad_check(
            &[x, w],
            &|g, _, ids| {
                let y = g.tape.matmul(ids[0], ids[1]);
                Ok(g.tape.sum_all(y))
            },
            1e-5,
            5,
            7,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-9, "{:?}", report.entries);
    }

    #[test]
    fn softmax_row_within_tolerance() {
        let mut rng = RngStream::new(5);
        let x = randt(1, 6, &mut rng);
        let w = randt(6, 1, &mut rng);
        let report = grad_check(
            &[x, w],
            &|g, _, ids| {
                let s = g.tape.softmax_rows(ids[0]);
                let y = g.tape.matmul(s, ids[1]);
                Ok(g.tape.sum_all(y))
            },
            1e-5,
            5,
            13,
        )
        .unwrap();
        assert!(report.max_rel_err() <= 1e-6, "{:?}", report.entries);
    }

    #[test]
    fn gelu_layernorm_rope_composite() {
        let mut rng = RngStream::new(21);
        let x = randt(4, 6, &mut rng);
        let w = randt(6, 6, &mut rng);
        let report = grad_check(
            &[x, w],
            &|g, _, ids| {
                let h = g.tape.matmul(ids[0], ids[1]);
                let h = g.tape.gelu(h);
                let h = g.tape.layer_norm_rows(h, 1e-9);
                let h = g.tape.rope_rows(h, vec![0, 3, 7, 11], 10000.0);
                let s = g.tape.sum_cols(h);
                let m = g.tape.mul(s, s);
                Ok(g.tape.sum_all(m))
            },
            1e-5,
            5,
            3,
        )
        .unwrap();
        assert!(report.max_rel_err() <= 1e-7, "{:?}", report.entries);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let x = Tensor2::from_vec(1, 1, vec![-1.0]).unwrap();
        let err = grad_check(
            &[x],
            &|g, _, ids| {
                let l = g.tape.ln(ids[0]); // ln of a negative → NaN
                Ok(g.tape.sum_all(l))
            },
            1e-5,
            1,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
