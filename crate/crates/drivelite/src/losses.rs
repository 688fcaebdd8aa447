//! Training objectives: L1 waypoint loss, kept-ratio penalty, masked
//! reconstruction error, and their weighted combination.

use crate::error::Error;
use crate::scalar::{lit, Scalar};
use crate::sparsify::RetentionMask;
use crate::tape::{Graph, NodeId};
use crate::tensor::Tensor2;
use crate::Result;

/// Loss weights and the target retention ratio.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub retention_ratio: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, retention_ratio: f64) -> Result<Self> {
        if lambda1 < 0.0 || lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if retention_ratio <= 0.0 || retention_ratio > 1.0 {
            return Err(Error::Config(format!(
                "retention ratio must be in (0, 1], got {retention_ratio}"
            )));
        }
        Ok(LossWeights { lambda1, lambda2, retention_ratio })
    }
}

/// Scalar loss values for one training step, with per-frame breakdown.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub l_way: f64,
    pub l_prun: f64,
    pub l_rec: f64,
    pub total: f64,
    pub per_frame: Vec<(f64, f64, f64)>,
}

/// Mean over K waypoints of |dx| + |dy| between prediction and target.
/// `pred` is a 1×2K row on the tape; `gt` plain target coordinates.
pub fn waypoint_loss<T: Scalar>(g: &mut Graph<T>, pred: NodeId, gt: &[(f64, f64)]) -> Result<NodeId> {
    let cols = g.value(pred).cols();
    if cols != 2 * gt.len() || gt.is_empty() {
        return Err(Error::Input(format!(
            "waypoint_loss: prediction has {cols} values, ground truth has {} points",
            gt.len()
        )));
    }
    let mut flat = Vec::with_capacity(cols);
    for &(x, y) in gt {
        flat.push(lit::<T>(x));
        flat.push(lit::<T>(y));
    }
    let target = g.constant(Tensor2::from_vec(1, cols, flat)?);
    let diff = g.tape.sub(pred, target);
    let l1 = g.tape.abs(diff);
    let sum = g.tape.sum_all(l1);
    Ok(g.tape.scale(sum, lit::<T>(1.0 / gt.len() as f64)))
}

/// (R − mean(M))² on the straight-through mask column, so gradients flow
/// back to the sparsifier.
pub fn prune_ratio_loss<T: Scalar>(g: &mut Graph<T>, mask: &RetentionMask<T>, ratio: f64) -> Result<NodeId> {
    let n = mask.len();
    if n == 0 {
        return Err(Error::Input("prune_ratio_loss: empty mask".into()));
    }
    let mean = g.tape.avg_rows(mask.node);
    let target = g.constant(Tensor2::from_vec(1, 1, vec![lit::<T>(ratio)])?);
    let diff = g.tape.sub(target, mean);
    Ok(g.tape.mul(diff, diff))
}

/// Σ_j (1 − M_j) · ‖F_j − F̂_j‖² — squared reconstruction error on pruned
/// rows only, summed over channels and tokens.
pub fn rec_loss<T: Scalar>(
    g: &mut Graph<T>,
    f_i: NodeId,
    f_rec_hat: NodeId,
    mask: &RetentionMask<T>,
) -> Result<NodeId> {
    let shape = g.value(f_i).shape();
    if shape != g.value(f_rec_hat).shape() {
        return Err(Error::dim("rec_loss", format!("{shape:?}"), format!("{:?}", g.value(f_rec_hat).shape())));
    }
    if shape.0 != mask.len() {
        return Err(Error::dim("rec_loss", format!("mask length {}", shape.0), format!("{}", mask.len())));
    }
    let diff = g.tape.sub(f_i, f_rec_hat);
    let sq = g.tape.mul(diff, diff);
    let row_err = g.tape.sum_cols(sq);
    let ones = g.constant(Tensor2::filled(shape.0, 1, T::one()));
    let pruned = g.tape.sub(ones, mask.node);
    let masked = g.tape.mul(row_err, pruned);
    Ok(g.tape.sum_all(masked))
}

/// L = L_way + λ1·L_prun + λ2·L_rec, each part averaged over the frames
/// of the step.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    parts: &[(NodeId, NodeId, NodeId)],
    weights: &LossWeights,
) -> Result<(NodeId, LossReport)> {
    if parts.is_empty() {
        return Err(Error::Input("total_loss: no per-frame parts".into()));
    }
    let inv = lit::<T>(1.0 / parts.len() as f64);
    let mut way_acc = None;
    let mut prun_acc = None;
    let mut rec_acc = None;
    let mut per_frame = Vec::with_capacity(parts.len());
    for &(w, p, r) in parts {
        per_frame.push((
            g.value(w)[(0, 0)].to_f64c(),
            g.value(p)[(0, 0)].to_f64c(),
            g.value(r)[(0, 0)].to_f64c(),
        ));
        way_acc = Some(match way_acc {
            None => w,
            Some(a) => g.tape.add(a, w),
        });
        prun_acc = Some(match prun_acc {
            None => p,
            Some(a) => g.tape.add(a, p),
        });
        rec_acc = Some(match rec_acc {
            None => r,
            Some(a) => g.tape.add(a, r),
        });
    }
    let way = g.tape.scale(way_acc.unwrap(), inv);
    let prun = g.tape.scale(prun_acc.unwrap(), inv);
    let rec = g.tape.scale(rec_acc.unwrap(), inv);
    let prun_w = g.tape.scale(prun, lit::<T>(weights.lambda1));
    let rec_w = g.tape.scale(rec, lit::<T>(weights.lambda2));
    let s = g.tape.add(way, prun_w);
    let total = g.tape.add(s, rec_w);
    let report = LossReport {
        l_way: g.value(way)[(0, 0)].to_f64c(),
        l_prun: g.value(prun)[(0, 0)].to_f64c(),
        l_rec: g.value(rec)[(0, 0)].to_f64c(),
        total: g.value(total)[(0, 0)].to_f64c(),
        per_frame,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::sparsify::{sample_mask, MaskMode};

    fn mask_with_keep(g: &mut Graph<f64>, keep: &[f64]) -> RetentionMask<f64> {
        let rows: Vec<Vec<f64>> = keep.iter().map(|&p| vec![1.0 - p, p]).collect();
        let s = g.constant(Tensor2::from_rows(&rows).unwrap());
        sample_mask(g, s, 1.0, MaskMode::Eval, &mut RngStream::new(0)).unwrap()
    }

    #[test]
    fn waypoint_loss_zero_on_exact_match() {
        let mut g = Graph::new();
        let pred = g.constant(Tensor2::from_vec(1, 4, vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        let l = waypoint_loss(&mut g, pred, &[(1.0, 2.0), (-1.0, 0.5)]).unwrap();
        assert_eq!(g.value(l)[(0, 0)], 0.0);
    }

    #[test]
    fn waypoint_loss_single_point_hand_value() {
        let mut g = Graph::new();
        let pred = g.constant(Tensor2::from_vec(1, 2, vec![1.0, -2.0]).unwrap());
        let l = waypoint_loss(&mut g, pred, &[(0.0, 0.0)]).unwrap();
        assert_eq!(g.value(l)[(0, 0)], 3.0);
    }

    #[test]
    fn waypoint_loss_matches_loop_oracle() {
        let mut rng = RngStream::new(3);
        let mut g = Graph::new();
        let pv: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let gt: Vec<(f64, f64)> = (0..5).map(|_| (rng.normal(), rng.normal())).collect();
        let pred = g.constant(Tensor2::from_vec(1, 10, pv.clone()).unwrap());
        let l = waypoint_loss(&mut g, pred, &gt).unwrap();
        let mut want = 0.0;
        for (k, &(x, y)) in gt.iter().enumerate() {
            want += (pv[2 * k] - x).abs() + (pv[2 * k + 1] - y).abs();
        }
        want /= 5.0;
        assert!((g.value(l)[(0, 0)] - want).abs() < 1e-15);
    }

    #[test]
    fn waypoint_loss_k_mismatch_rejected() {
        let mut g = Graph::new();
        let pred = g.constant(Tensor2::from_vec(1, 4, vec![0.0; 4]).unwrap());
        assert!(waypoint_loss(&mut g, pred, &[(0.0, 0.0)]).is_err());
    }

    #[test]
    fn prune_ratio_all_kept() {
        let mut g = Graph::new();
        let mask = mask_with_keep(&mut g, &[0.9; 10]);
        let l = prune_ratio_loss(&mut g, &mask, 0.3).unwrap();
        assert!((g.value(l)[(0, 0)] - 0.49).abs() < 1e-12);
    }

    #[test]
    fn prune_ratio_exact_target_is_zero() {
        let mut g = Graph::new();
        let mut keep = vec![0.1; 10];
        keep[0] = 0.9;
        keep[1] = 0.9;
        keep[2] = 0.9;
        let mask = mask_with_keep(&mut g, &keep);
        let l = prune_ratio_loss(&mut g, &mask, 0.3).unwrap();
        assert!(g.value(l)[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn prune_ratio_106_tokens_32_kept() {
        let mut g = Graph::new();
        let mut keep = vec![0.1; 106];
        for k in keep.iter_mut().take(32) {
            *k = 0.9;
        }
        let mask = mask_with_keep(&mut g, &keep);
        let l = prune_ratio_loss(&mut g, &mask, 0.3).unwrap();
        let want = (0.3_f64 - 32.0 / 106.0).powi(2);
        assert!((g.value(l)[(0, 0)] - want).abs() < 1e-15);
        assert!((want - 3.5e-6).abs() < 1e-6);
    }

    #[test]
    fn rec_loss_zero_when_all_kept() {
        let mut rng = RngStream::new(5);
        let mut g = Graph::new();
        let mut f = Tensor2::zeros(4, 3);
        let mut fh = Tensor2::zeros(4, 3);
        for v in f.data_mut() {
            *v = rng.normal();
        }
        for v in fh.data_mut() {
            *v = rng.normal();
        }
        let (fx, fhx) = (g.constant(f), g.constant(fh));
        let mask = mask_with_keep(&mut g, &[0.9; 4]);
        let l = rec_loss(&mut g, fx, fhx, &mask).unwrap();
        assert_eq!(g.value(l)[(0, 0)], 0.0);
    }

    #[test]
    fn rec_loss_single_pruned_row() {
        let mut g = Graph::new();
        let f = g.constant(Tensor2::from_vec(2, 2, vec![1.0, 1.0, 3.0, 4.0]).unwrap());
        let fh = g.constant(Tensor2::from_vec(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        // row 0 pruned with error vector (1, 1), row 1 kept
        let mask = mask_with_keep(&mut g, &[0.1, 0.9]);
        let l = rec_loss(&mut g, f, fh, &mask).unwrap();
        assert_eq!(g.value(l)[(0, 0)], 2.0);
    }

    #[test]
    fn rec_loss_matches_loop_oracle() {
        let mut rng = RngStream::new(7);
        let mut g = Graph::new();
        let mut f = Tensor2::zeros(6, 4);
        let mut fh = Tensor2::zeros(6, 4);
        for v in f.data_mut() {
            *v = rng.normal();
        }
        for v in fh.data_mut() {
            *v = rng.normal();
        }
        let keep = [0.9, 0.1, 0.1, 0.9, 0.1, 0.9];
        let (fx, fhx) = (g.constant(f.clone()), g.constant(fh.clone()));
        let mask = mask_with_keep(&mut g, &keep);
        let l = rec_loss(&mut g, fx, fhx, &mask).unwrap();
        let mut want = 0.0;
        for j in 0..6 {
            if keep[j] < 0.5 {
                for c in 0..4 {
                    want += (f[(j, c)] - fh[(j, c)]).powi(2);
                }
            }
        }
        assert!((g.value(l)[(0, 0)] - want).abs() < 1e-12);
    }

    #[test]
    fn total_loss_hand_arithmetic() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor2::from_vec(1, 1, vec![1.0]).unwrap());
        let p = g.constant(Tensor2::from_vec(1, 1, vec![0.49]).unwrap());
        let r = g.constant(Tensor2::from_vec(1, 1, vec![2.0]).unwrap());
        let weights = LossWeights::new(10.0, 1.0, 0.3).unwrap();
        let (total, report) = total_loss(&mut g, &[(w, p, r)], &weights).unwrap();
        assert!((g.value(total)[(0, 0)] - 7.9).abs() < 1e-12);
        assert!((report.total - 7.9).abs() < 1e-12);
    }

    #[test]
    fn total_loss_linearity_invariant() {
        let mut rng = RngStream::new(9);
        for _ in 0..20 {
            let mut g = Graph::new();
            let mut parts = Vec::new();
            for _ in 0..3 {
                let w = g.constant(Tensor2::from_vec(1, 1, vec![rng.uniform()]).unwrap());
                let p = g.constant(Tensor2::from_vec(1, 1, vec![rng.uniform()]).unwrap());
                let r = g.constant(Tensor2::from_vec(1, 1, vec![rng.uniform()]).unwrap());
                parts.push((w, p, r));
            }
            let weights = LossWeights::new(10.0, 1.0, 0.3).unwrap();
            let (_, report) = total_loss(&mut g, &parts, &weights).unwrap();
            let want = report.l_way + 10.0 * report.l_prun + report.l_rec;
            assert!((report.total - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lambdas_reduce_to_waypoint_loss() {
        let mut g = Graph::new();
        let w = g.constant(Tensor2::from_vec(1, 1, vec![0.7]).unwrap());
        let p = g.constant(Tensor2::from_vec(1, 1, vec![5.0]).unwrap());
        let r = g.constant(Tensor2::from_vec(1, 1, vec![3.0]).unwrap());
        let weights = LossWeights::new(0.0, 0.0, 0.3).unwrap();
        let (_, report) = total_loss(&mut g, &[(w, p, r)], &weights).unwrap();
        assert_eq!(report.total, 0.7);
    }

    #[test]
    fn invalid_weights_rejected() {
        assert!(LossWeights::new(-1.0, 1.0, 0.3).is_err());
        assert!(LossWeights::new(1.0, 1.0, 0.0).is_err());
        assert!(LossWeights::new(1.0, 1.0, 1.5).is_err());
    }
}
