//! Experiment harness: the training loop, seeded evaluation over route
//! tiers, ablation suites, correlation analysis, attention-map export, and
//! the gradient-check suite. Everything here emits plain CSV strings.

use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::config::{DdiaMode, Reduction, RunConfig};
use crate::ddia::Segment;
use crate::error::Error;
use crate::gradcheck::{grad_check, grad_check_params, GradCheckReport};
use crate::losses::{LossReport, LossWeights};
use crate::nn::MomentumSgd;
use crate::pipeline::{make_train_sample, Model, ModelAgent};
use crate::rng::RngStream;
use crate::sim::{
    compute_metrics, generate_scenario, pid_control, run_episode_from, step as sim_step, Agent,
    EgoState, PidGains, PidState, Scenario, ScenarioCfg, Tier, World,
};
use crate::sparsify::MaskMode;
use crate::tape::LogitSource;
use crate::tensor::Tensor2;
use crate::{Graph, ParamStore, Real, Result};

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pearson correlation coefficient; errors if either series has zero
/// variance or fewer than 3 samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::Input(format!(
            "pearson: need >= 3 paired samples, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let (mx, sx) = mean_std(xs);
    let (my, sy) = mean_std(ys);
    if sx == 0.0 || sy == 0.0 {
        return Err(Error::Numeric("pearson: zero variance makes correlation undefined".into()));
    }
    let n = xs.len() as f64;
    let cov = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
    Ok(cov / (sx * sy))
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub curve_csv: String,
    pub last_report: Option<LossReport>,
    /// Mean kept ratio over the last 200 steps (or all steps if fewer).
    pub kept_tail_mean: f64,
    pub diverged: bool,
}

/// Momentum-SGD training over teacher-forced samples from seeded scenarios.
/// On divergence (non-finite loss or gradients) the last-good checkpoint is
/// returned with `diverged = true`.
pub fn train(cfg: &RunConfig, seed: u64) -> Result<TrainOutput> {
    let model = Model::new(cfg)?;
    let mut store = model.init_params(seed)?;
    let mut opt = MomentumSgd::new(cfg.lr, cfg.momentum, cfg.grad_clip);
    let mut scn_rng = RngStream::new(seed).derive(0xa11);
    let mut noise_rng = RngStream::new(seed).derive(0xb22);
    let scenario_cfg = ScenarioCfg {
        n_obstacles: cfg.n_obstacles,
        n_stop_tags: cfg.n_stop_tags,
        ..ScenarioCfg::for_tier(Tier::Tiny, cfg.n_obstacles)
    };
    let digest = cfg.digest();
    // The reconstruction weight is scaled by 1/(N·C) (the loss sums squared
    // error over tokens and channels, so its gradient on the mask grows with
    // feature size and otherwise dwarfs the ratio penalty) and warmed in
    // over early steps. Without both, the mask drifts to keep-everything
    // before the reconstructor is any good — at which point no token is
    // pruned, the reconstructor gets no signal, and training deadlocks.
    let warmup = (cfg.steps / 2).clamp(1, 1000);
    let lambda2_base = cfg.lambda2 / (cfg.n_tokens * cfg.channels) as f64;

    let mut curve = String::from("step,l_way,l_prun,l_rec,total,kept_ratio\n");
    let mut kept_tail = Vec::new();
    let mut last_report = None;
    let mut last_good = Checkpoint::from_store(&store, digest);
    for t in 0..cfg.steps {
        let scenario = generate_scenario(scn_rng.next_u64(), &scenario_cfg)?;
        let sample = make_train_sample(&scenario, &model.encoder, cfg, &mut noise_rng);
        let mut g = Graph::new();
        let ramp = ((t + 1) as f64 / warmup as f64).min(1.0).powi(2);
        let weights = LossWeights::new(cfg.lambda1, lambda2_base * ramp, cfg.retention_ratio)?;
        let step_result = model
            .train_step_weighted(&mut g, &store, &sample, MaskMode::Train, &mut noise_rng, &weights)
            .and_then(|(root, report, kept)| {
                if !report.total.is_finite() {
                    return Err(Error::Numeric(format!("step {t}: non-finite loss")));
                }
                g.backward_into(root, &mut store)?;
                Ok((report, kept))
            });
        let (report, kept) = match step_result {
            Ok(ok) => ok,
            Err(_) => {
                return Ok(TrainOutput {
                    checkpoint: last_good,
                    curve_csv: curve,
                    last_report,
                    kept_tail_mean: if kept_tail.is_empty() {
                        0.0
                    } else {
                        mean_std(&kept_tail).0
                    },
                    diverged: true,
                });
            }
        };
        opt.step(&mut store);
        let _ = writeln!(
            curve,
            "{t},{:.6},{:.6},{:.6},{:.6},{:.6}",
            report.l_way, report.l_prun, report.l_rec, report.total, kept
        );
        kept_tail.push(kept);
        if kept_tail.len() > 200 {
            kept_tail.remove(0);
        }
        last_report = Some(report);
        if t % 50 == 49 {
            last_good = Checkpoint::from_store(&store, digest);
        }
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint::from_store(&store, digest),
        curve_csv: curve,
        last_report,
        kept_tail_mean: mean_std(&kept_tail).0,
        diverged: false,
    })
}

#[derive(Debug)]
pub struct EvalOutput {
    pub csv: String,
    /// Per-seed mean RC over the repeat runs, in seed order.
    pub rc_per_seed: Vec<f64>,
    pub rc_mean: f64,
    pub is_mean: f64,
    pub ds_mean: f64,
    pub ds_std: f64,
}

fn eval_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_mul(1000).wrapping_add(i)).collect()
}

fn jittered_start(scenario: &Scenario, run: usize, seed: u64) -> EgoState {
    let mut ego = EgoState::at_route_start(scenario);
    if run > 0 {
        // repeat runs perturb the initial pose so the 3-run spread is real
        let mut rng = RngStream::new(seed).derive(0x3u64.wrapping_add(run as u64));
        let h = scenario.heading_at(0.0);
        let lateral = (rng.normal() * 0.3).clamp(-1.0, 1.0);
        ego.x -= lateral * h.sin();
        ego.y += lateral * h.cos();
        ego.heading += (rng.normal() * 0.05).clamp(-0.2, 0.2);
    }
    ego
}

/// Closed-loop evaluation of a checkpoint over seeded scenarios of one tier,
/// with `eval_runs` jittered repeats per seed. Refuses checkpoints whose
/// config digest does not match.
pub fn evaluate(cfg: &RunConfig, ckpt: &Checkpoint, tier: Tier, seed: u64) -> Result<EvalOutput> {
    let digest = cfg.digest();
    if ckpt.config_digest != digest {
        return Err(Error::Config(format!(
            "checkpoint config digest {:016x} does not match current config digest {:016x}",
            ckpt.config_digest, digest
        )));
    }
    let model = Model::new(cfg)?;
    let store: ParamStore = ckpt.to_store()?;
    let params = cfg.sim_params();
    let scenario_cfg = ScenarioCfg {
        n_obstacles: cfg.n_obstacles,
        n_stop_tags: cfg.n_stop_tags,
        ..ScenarioCfg::for_tier(tier, cfg.n_obstacles)
    };
    let seeds = eval_seeds(seed, cfg.eval_seeds);

    let mut csv = String::new();
    let _ = writeln!(
        csv,
        "# seeds = {}",
        seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";")
    );
    csv.push_str("seed,rc_mean,rc_std,is_mean,is_std,ds_mean,ds_std,statuses\n");

    let mut rc_per_seed = Vec::new();
    let mut all_rc = Vec::new();
    let mut all_is = Vec::new();
    let mut all_ds = Vec::new();
    for &s in &seeds {
        let scenario = generate_scenario(s, &scenario_cfg)?;
        let mut rcs = Vec::new();
        let mut iss = Vec::new();
        let mut dss = Vec::new();
        let mut statuses = Vec::new();
        for run in 0..cfg.eval_runs {
            let mut agent = ModelAgent::new(&model, &store);
            let start = jittered_start(&scenario, run, s);
            let log = run_episode_from(&mut agent, &scenario, &params, start);
            let m = compute_metrics(&log, &scenario, &params);
            rcs.push(m.rc);
            iss.push(m.is);
            dss.push(m.ds);
            statuses.push(log.status.as_str());
        }
        let (rc_m, rc_s) = mean_std(&rcs);
        let (is_m, is_s) = mean_std(&iss);
        let (ds_m, ds_s) = mean_std(&dss);
        let _ = writeln!(
            csv,
            "{s},{rc_m:.6},{rc_s:.6},{is_m:.6},{is_s:.6},{ds_m:.6},{ds_s:.6},{}",
            statuses.join("|")
        );
        rc_per_seed.push(rc_m);
        all_rc.extend(rcs);
        all_is.extend(iss);
        all_ds.extend(dss);
    }
    let (rc_mean, rc_std) = mean_std(&all_rc);
    let (is_mean, is_std) = mean_std(&all_is);
    let (ds_mean, ds_std) = mean_std(&all_ds);
    let _ = writeln!(
        csv,
        "overall,{rc_mean:.6},{rc_std:.6},{is_mean:.6},{is_std:.6},{ds_mean:.6},{ds_std:.6},"
    );
    Ok(EvalOutput { csv, rc_per_seed, rc_mean, is_mean, ds_mean, ds_std })
}

/// The grid each ablation suite sweeps.
pub fn suite_arms(suite: &str) -> Result<Vec<(String, Box<dyn Fn(&mut RunConfig)>)>> {
    let mut arms: Vec<(String, Box<dyn Fn(&mut RunConfig)>)> = Vec::new();
    match suite {
        "ratio" => {
            for r in [0.05f64, 0.10, 0.30, 0.50] {
                arms.push((
                    format!("{}%", (r * 100.0).round() as u32),
                    Box::new(move |c: &mut RunConfig| c.retention_ratio = r),
                ));
            }
        }
        "capacity" => {
            for z in [5usize, 10, 20] {
                arms.push((
                    format!("{z}"),
                    Box::new(move |c: &mut RunConfig| c.memory_capacity = z),
                ));
            }
        }
        "reduction" => {
            for red in [Reduction::Pooling, Reduction::DynamicPrune, Reduction::Ccdp] {
                arms.push((
                    red.as_str().to_string(),
                    Box::new(move |c: &mut RunConfig| c.reduction = red),
                ));
            }
        }
        "ddia" => {
            for mode in [DdiaMode::On, DdiaMode::Causal] {
                arms.push((
                    mode.as_str().to_string(),
                    Box::new(move |c: &mut RunConfig| c.ddia = mode),
                ));
            }
        }
        other => return Err(Error::Config(format!("unknown ablation suite '{other}'"))),
    }
    Ok(arms)
}

/// Train and evaluate every arm of a suite with identical seeds (paired
/// comparison); one CSV row per arm. Arm ordering is reported, not asserted.
pub fn ablate(cfg: &RunConfig, suite: &str, seed: u64) -> Result<String> {
    let arms = suite_arms(suite)?;
    let seeds = eval_seeds(seed, cfg.eval_seeds);
    let mut csv = String::new();
    let _ = writeln!(csv, "# suite = {suite}");
    let _ = writeln!(
        csv,
        "# seeds = {}",
        seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";")
    );
    csv.push_str("arm,rc_mean,rc_std,is_mean,is_std,ds_mean,ds_std\n");
    for (name, apply) in &arms {
        let mut arm_cfg = cfg.clone();
        apply(&mut arm_cfg);
        arm_cfg.validate()?;
        let trained = train(&arm_cfg, seed)?;
        let eval = evaluate(&arm_cfg, &trained.checkpoint, Tier::Tiny, seed)?;
        // recompute the overall spread from the per-seed section
        let last = eval
            .csv
            .lines()
            .last()
            .and_then(|l| l.strip_prefix("overall,"))
            .unwrap_or("")
            .to_string();
        let _ = writeln!(csv, "{name},{}", last.trim_end_matches(','));
    }
    Ok(csv)
}

/// Teacher-forced open-loop scoring on held-out scenario seeds: one
/// (l_rec, l_way) pair per sample, for correlation analysis.
pub fn open_loop_pairs(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let digest = cfg.digest();
    if ckpt.config_digest != digest {
        return Err(Error::Config(format!(
            "checkpoint config digest {:016x} does not match current config digest {:016x}",
            ckpt.config_digest, digest
        )));
    }
    let model = Model::new(cfg)?;
    let store: ParamStore = ckpt.to_store()?;
    let scenario_cfg = ScenarioCfg {
        n_obstacles: cfg.n_obstacles,
        n_stop_tags: cfg.n_stop_tags,
        ..ScenarioCfg::for_tier(Tier::Tiny, cfg.n_obstacles)
    };
    let mut scn_rng = RngStream::new(seed).derive(0xc0de);
    let mut noise_rng = RngStream::new(seed).derive(0xd00d);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let scenario = generate_scenario(scn_rng.next_u64(), &scenario_cfg)?;
        let sample = make_train_sample(&scenario, &model.encoder, cfg, &mut noise_rng);
        let mut g = Graph::new();
        let (_, report, _) =
            model.train_step(&mut g, &store, &sample, MaskMode::Eval, &mut noise_rng)?;
        pairs.push((report.l_rec, report.l_way));
    }
    Ok(pairs)
}

/// Pearson r over (l_rec, l_way) pairs plus scatter CSV for plotting.
pub fn correlate(pairs: &[(f64, f64)]) -> Result<(f64, String)> {
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let r = pearson(&xs, &ys)?;
    let mut csv = String::from("l_rec,l_way\n");
    for (x, y) in pairs {
        let _ = writeln!(csv, "{x:.6},{y:.6}");
    }
    Ok((r, csv))
}

/// Closed-loop attention export: drives the first `steps` steps of an
/// episode and dumps one long-form attention matrix per step for the given
/// layer/head. With `aggregate`, emits the per-visual-query attention mass
/// on the instruction segment instead.
pub fn dump_attention(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    episode_seed: u64,
    layer: usize,
    head: usize,
    steps: usize,
    aggregate: bool,
) -> Result<String> {
    if layer >= cfg.blocks {
        return Err(Error::Input(format!("layer {layer} out of range (blocks = {})", cfg.blocks)));
    }
    if head >= cfg.heads {
        return Err(Error::Input(format!("head {head} out of range (heads = {})", cfg.heads)));
    }
    let digest = cfg.digest();
    if ckpt.config_digest != digest {
        return Err(Error::Config(format!(
            "checkpoint config digest {:016x} does not match current config digest {:016x}",
            ckpt.config_digest, digest
        )));
    }
    let model = Model::new(cfg)?;
    let store: ParamStore = ckpt.to_store()?;
    let params = cfg.sim_params();
    let scenario_cfg = ScenarioCfg {
        n_obstacles: cfg.n_obstacles,
        n_stop_tags: cfg.n_stop_tags,
        ..ScenarioCfg::for_tier(Tier::Tiny, cfg.n_obstacles)
    };
    let scenario = generate_scenario(episode_seed, &scenario_cfg)?;
    let mut agent = ModelAgent::new(&model, &store);
    agent.reset();
    let mut world = World::new(&scenario);
    let mut ego = EgoState::at_route_start(&scenario);
    let mut pid = PidState::default();
    let gains = PidGains::defaults();

    let seg_str = |s: Segment| match s {
        Segment::Instruction => "instruction",
        Segment::Visual => "visual",
    };
    let mut csv = String::new();
    if aggregate {
        csv.push_str("step,query_index,instruction_mass\n");
    } else {
        csv.push_str("step,layer,head,query_index,query_segment,key_index,key_segment,weight\n");
    }
    for t in 0..steps {
        let (waypoints, stream, captures, g) = agent.forward_step(&scenario, &world, &ego)?;
        let cap = captures
            .iter()
            .find(|c| c.layer == layer && c.head == head)
            .ok_or_else(|| Error::Input("attention capture missing".into()))?;
        let attn = g.value(cap.node);
        let n_i = stream.n_instruction();
        if aggregate {
            for qi in n_i..stream.len() {
                let mass: Real = (0..n_i).map(|ki| attn[(qi, ki)]).sum();
                let _ = writeln!(csv, "{t},{qi},{mass:.9}");
            }
        } else {
            for qi in 0..stream.len() {
                for ki in 0..stream.len() {
                    let _ = writeln!(
                        csv,
                        "{t},{layer},{head},{qi},{},{ki},{},{:.9}",
                        seg_str(stream.segments[qi]),
                        seg_str(stream.segments[ki]),
                        attn[(qi, ki)]
                    );
                }
            }
        }
        let action = pid_control(&waypoints, &ego, &gains, &mut pid, params.dt);
        let (next, _) = sim_step(&scenario, &mut world, &ego, action, &params, 0.0);
        ego = next;
    }
    Ok(csv)
}

fn randt(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor2<Real> {
    let mut t = Tensor2::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.normal();
    }
    t
}

/// Finite-difference checks for every differentiable tape operation plus
/// three full-pipeline compositions; returns (name, max rel err) per case.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = RngStream::new(seed).derive(0x9c);
    let h = 1e-5;
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push((name.to_string(), report.max_rel_err()));
    };

    type Case = (
        &'static str,
        Vec<Tensor2<Real>>,
        Box<crate::gradcheck::LossFn<Real>>,
    );
    let x34 = randt(3, 4, &mut rng);
    let y34 = randt(3, 4, &mut rng);
    let x45 = randt(4, 5, &mut rng);
    let row14 = randt(1, 4, &mut rng);
    let col31 = randt(3, 1, &mut rng);
    // keep |x| well away from the kink for the abs check
    let mut xabs = randt(3, 4, &mut rng);
    for v in xabs.data_mut() {
        *v = v.signum() * (v.abs() + 0.5);
    }
    // strictly positive inputs for ln
    let mut xpos = randt(3, 4, &mut rng);
    for v in xpos.data_mut() {
        *v = v.abs() + 0.5;
    }

    let cases: Vec<Case> = vec![
        ("add", vec![x34.clone(), y34.clone()], Box::new(|g, _, ids| {
            let y = g.tape.add(ids[0], ids[1]);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("sub", vec![x34.clone(), y34.clone()], Box::new(|g, _, ids| {
            let y = g.tape.sub(ids[0], ids[1]);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("mul", vec![x34.clone(), y34.clone()], Box::new(|g, _, ids| {
            let y = g.tape.mul(ids[0], ids[1]);
            Ok(g.tape.sum_all(y))
        })),
        ("scale", vec![x34.clone()], Box::new(|g, _, ids| {
            let y = g.tape.scale(ids[0], 1.7);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("add_row", vec![x34.clone(), row14.clone()], Box::new(|g, _, ids| {
            let y = g.tape.add_row(ids[0], ids[1]);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("mul_row", vec![x34.clone(), row14.clone()], Box::new(|g, _, ids| {
            let y = g.tape.mul_row(ids[0], ids[1]);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("mul_col", vec![x34.clone(), col31.clone()], Box::new(|g, _, ids| {
            let y = g.tape.mul_col(ids[0], ids[1]);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("matmul", vec![x34.clone(), x45.clone()], Box::new(|g, _, ids| {
            let y = g.tape.matmul(ids[0], ids[1]);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("matmul_nt", vec![x34.clone(), y34.clone()], Box::new(|g, _, ids| {
            let y = g.tape.matmul_nt(ids[0], ids[1]);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("gelu", vec![x34.clone()], Box::new(|g, _, ids| {
            let y = g.tape.gelu(ids[0]);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("tanh", vec![x34.clone()], Box::new(|g, _, ids| {
            let y = g.tape.tanh(ids[0]);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("abs", vec![xabs], Box::new(|g, _, ids| {
            let y = g.tape.abs(ids[0]);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("ln", vec![xpos], Box::new(|g, _, ids| {
            let y = g.tape.ln(ids[0]);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("softmax_rows", vec![x34.clone(), y34.clone()], Box::new(|g, _, ids| {
            let s = g.tape.softmax_rows(ids[0]);
            let y = g.tape.mul(s, ids[1]);
            Ok(g.tape.sum_all(y))
        })),
        ("layer_norm_rows", vec![x34.clone(), y34.clone()], Box::new(|g, _, ids| {
            let s = g.tape.layer_norm_rows(ids[0], 1e-9);
            let y = g.tape.mul(s, ids[1]);
            Ok(g.tape.sum_all(y))
        })),
        ("avg_rows", vec![x34.clone()], Box::new(|g, _, ids| {
            let s = g.tape.avg_rows(ids[0]);
            let sq = g.tape.mul(s, s);
            Ok(g.tape.sum_all(sq))
        })),
        ("sum_cols", vec![x34.clone()], Box::new(|g, _, ids| {
            let s = g.tape.sum_cols(ids[0]);
            let sq = g.tape.mul(s, s);
            Ok(g.tape.sum_all(sq))
        })),
        ("concat_cols", vec![x34.clone(), y34.clone()], Box::new(|g, _, ids| {
            let y = g.tape.concat_cols(ids[0], ids[1]);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("concat_rows", vec![x34.clone(), y34.clone()], Box::new(|g, _, ids| {
            let y = g.tape.concat_rows(&[ids[0], ids[1]]);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("slice_cols", vec![x34.clone()], Box::new(|g, _, ids| {
            let y = g.tape.slice_cols(ids[0], 1, 2);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("gather_rows", vec![x34.clone()], Box::new(|g, _, ids| {
            let y = g.tape.gather_rows(ids[0], vec![2, 0, 2]);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("scatter_rows_replace", vec![x34.clone(), y34.clone()], Box::new(|g, _, ids| {
            let src = g.tape.gather_rows(ids[1], vec![0, 1]);
            let y = g.tape.scatter_rows(ids[0], src, vec![2, 0], false);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("scatter_rows_add", vec![x34.clone(), y34.clone()], Box::new(|g, _, ids| {
            let src = g.tape.gather_rows(ids[1], vec![0, 1]);
            let y = g.tape.scatter_rows(ids[0], src, vec![2, 0], true);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("broadcast_row", vec![row14.clone()], Box::new(|g, _, ids| {
            let y = g.tape.broadcast_row(ids[0], 5);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("rope_rows", vec![x34.clone()], Box::new(|g, _, ids| {
            let y = g.tape.rope_rows(ids[0], vec![0, 2, 5], 10000.0);
            let sq = g.tape.mul(y, y);
            Ok(g.tape.sum_all(sq))
        })),
        ("combine_logits_softmax", vec![x34.clone(), y34.clone()], Box::new(|g, _, ids| {
            use LogitSource::*;
            let a = g.tape.matmul_nt(ids[0], ids[0]);
            let b = g.tape.matmul_nt(ids[1], ids[1]);
            let sel = vec![
                First, Second, Masked, //
                Second, First, First, //
                Masked, First, Second,
            ];
            let l = g.tape.combine_logits(a, b, sel);
            let s = g.tape.softmax_rows(l);
            let sq = g.tape.mul(s, s);
            Ok(g.tape.sum_all(sq))
        })),
    ];
    for (name, inputs, f) in &cases {
        push(name, grad_check(inputs, f.as_ref(), h, 3, seed ^ 0x51)?);
    }

    // three full-pipeline compositions over distinct parameter draws; the
    // soft-relaxed mask keeps the objective differentiable end to end
    let mut cfg = RunConfig::desk();
    cfg.n_tokens = 8;
    cfg.channels = 8;
    cfg.lm_dim = 16;
    cfg.window = 2;
    let scenario_cfg = ScenarioCfg::for_tier(Tier::Tiny, cfg.n_obstacles);
    for (i, param_seed) in [seed ^ 1, seed ^ 2, seed ^ 3].into_iter().enumerate() {
        let model = Model::new(&cfg)?;
        let store = model.init_params(param_seed)?;
        let scenario = generate_scenario(param_seed, &scenario_cfg)?;
        let mut sample_rng = RngStream::new(param_seed).derive(0x77);
        let sample = make_train_sample(&scenario, &model.encoder, &cfg, &mut sample_rng);
        let report = grad_check_params(
            &store,
            &[],
            &move |g, store, _| {
                let mut rng = RngStream::new(0);
                let (root, _, _) = model.train_step(g, store, &sample, MaskMode::SoftRelax, &mut rng)?;
                Ok(root)
            },
            h,
            1,
            seed ^ 0xf00 ^ i as u64,
        )?;
        push(&format!("pipeline_composition_{i}"), report);
    }
    Ok(out)
}

/// Convenience wrapper used by the smoke tests: a route oracle closure.
pub fn oracle_metrics(seed: u64, tier: Tier, k: usize, speed: f64) -> Result<crate::sim::Metrics> {
    let scenario_cfg = ScenarioCfg { n_obstacles: 0, n_stop_tags: 0, ..ScenarioCfg::for_tier(tier, 0) };
    let scenario = generate_scenario(seed, &scenario_cfg)?;
    let params = crate::sim::SimParams::default();
    let mut agent = crate::sim::OracleAgent { k, target_speed: speed };
    let log = crate::sim::run_episode(&mut agent, &scenario, &params);
    Ok(compute_metrics(&log, &scenario, &params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_train_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.n_tokens = 8;
        cfg.channels = 8;
        cfg.lm_dim = 16;
        cfg.window = 2;
        cfg.steps = 3;
        cfg.eval_seeds = 2;
        cfg.eval_runs = 2;
        cfg.max_steps = 40;
        cfg
    }

    #[test]
    fn pearson_exact_on_affine_series() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let up: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert_eq!(pearson(&xs, &up).unwrap(), 1.0);
        assert_eq!(pearson(&xs, &down).unwrap(), -1.0);
    }

    #[test]
    fn pearson_zero_variance_is_error() {
        let xs = vec![1.0, 1.0, 1.0];
        let ys = vec![1.0, 2.0, 3.0];
        assert!(matches!(pearson(&xs, &ys).unwrap_err(), Error::Numeric(_)));
    }

    #[test]
    fn pearson_recovers_planted_correlation() {
        let mut rng = RngStream::new(123);
        let rho: f64 = 0.65;
        let n = 10_000;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let a = rng.normal();
            let b = rng.normal();
            xs.push(a);
            ys.push(rho * a + (1.0 - rho * rho).sqrt() * b);
        }
        let r = pearson(&xs, &ys).unwrap();
        assert!((r - rho).abs() < 0.02, "r = {r}");
    }

    #[test]
    fn one_step_train_changes_params_where_gradients_flow() {
        let mut cfg = tiny_train_cfg();
        cfg.steps = 1;
        let out = train(&cfg, 4).unwrap();
        assert!(!out.diverged);
        let model = Model::new(&cfg).unwrap();
        let init = model.init_params(4).unwrap();
        let trained: ParamStore = out.checkpoint.to_store().unwrap();
        let mut any_changed = false;
        for (name, p) in init.iter() {
            let diff = trained.value(name).max_abs_diff(&p.value);
            if diff > 0.0 {
                any_changed = true;
            }
        }
        assert!(any_changed);
    }

    #[test]
    fn train_curve_csv_shape() {
        let cfg = tiny_train_cfg();
        let out = train(&cfg, 5).unwrap();
        let mut lines = out.curve_csv.lines();
        assert_eq!(lines.next().unwrap(), "step,l_way,l_prun,l_rec,total,kept_ratio");
        assert_eq!(out.curve_csv.lines().count(), cfg.steps + 1);
    }

    #[test]
    fn evaluate_rejects_digest_mismatch() {
        let cfg = tiny_train_cfg();
        let out = train(&cfg, 6).unwrap();
        let mut other = cfg.clone();
        other.memory_capacity = 20;
        let err = evaluate(&other, &out.checkpoint, Tier::Tiny, 1).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains(&format!("{:016x}", out.checkpoint.config_digest))
                && msg.contains(&format!("{:016x}", other.digest())),
            "{msg}"
        );
    }

    #[test]
    fn evaluate_deterministic_csv() {
        let cfg = tiny_train_cfg();
        let out = train(&cfg, 7).unwrap();
        let a = evaluate(&cfg, &out.checkpoint, Tier::Tiny, 3).unwrap();
        let b = evaluate(&cfg, &out.checkpoint, Tier::Tiny, 3).unwrap();
        assert_eq!(a.csv, b.csv);
    }

    #[test]
    fn suite_grids_match_expected() {
        let names: Vec<String> = suite_arms("ratio").unwrap().into_iter().map(|a| a.0).collect();
        assert_eq!(names, vec!["5%", "10%", "30%", "50%"]);
        let names: Vec<String> = suite_arms("capacity").unwrap().into_iter().map(|a| a.0).collect();
        assert_eq!(names, vec!["5", "10", "20"]);
        let names: Vec<String> = suite_arms("reduction").unwrap().into_iter().map(|a| a.0).collect();
        assert_eq!(names, vec!["pooling", "dynamic_prune", "ccdp"]);
        assert!(suite_arms("bogus").is_err());
    }

    #[test]
    fn correlate_emits_scatter() {
        let pairs: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 3.0 * i as f64)).collect();
        let (r, csv) = correlate(&pairs).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(csv.lines().count(), 6);
        assert_eq!(csv.lines().next().unwrap(), "l_rec,l_way");
    }

    #[test]
    fn attention_dump_rows_sum_to_one_and_structural_zeros() {
        let cfg = tiny_train_cfg();
        let out = train(&cfg, 8).unwrap();
        let csv = dump_attention(&cfg, &out.checkpoint, 2, 0, 0, 2, false).unwrap();
        let mut sums: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let (step, qi): (usize, usize) = (f[0].parse().unwrap(), f[3].parse().unwrap());
            let w: f64 = f[7].parse().unwrap();
            *sums.entry((step, qi)).or_default() += w;
            if f[4] == "instruction" && f[6] == "visual" {
                assert_eq!(w, 0.0, "instruction query attending to visual key");
            }
        }
        // CSV values carry 9 decimals, so allow per-row rounding drift
        for ((step, qi), s) in sums {
            assert!((s - 1.0).abs() < 1e-7, "row ({step},{qi}) sums to {s}");
        }
    }

    #[test]
    fn attention_dump_validates_indices() {
        let cfg = tiny_train_cfg();
        let out = train(&cfg, 9).unwrap();
        assert!(dump_attention(&cfg, &out.checkpoint, 2, 99, 0, 1, false).is_err());
        assert!(dump_attention(&cfg, &out.checkpoint, 2, 0, 99, 1, false).is_err());
    }

    #[test]
    fn open_loop_pairs_deterministic() {
        let cfg = tiny_train_cfg();
        let out = train(&cfg, 10).unwrap();
        let a = open_loop_pairs(&cfg, &out.checkpoint, 4, 1).unwrap();
        let b = open_loop_pairs(&cfg, &out.checkpoint, 4, 1).unwrap();
        assert_eq!(a, b);
    }
}
