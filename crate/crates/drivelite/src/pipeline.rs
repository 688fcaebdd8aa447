//! End-to-end model assembly: the visual connector (pruning, temporal
//! aggregation, optional reconstruction), the lite language model, teacher
//! sample generation, and the closed-loop agent.

use std::collections::VecDeque;

use crate::config::{DdiaMode, Reduction, RunConfig};
use crate::ddia::{AttnCapture, AttnMode, DdiaLm, TokenStream, Waypoints};
use crate::error::Error;
use crate::losses::{rec_loss, total_loss, waypoint_loss, LossReport, LossWeights};
use crate::mefa::{MemoryBank, Mefa};
use crate::nn::ParamStore;
use crate::reconstruct::Reconstructor;
use crate::rng::RngStream;
use crate::scalar::lit;
use crate::sim::{
    oracle_waypoints, Agent, EgoState, FrameEncoder, Scenario, World, INSTR_VOCAB, WAYPOINT_DT,
};
use crate::sparsify::{gather_kept, sample_mask, MaskMode, RetentionMask, Sparsifier};
use crate::tape::NodeId;
use crate::{Graph, Real, Result, Tensor};

/// Connector output for one frame: language-width tokens plus the mask that
/// produced them (absent for the pooling arm).
pub struct ConnectorOut {
    pub f_v: NodeId,
    pub mask: Option<RetentionMask<Real>>,
}

/// The full trainable model. The frame encoder is frozen and lives outside
/// the parameter store.
pub struct Model {
    pub cfg: RunConfig,
    pub sparsifier: Sparsifier,
    pub mefa: Mefa,
    pub reconstructor: Reconstructor,
    pub lm: DdiaLm,
    pub encoder: FrameEncoder,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            sparsifier: Sparsifier::new("spars", cfg.channels)?,
            mefa: Mefa::new("mefa", cfg.channels, cfg.lm_dim, 2, cfg.heads)?,
            reconstructor: Reconstructor::new(
                "rec",
                cfg.n_tokens,
                cfg.channels,
                cfg.lm_dim,
                cfg.heads,
            )?,
            lm: DdiaLm::new(
                "lm",
                cfg.lm_dim,
                cfg.heads,
                cfg.blocks,
                INSTR_VOCAB,
                cfg.k_waypoints,
                cfg.lm_dim,
                cfg.rope_base,
            )?,
            encoder: FrameEncoder::new(cfg.n_tokens, cfg.channels, cfg.enc_seed),
            cfg: cfg.clone(),
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore<Real>> {
        let mut rng = RngStream::new(seed).derive(0x1217);
        let mut store = ParamStore::new();
        self.sparsifier.init(&mut store, &mut rng)?;
        self.mefa.init(&mut store, &mut rng)?;
        self.reconstructor.init(&mut store, &mut rng)?;
        self.lm.init(&mut store, &mut rng)?;
        Ok(store)
    }

    pub fn attn_mode(&self) -> AttnMode {
        match self.cfg.ddia {
            DdiaMode::On => AttnMode::Ddia,
            DdiaMode::Causal => AttnMode::Causal,
        }
    }

    /// Number of tokens the pooling arm reduces each frame to.
    pub fn pooled_tokens(&self) -> usize {
        ((self.cfg.retention_ratio * self.cfg.n_tokens as f64).ceil() as usize).max(1)
    }

    /// One frame through the connector: token reduction (per the configured
    /// strategy), temporal encoding against the memory bank, and Q-Former
    /// aggregation to the language width.
    pub fn connector_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore<Real>,
        f_i: NodeId,
        bank: &MemoryBank<Real>,
        mode: MaskMode,
        rng: &mut RngStream,
    ) -> Result<ConnectorOut> {
        let (kept, mask) = match self.cfg.reduction {
            Reduction::Ccdp | Reduction::DynamicPrune => {
                let scores = self.sparsifier.score_tokens(g, store, f_i)?;
                let mask = sample_mask(g, scores, lit::<Real>(self.cfg.tau), mode, rng)?;
                (gather_kept(g, f_i, &mask)?, Some(mask))
            }
            Reduction::Pooling => {
                let n = g.value(f_i).rows();
                let m = self.pooled_tokens();
                let mut pool = Tensor::zeros(m, n);
                let mut counts = vec![0usize; m];
                for j in 0..n {
                    counts[j * m / n] += 1;
                }
                for j in 0..n {
                    let gidx = j * m / n;
                    pool[(gidx, j)] = 1.0 / counts[gidx] as Real;
                }
                let p = g.constant(pool);
                (g.tape.matmul(p, f_i), None)
            }
        };
        let te = self.mefa.temporal_encoding(g, store, f_i, bank)?;
        let f_v = self.mefa.aggregate(g, store, kept, f_i, te)?;
        Ok(ConnectorOut { f_v, mask })
    }

    /// Connector over every frame, then the language model and waypoint
    /// head. Returns the prediction node (1×2K) plus stream and captures.
    #[allow(clippy::type_complexity)]
    pub fn forward_waypoints(
        &self,
        g: &mut Graph,
        store: &ParamStore<Real>,
        instruction: &[usize],
        f_vs: &[NodeId],
    ) -> Result<(NodeId, TokenStream, Vec<AttnCapture>)> {
        let (hidden, stream, captures) =
            self.lm.lm_forward(g, store, instruction, f_vs, self.attn_mode())?;
        let pred = self.lm.predict_waypoints(g, store, hidden, &stream)?;
        Ok((pred, stream, captures))
    }

    /// One optimization objective over a training sample: connector and
    /// auxiliary losses per frame, waypoint loss on the final prediction.
    /// Returns the loss root, the report, and the mean kept ratio.
    pub fn train_step(
        &self,
        g: &mut Graph,
        store: &ParamStore<Real>,
        sample: &TrainSample,
        mode: MaskMode,
        rng: &mut RngStream,
    ) -> Result<(NodeId, LossReport, f64)> {
        let weights =
            LossWeights::new(self.cfg.lambda1, self.cfg.lambda2, self.cfg.retention_ratio)?;
        self.train_step_weighted(g, store, sample, mode, rng, &weights)
    }

    /// `train_step` with explicit loss weights, so a trainer can schedule
    /// them (e.g. warm the reconstruction term in).
    pub fn train_step_weighted(
        &self,
        g: &mut Graph,
        store: &ParamStore<Real>,
        sample: &TrainSample,
        mode: MaskMode,
        rng: &mut RngStream,
        weights: &LossWeights,
    ) -> Result<(NodeId, LossReport, f64)> {
        if sample.frames.is_empty() {
            return Err(Error::Input("train_step: empty frame window".into()));
        }
        let mut bank = MemoryBank::new(self.cfg.memory_capacity);
        let mut f_vs = Vec::with_capacity(sample.frames.len());
        let mut frame_parts = Vec::with_capacity(sample.frames.len());
        let mut kept_sum = 0.0;
        let zero = g.constant(Tensor::zeros(1, 1));
        for frame in &sample.frames {
            let f_i = g.constant(frame.clone());
            let out = self.connector_forward(g, store, f_i, &bank, mode, rng)?;
            let prun = match (&out.mask, self.cfg.reduction) {
                (Some(mask), _) => {
                    crate::losses::prune_ratio_loss(g, mask, self.cfg.retention_ratio)?
                }
                (None, _) => zero,
            };
            let rec = match (&out.mask, self.cfg.reduction) {
                (Some(mask), Reduction::Ccdp) => {
                    let f_rec = self.reconstructor.assemble_rec_input(
                        g,
                        store,
                        out.f_v,
                        f_i,
                        mask,
                        self.cfg.scatter,
                    )?;
                    let f_hat = self.reconstructor.reconstruct(g, store, f_rec)?;
                    rec_loss(g, f_i, f_hat, mask)?
                }
                _ => zero,
            };
            kept_sum += out
                .mask
                .as_ref()
                .map(|m| m.kept_ratio())
                .unwrap_or(self.pooled_tokens() as f64 / self.cfg.n_tokens as f64);
            bank.push(frame.clone())?;
            f_vs.push(out.f_v);
            frame_parts.push((prun, rec));
        }
        let (pred, _, _) = self.forward_waypoints(g, store, &sample.instruction, &f_vs)?;
        let l_way = waypoint_loss(g, pred, &sample.gt)?;
        let parts: Vec<(NodeId, NodeId, NodeId)> =
            frame_parts.iter().map(|&(p, r)| (l_way, p, r)).collect();
        let (root, report) = total_loss(g, &parts, weights)?;
        Ok((root, report, kept_sum / sample.frames.len() as f64))
    }
}

/// Instruction context at route progress `s`: the active phrase plus the
/// phrases 15 m and 30 m ahead, as embedding-table token ids.
pub fn instruction_tokens(scenario: &Scenario, s: f64) -> Vec<usize> {
    vec![
        scenario.instruction_at(s),
        scenario.instruction_at(s + 15.0),
        scenario.instruction_at(s + 30.0),
    ]
}

/// One teacher-forced training sample: a short window of frames along a
/// route with pose jitter, supervised by route-oracle waypoints from the
/// (jittered) final pose so the model learns corrective trajectories.
pub struct TrainSample {
    pub instruction: Vec<usize>,
    pub frames: Vec<Tensor>,
    pub gt: Vec<(f64, f64)>,
}

pub fn make_train_sample(
    scenario: &Scenario,
    encoder: &FrameEncoder,
    cfg: &RunConfig,
    rng: &mut RngStream,
) -> TrainSample {
    let world = World::new(scenario);
    let s_final = rng.uniform_in(2.0, (scenario.route_length - 5.0).max(3.0));
    let lateral = (rng.normal() * 1.0).clamp(-2.5, 2.5);
    let heading_jitter = (rng.normal() * 0.15).clamp(-0.5, 0.5);
    let speed = rng.uniform_in(0.5 * cfg.target_speed, 1.25 * cfg.target_speed);

    let mut frames = Vec::with_capacity(cfg.window);
    let mut ego_final = None;
    for i in 0..cfg.window {
        let back = (cfg.window - 1 - i) as f64 * speed * WAYPOINT_DT;
        let s = (s_final - back).max(0.0);
        let (px, py) = scenario.point_at(s);
        let h = scenario.heading_at(s);
        let ego = EgoState {
            x: px - lateral * h.sin(),
            y: py + lateral * h.cos(),
            heading: h + heading_jitter,
            speed,
        };
        frames.push(encoder.encode(scenario, &world, &ego));
        ego_final = Some(ego);
    }
    let ego = ego_final.unwrap();
    let gt = oracle_waypoints(scenario, &ego, cfg.k_waypoints, cfg.target_speed);
    TrainSample {
        instruction: instruction_tokens(scenario, s_final),
        frames,
        gt: gt.points,
    }
}

/// Closed-loop policy wrapping the trained model: keeps a memory bank of raw
/// frame features and a sliding window of connector outputs, and re-runs the
/// language model each step in evaluation (deterministic) mask mode.
pub struct ModelAgent<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore<Real>,
    bank: MemoryBank<Real>,
    history: VecDeque<Tensor>,
    rng: RngStream,
}

impl<'a> ModelAgent<'a> {
    pub fn new(model: &'a Model, store: &'a ParamStore<Real>) -> Self {
        ModelAgent {
            model,
            store,
            bank: MemoryBank::new(model.cfg.memory_capacity),
            history: VecDeque::new(),
            rng: RngStream::new(0),
        }
    }

    /// Forward pass for the current step; also returns the attention
    /// captures and the graph so callers can export attention maps.
    pub fn forward_step(
        &mut self,
        scenario: &Scenario,
        world: &World,
        ego: &EgoState,
    ) -> Result<(Waypoints, TokenStream, Vec<AttnCapture>, Graph)> {
        let frame = self.model.encoder.encode(scenario, world, ego);
        let mut g = Graph::new();
        let f_i = g.constant(frame.clone());
        let out = self.model.connector_forward(
            &mut g,
            self.store,
            f_i,
            &self.bank,
            MaskMode::Eval,
            &mut self.rng,
        )?;
        self.bank.push(frame)?;
        self.history.push_back(g.value(out.f_v).clone());
        while self.history.len() > self.model.cfg.window {
            self.history.pop_front();
        }
        let f_vs: Vec<NodeId> = self.history.iter().map(|t| g.constant(t.clone())).collect();
        let (progress, _) = scenario.project(ego.x, ego.y);
        let instruction = instruction_tokens(scenario, progress);
        let (pred, stream, captures) =
            self.model.forward_waypoints(&mut g, self.store, &instruction, &f_vs)?;
        let waypoints = self.model.lm.decode_waypoints(&g, pred)?;
        Ok((waypoints, stream, captures, g))
    }
}

impl Agent for ModelAgent<'_> {
    fn reset(&mut self) {
        self.bank.clear();
        self.history.clear();
    }

    fn act(&mut self, scenario: &Scenario, world: &World, ego: &EgoState) -> Result<Waypoints> {
        let (waypoints, _, _, _) = self.forward_step(scenario, world, ego)?;
        Ok(waypoints)
    }
}
