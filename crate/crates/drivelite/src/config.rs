//! Run configuration: strict line-oriented `key = value` files, validation,
//! and an FNV-1a digest binding checkpoints to the config that produced them.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Error;
use crate::reconstruct::ScatterMode;
use crate::Result;

/// Token-reduction strategy for the connector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Cycle-consistent dynamic pruning (full pipeline).
    Ccdp,
    /// Pruning without the reconstruction objective.
    DynamicPrune,
    /// Uniform average pooling to the target token count.
    Pooling,
}

impl Reduction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ccdp" => Ok(Reduction::Ccdp),
            "dynamic_prune" => Ok(Reduction::DynamicPrune),
            "pooling" => Ok(Reduction::Pooling),
            other => Err(Error::Config(format!("unknown reduction '{other}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Reduction::Ccdp => "ccdp",
            Reduction::DynamicPrune => "dynamic_prune",
            Reduction::Pooling => "pooling",
        }
    }
}

/// Language-model attention variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdiaMode {
    On,
    Causal,
}

impl DdiaMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(DdiaMode::On),
            "causal" => Ok(DdiaMode::Causal),
            other => Err(Error::Config(format!("unknown ddia mode '{other}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DdiaMode::On => "on",
            DdiaMode::Causal => "causal",
        }
    }
}

fn parse_scatter(s: &str) -> Result<ScatterMode> {
    match s {
        "replace" => Ok(ScatterMode::Replace),
        "add" => Ok(ScatterMode::Add),
        other => Err(Error::Config(format!("unknown scatter mode '{other}'"))),
    }
}

fn scatter_str(m: ScatterMode) -> &'static str {
    match m {
        ScatterMode::Replace => "replace",
        ScatterMode::Add => "add",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model dims
    pub n_tokens: usize,
    pub channels: usize,
    pub lm_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub k_waypoints: usize,
    pub rope_base: f64,
    // objective
    pub retention_ratio: f64,
    pub memory_capacity: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    // optimization
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    pub steps: usize,
    pub window: usize,
    // evaluation
    pub eval_runs: usize,
    pub eval_seeds: usize,
    pub target_speed: f64,
    // world
    pub enc_seed: u64,
    pub n_obstacles: usize,
    pub n_stop_tags: usize,
    pub dt: f64,
    pub deviation_threshold: f64,
    pub block_timeout: usize,
    pub max_steps: usize,
    pub penalty_collision: f64,
    pub penalty_stop: f64,
    // ablation switches
    pub reduction: Reduction,
    pub ddia: DdiaMode,
    pub scatter: ScatterMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_tokens: 106,
            channels: 32,
            lm_dim: 64,
            heads: 4,
            blocks: 4,
            k_waypoints: 5,
            rope_base: 10000.0,
            retention_ratio: 0.3,
            memory_capacity: 10,
            lambda1: 10.0,
            lambda2: 1.0,
            tau: 1.0,
            lr: 1e-3,
            momentum: 0.9,
            grad_clip: 1.0,
            steps: 2000,
            window: 4,
            eval_runs: 3,
            eval_seeds: 8,
            target_speed: 4.0,
            enc_seed: 2024,
            n_obstacles: 2,
            n_stop_tags: 0,
            dt: 0.1,
            deviation_threshold: 5.0,
            block_timeout: 100,
            max_steps: 4000,
            penalty_collision: 0.60,
            penalty_stop: 0.70,
            reduction: Reduction::Ccdp,
            ddia: DdiaMode::On,
            scatter: ScatterMode::Replace,
        }
    }
}

impl RunConfig {
    /// Small configuration sized for a single desk machine.
    pub fn desk() -> Self {
        RunConfig { n_tokens: 16, ..RunConfig::default() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment;
    /// unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
        }
        match key {
            "n_tokens" => self.n_tokens = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "lm_dim" => self.lm_dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "k_waypoints" => self.k_waypoints = num(key, value)?,
            "rope_base" => self.rope_base = num(key, value)?,
            "retention_ratio" => self.retention_ratio = num(key, value)?,
            "memory_capacity" => self.memory_capacity = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "eval_runs" => self.eval_runs = num(key, value)?,
            "eval_seeds" => self.eval_seeds = num(key, value)?,
            "target_speed" => self.target_speed = num(key, value)?,
            "enc_seed" => self.enc_seed = num(key, value)?,
            "n_obstacles" => self.n_obstacles = num(key, value)?,
            "n_stop_tags" => self.n_stop_tags = num(key, value)?,
            "dt" => self.dt = num(key, value)?,
            "deviation_threshold" => self.deviation_threshold = num(key, value)?,
            "block_timeout" => self.block_timeout = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "penalty_collision" => self.penalty_collision = num(key, value)?,
            "penalty_stop" => self.penalty_stop = num(key, value)?,
            "reduction" => self.reduction = Reduction::parse(value)?,
            "ddia" => self.ddia = DdiaMode::parse(value)?,
            "scatter" => self.scatter = parse_scatter(value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_tokens", self.n_tokens),
            ("channels", self.channels),
            ("lm_dim", self.lm_dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("k_waypoints", self.k_waypoints),
            ("memory_capacity", self.memory_capacity),
            ("steps", self.steps),
            ("window", self.window),
            ("eval_runs", self.eval_runs),
            ("eval_seeds", self.eval_seeds),
            ("block_timeout", self.block_timeout),
            ("max_steps", self.max_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let positive_f = [
            ("rope_base", self.rope_base),
            ("tau", self.tau),
            ("lr", self.lr),
            ("grad_clip", self.grad_clip),
            ("target_speed", self.target_speed),
            ("dt", self.dt),
            ("deviation_threshold", self.deviation_threshold),
        ];
        for (name, v) in positive_f {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.retention_ratio <= 0.0 || self.retention_ratio > 1.0 {
            return Err(Error::Config(format!(
                "retention_ratio must be in (0, 1], got {}",
                self.retention_ratio
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda1/lambda2 must be non-negative".into()));
        }
        if self.lm_dim % self.heads != 0 || (self.lm_dim / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "lm_dim {} must split into an even per-head width across {} heads",
                self.lm_dim, self.heads
            )));
        }
        if self.channels % 4 != 0 {
            return Err(Error::Config(format!(
                "channels must be divisible by 4, got {}",
                self.channels
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        for (name, p) in [("penalty_collision", self.penalty_collision), ("penalty_stop", self.penalty_stop)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    /// Canonical text form: sorted `key = value` lines. Parsing it back
    /// reproduces the config exactly; the digest hashes this form.
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "block_timeout = {}\nblocks = {}\nchannels = {}\nddia = {}\ndeviation_threshold = {}\ndt = {}\nenc_seed = {}\neval_runs = {}\neval_seeds = {}\ngrad_clip = {}\nheads = {}\nk_waypoints = {}\nlambda1 = {}\nlambda2 = {}\nlm_dim = {}\nlr = {}\nmax_steps = {}\nmemory_capacity = {}\nmomentum = {}\nn_obstacles = {}\nn_stop_tags = {}\nn_tokens = {}\npenalty_collision = {}\npenalty_stop = {}\nreduction = {}\nretention_ratio = {}\nrope_base = {}\nscatter = {}\nsteps = {}\ntarget_speed = {}\ntau = {}\nwindow = {}\n",
            self.block_timeout,
            self.blocks,
            self.channels,
            self.ddia.as_str(),
            self.deviation_threshold,
            self.dt,
            self.enc_seed,
            self.eval_runs,
            self.eval_seeds,
            self.grad_clip,
            self.heads,
            self.k_waypoints,
            self.lambda1,
            self.lambda2,
            self.lm_dim,
            self.lr,
            self.max_steps,
            self.memory_capacity,
            self.momentum,
            self.n_obstacles,
            self.n_stop_tags,
            self.n_tokens,
            self.penalty_collision,
            self.penalty_stop,
            self.reduction.as_str(),
            self.retention_ratio,
            self.rope_base,
            scatter_str(self.scatter),
            self.steps,
            self.target_speed,
            self.tau,
            self.window,
        );
        s
    }

    /// FNV-1a (64-bit) over the canonical text.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_canonical_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn sim_params(&self) -> crate::sim::SimParams {
        crate::sim::SimParams {
            dt: self.dt,
            deviation_threshold: self.deviation_threshold,
            block_timeout: self.block_timeout,
            max_steps: self.max_steps,
            penalty_collision: self.penalty_collision,
            penalty_stop: self.penalty_stop,
            ..crate::sim::SimParams::default()
        }
    }
}
