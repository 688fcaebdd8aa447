//! Command-line front end: train, eval, ablate, correlate, attn, gradcheck.
//! All outputs are CSV files under `--out`; exit code 0 on success, 2 on
//! configuration errors, 3 on numeric failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drivelite::checkpoint::Checkpoint;
use drivelite::config::RunConfig;
use drivelite::error::Error;
use drivelite::harness;
use drivelite::sim::Tier;

#[derive(Parser)]
#[command(name = "drivelite", about = "Language-conditioned driving pipeline at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines); defaults to the desk config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for all randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for CSV/checkpoint artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write the checkpoint plus the training curve.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Closed-loop evaluation of a checkpoint over seeded scenarios.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Route-length tier.
        #[arg(long, default_value = "tiny")]
        tier: String,
    },
    /// Train/evaluate every arm of an ablation suite with paired seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// One of: ratio, capacity, reduction, ddia.
        #[arg(long)]
        suite: String,
    },
    /// Open-loop correlation between reconstruction and waypoint losses.
    Correlate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of held-out validation samples.
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Export attention maps from a short closed-loop episode.
    Attn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Episode steps to export.
        #[arg(long, default_value_t = 3)]
        steps: usize,
        /// Emit per-visual-query instruction-column mass instead of full maps.
        #[arg(long)]
        aggregate: bool,
    },
    /// Finite-difference gradient checks for all ops and pipeline composites.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> drivelite::Result<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::desk()),
    }
}

fn write_out(dir: &Path, name: &str, contents: &str) -> drivelite::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn run(cli: Cli) -> drivelite::Result<()> {
    match cli.cmd {
        Cmd::Train { common } => {
            let cfg = load_config(&common)?;
            let out = harness::train(&cfg, common.seed)?;
            std::fs::create_dir_all(&common.out)?;
            let curve = write_out(&common.out, "train_curve.csv", &out.curve_csv)?;
            let ckpt_path = common.out.join("model.ckpt");
            out.checkpoint.save(&ckpt_path)?;
            println!("curve: {}", curve.display());
            println!("checkpoint: {}", ckpt_path.display());
            println!("mean kept ratio (tail): {:.4}", out.kept_tail_mean);
            if let Some(r) = &out.last_report {
                println!("final losses: way {:.4} prun {:.6} rec {:.4} total {:.4}", r.l_way, r.l_prun, r.l_rec, r.total);
            }
            if out.diverged {
                return Err(Error::Numeric(
                    "training diverged; wrote last-good checkpoint".into(),
                ));
            }
            Ok(())
        }
        Cmd::Eval { common, ckpt, tier } => {
            let cfg = load_config(&common)?;
            let tier = Tier::parse(&tier)?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let eval = harness::evaluate(&cfg, &ckpt, tier, common.seed)?;
            let name = format!("eval_{}.csv", match tier {
                Tier::Tiny => "tiny",
                Tier::Short => "short",
                Tier::Long => "long",
            });
            let path = write_out(&common.out, &name, &eval.csv)?;
            println!("metrics: {}", path.display());
            println!(
                "overall: rc {:.4} is {:.4} ds {:.4} ± {:.4}",
                eval.rc_mean, eval.is_mean, eval.ds_mean, eval.ds_std
            );
            Ok(())
        }
        Cmd::Ablate { common, suite } => {
            let cfg = load_config(&common)?;
            let csv = harness::ablate(&cfg, &suite, common.seed)?;
            let path = write_out(&common.out, &format!("ablate_{suite}.csv"), &csv)?;
            println!("comparison: {}", path.display());
            Ok(())
        }
        Cmd::Correlate { common, ckpt, samples } => {
            let cfg = load_config(&common)?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let pairs = harness::open_loop_pairs(&cfg, &ckpt, samples, common.seed)?;
            let (r, scatter) = harness::correlate(&pairs)?;
            let path = write_out(&common.out, "correlation.csv", &scatter)?;
            println!("scatter: {}", path.display());
            println!("pearson r = {r:.4}");
            Ok(())
        }
        Cmd::Attn { common, ckpt, layer, head, steps, aggregate } => {
            let cfg = load_config(&common)?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let csv =
                harness::dump_attention(&cfg, &ckpt, common.seed, layer, head, steps, aggregate)?;
            let path = write_out(&common.out, "attention.csv", &csv)?;
            println!("attention: {}", path.display());
            Ok(())
        }
        Cmd::Gradcheck { common } => {
            let results = harness::gradcheck_suite(common.seed)?;
            let mut worst = 0.0f64;
            for (name, err) in &results {
                println!("{name}: {err:.3e}");
                worst = worst.max(*err);
            }
            if worst > 1e-4 {
                return Err(Error::Numeric(format!("gradient check failed: worst {worst:.3e}")));
            }
            println!("all {} checks passed (worst {worst:.3e})", results.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
