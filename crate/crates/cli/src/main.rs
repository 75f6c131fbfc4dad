use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mixformer::flopsmeter::ScalingAxis;
use mixformer::{Error, Result};
use mixformer_cli::commands::{cmd_ablate, cmd_bench_rlb, cmd_eval, cmd_flops, cmd_gen, cmd_train};
use mixformer_cli::config::{Overrides, RunConfig};
use mixformer_cli::exit_code;

#[derive(Parser)]
#[command(name = "mixformer", version, about = "MixFormer ranking models on synthetic recommendation data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model shape preset.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for evaluation and generation.
    #[arg(long, global = true, env = "MIXFORMER_THREADS")]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Dense,
    Sequence,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its oracle.
    Gen,
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from the checkpoint and optimizer state in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Score the holdout split with a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Analytic FLOPs and parameter report.
    Flops {
        #[arg(long, value_enum)]
        axis: Option<Axis>,
        /// Count with request-level batching.
        #[arg(long)]
        rlb: bool,
        #[arg(long)]
        candidates: Option<usize>,
    },
    /// Request-level batching against per-candidate inference.
    BenchRlb {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train the base config and the six single-switch variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let overrides = Overrides { seed: c.seed, preset: c.preset.clone() };
    let mut cfg = RunConfig::load(c.config.as_deref(), &overrides)?;
    let out = &c.out;
    match cli.command {
        Command::Gen => {
            let r = cmd_gen(&mut cfg, out)?;
            println!(
                "generated {} requests ({} impressions), temperature {}, oracle auc finish {:.4} skip {:.4}",
                r.generated.dataset.requests.len(),
                r.generated.dataset.n_impressions(),
                cfg.generator.temperature,
                r.oracle_auc[0],
                r.oracle_auc[1]
            );
        }
        Command::Train { data, resume } => {
            let r = cmd_train(&cfg, &data, out, resume)?;
            let last = r.log.last().map_or(f64::NAN, |l| l.loss);
            println!("trained {} steps, final loss {last:.5}, holdout auc {:?}", r.log.len(), r.model.auc);
            if let Some(b) = &r.baseline {
                println!("baseline holdout auc {:?}", b.auc);
            }
            if let Some(o) = &r.oracle {
                println!("oracle holdout auc {:?}", o.auc);
            }
        }
        Command::Eval { data, model } => {
            let s = cmd_eval(&cfg, &data, &model, out)?;
            println!("holdout auc {:?} uauc {:?} log loss {:.5}", s.auc, s.uauc, s.log_loss);
        }
        Command::Flops { axis, rlb, candidates } => {
            if let Some(a) = axis {
                cfg.flops.axis = Some(match a {
                    Axis::Dense => ScalingAxis::Dense,
                    Axis::Sequence => ScalingAxis::Sequence,
                });
            }
            cfg.flops.rlb |= rlb;
            if let Some(k) = candidates {
                cfg.flops.candidates = k;
            }
            let r = cmd_flops(&cfg, out)?;
            println!("params {}, flops per request {}", r.report.params, r.report.per_request());
            if let Some(s) = r.rlb_savings {
                println!("rlb savings at K={}: {s:.4}", cfg.flops.candidates);
            }
        }
        Command::BenchRlb { data, model } => {
            for r in cmd_bench_rlb(&cfg, &data, model.as_deref(), out)? {
                println!(
                    "K={:<4} max rel dev {:.2e}  flops savings {:.4}  speedup {:.2}x",
                    r.k, r.max_rel_deviation, r.flops_savings, r.speedup
                );
            }
        }
        Command::Ablate { data } => {
            for r in cmd_ablate(&cfg, &data, out)? {
                println!("{:<16} final loss {:.5}  delta auc {:?}", r.name, r.final_loss, r.delta.auc);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
