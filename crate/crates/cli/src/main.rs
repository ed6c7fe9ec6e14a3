//! `protofed`: run the federated prompt simulator and its experiments.
//!
//! Exit codes: 0 success, 1 invariant violation or failed certificate,
//! 2 configuration error. Log verbosity comes from `PROTOFED_LOG`
//! (`error`, `warn`, `info`, `debug`; default `warn`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use protofed::config::RunConfig;
use protofed::experiments;
use protofed::par::{self, Parallelism};
use protofed::theory::Corruption;
use protofed::Result;

#[derive(Parser)]
#[command(name = "protofed", version, about = "Federated dual-timescale prompt simulator")]
struct Cli {
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override the seed. Multi-seed commands then use this seed only.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Corrupt {
    FlipEtaSign,
}

#[derive(Subcommand)]
enum Command {
    /// Train over every slice and write metrics.
    Run {
        #[command(flatten)]
        common: Common,
        /// Load the world from a line-JSON world file instead of generating it.
        #[arg(long)]
        world: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Generate the configured world and write it as `world.jsonl`.
    World {
        #[command(flatten)]
        common: Common,
    },
    /// Full model, four single-factor ablations and two alternative aggregators.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Final NDCG, forgetting and epsilon over the configured noise grid.
    DpSweep {
        #[command(flatten)]
        common: Common,
    },
    /// Numerical certificates for the regret and contraction bounds.
    VerifyTheory {
        #[command(flatten)]
        common: Common,
        /// Inject a known defect; the certificate must then fail.
        #[arg(long, value_enum)]
        corrupt: Option<Corrupt>,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
        cfg.experiment.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let mode = if cli.sequential { Parallelism::Sequential } else { Parallelism::Rayon };
    if cli.threads > 0 {
        par::init_threads(cli.threads);
    }
    match cli.command {
        Command::Run { common, world, resume } => {
            let cfg = load(&common)?;
            let w = experiments::load_or_generate(&cfg, world.as_deref())?;
            let out = experiments::run_to_dir(&cfg, &w, &cfg.out, mode, resume)?;
            let r = &out.report;
            println!(
                "final_ndcg10 {:.4}  af {:.4}  bwt {:.4}  fwt {:.4}  steps_to_95 {:.2}  uploads {}",
                r.final_ndcg10, r.af, r.bwt, r.fwt, r.mean_steps_to_95, r.uploads
            );
            println!("wrote {}", cfg.out.display());
            Ok(true)
        }
        Command::World { common } => {
            let cfg = load(&common)?;
            let path = experiments::write_world_file(&cfg, &cfg.out)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Ablate { common } => {
            let cfg = load(&common)?;
            let rows = experiments::ablate(&cfg, &cfg.out, mode)?;
            println!("{:<22} {:>8} {:>8} {:>8}", "variant", "ndcg10", "af", "steps95");
            for r in &rows {
                println!("{:<22} {:>8.4} {:>8.4} {:>8.2}", r.variant, r.final_ndcg10, r.af, r.mean_steps_to_95);
            }
            println!("wrote {}", cfg.out.join("ablation.csv").display());
            Ok(true)
        }
        Command::DpSweep { common } => {
            let cfg = load(&common)?;
            let rows = experiments::dp_sweep(&cfg, &cfg.out, mode)?;
            println!("{:>6} {:>8} {:>8} {:>12}", "sigma", "ndcg10", "af", "epsilon");
            for r in &rows {
                println!("{:>6} {:>8.4} {:>8.4} {:>12.4}", r.sigma, r.final_ndcg10, r.af, r.epsilon);
            }
            println!("wrote {}", cfg.out.join("dp_sweep.csv").display());
            Ok(true)
        }
        Command::VerifyTheory { common, corrupt } => {
            let mut cfg = load(&common)?;
            if let Some(Corrupt::FlipEtaSign) = corrupt {
                cfg.theory.corruption = Corruption::FlipEtaSign;
            }
            let cert = experiments::verify_theory(&cfg, &cfg.out, mode)?;
            report_certificate(&cert, &cfg.out.join(experiments::CERTIFICATE_FILE));
            Ok(cert.passed)
        }
    }
}

fn report_certificate(cert: &protofed::theory::TheoryCertificate, path: &Path) {
    for (name, s) in [
        ("regret", &cert.regret),
        ("three_point", &cert.three_point),
        ("contraction", &cert.contraction),
        ("l1", &cert.l1),
    ] {
        println!("{name:<12} {}/{} min slack {:.3e} (seed {})", s.passed, s.instances, s.min_slack, s.worst_seed);
    }
    println!("kappa, alpha at H = I, lambda = 1: {:?}", cert.identity_kappa_alpha);
    println!("{} {}", if cert.passed { "PASS" } else { "FAIL" }, path.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PROTOFED_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("protofed: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
