use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use blowup_cli::{
    cmd_family, cmd_moments, cmd_phi, cmd_pipeline, cmd_reduce, cmd_residual_slope, cmd_solve_vq,
    cmd_verify, run, Outcome, RunConfig, Status,
};
use blowup_core::WeylDenominator;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "blowup",
    version,
    about = "Bubble blow-up construction pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    allow_low_dim: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of generated samples when no curvature file is given.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Curvature JSON file.
    #[arg(long, global = true)]
    curvature: Option<PathBuf>,
    /// JSON map from label to neighbor labels.
    #[arg(long, global = true)]
    adjacency: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    residual_samples: Option<u64>,
    #[arg(long, global = true, value_enum)]
    weyl_denominator: Option<WeylArg>,
    /// Skip the slope experiments in `pipeline`.
    #[arg(long, global = true)]
    no_slopes: bool,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeylArg {
    Proof,
    Statement,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant battery and write verify.json.
    Verify,
    /// Write the moment table.
    Moments,
    /// Solve the corrector for each point.
    SolveVq,
    /// Compute φ for each point.
    Phi,
    /// Pick the blow-up point.
    Reduce,
    /// Tabulate the bubble family.
    Family,
    /// Residual decay ladders.
    ResidualSlope,
    /// Everything, end to end.
    Pipeline,
}

fn config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(n) = common.n {
        cfg.n = n;
    }
    cfg.allow_low_dim |= common.allow_low_dim;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.samples {
        cfg.samples = s;
    }
    if let Some(p) = &common.curvature {
        cfg.curvature = Some(p.clone());
    }
    if let Some(p) = &common.adjacency {
        cfg.adjacency = Some(p.clone());
    }
    if let Some(p) = &common.out_dir {
        cfg.out_dir = p.clone();
    }
    if let Some(s) = common.residual_samples {
        cfg.residual_samples = s;
    }
    if let Some(w) = common.weyl_denominator {
        cfg.weyl_denominator = match w {
            WeylArg::Proof => WeylDenominator::Proof,
            WeylArg::Statement => WeylDenominator::Statement,
        };
    }
    if common.no_slopes {
        cfg.run_slopes = false;
    }
    Ok(cfg)
}

fn threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("BLOWUP_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("BLOWUP_THREADS={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match threads().and_then(|_| config(&cli.common)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(Status::Failure.code() as u8);
        }
    };
    if cli.common.print_config {
        println!("{}", cfg.to_json());
        return ExitCode::SUCCESS;
    }
    let outcome: Outcome = run(|| match cli.command {
        Command::Verify => cmd_verify(&cfg),
        Command::Moments => cmd_moments(&cfg),
        Command::SolveVq => cmd_solve_vq(&cfg),
        Command::Phi => cmd_phi(&cfg),
        Command::Reduce => cmd_reduce(&cfg),
        Command::Family => cmd_family(&cfg),
        Command::ResidualSlope => cmd_residual_slope(&cfg),
        Command::Pipeline => cmd_pipeline(&cfg),
    });
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    let tag = if outcome.status == Status::Pass {
        "ok"
    } else {
        "error"
    };
    eprintln!("{tag}: {}", outcome.message);
    ExitCode::from(outcome.status.code() as u8)
}
