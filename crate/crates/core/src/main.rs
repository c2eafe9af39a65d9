use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lowmach::io::commands::{self, exit_code, Outcome, EXIT_CONFIG};
use lowmach::io::config::RunConfig;

#[derive(Parser)]
#[command(name = "lowmach", version, about = "Subsonic potential flow past an obstacle and its low Mach number limit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Base output directory; overrides output.directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Seed for the test-field panel; overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the incompressible reference flow.
    SolveIncompressible(Common),
    /// Solve the compressible flow for one ε.
    SolveCompressible {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epsilon: f64,
    },
    /// Run the ε-sweep and write the convergence report.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Exit 5 when a headline slope misses its tolerance.
        #[arg(long)]
        assert_rates: bool,
    },
    /// Check the force hypotheses and write the verdict.
    ValidateForce(Common),
    /// Write the mesh in text form.
    DumpMesh(Common),
}

fn load(common: &Common) -> lowmach::Result<RunConfig> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(lowmach::Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| lowmach::Error::Config(format!("--threads: {e}")))?;
    }
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(dir) = &common.out {
        cfg.output.directory = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> lowmach::Result<Outcome> {
    match cli.command {
        Command::SolveIncompressible(c) => commands::solve_incompressible_cmd(&load(&c)?),
        Command::SolveCompressible { common, epsilon } => commands::solve_compressible_cmd(&load(&common)?, epsilon),
        Command::Sweep { common, assert_rates } => commands::sweep_cmd(&load(&common)?, assert_rates),
        Command::ValidateForce(c) => commands::validate_force_cmd(&load(&c)?),
        Command::DumpMesh(c) => commands::dump_mesh(&load(&c)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(out) => {
            println!("{}", out.directory.display());
            for f in &out.files {
                println!("  {f}");
            }
            if out.code == 0 {
                println!("{}", out.message);
            } else {
                eprintln!("{}", out.message);
            }
            ExitCode::from(out.code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
