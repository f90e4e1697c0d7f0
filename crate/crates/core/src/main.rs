use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsilo::cli::{self, CommonOptions};
use fedsilo::fv::argmax_lowest;

#[derive(Parser)]
#[command(name = "fedsilo", version, about = "Cross-silo federated training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output root directory.
    #[arg(long, env = "FEDSILO_OUT")]
    out: Option<PathBuf>,
    /// Derive all four seeds from this value.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl From<Common> for CommonOptions {
    fn from(c: Common) -> Self {
        CommonOptions {
            config: c.config,
            out: c.out,
            seed_override: c.seed_override,
            threads: c.threads,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method.
    Run(Common),
    /// Run all five methods and report deltas to the centralized baseline.
    Compare(Common),
    /// Score every lattice weighting of a 3-party checkpoint.
    Gridsearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        resolution: usize,
    },
    /// Finite-difference check of the model gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true, default_value_t = 0.0)]
        inject_gradient_error: f64,
    },
    /// Write the reference config with every default spelled out.
    InitConfig {
        #[arg(default_value = "fedsilo.toml")]
        path: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout();
    let result = match cli.command {
        Command::Run(c) => cli::cmd_run(&c.into()).map(|dir| println!("{}", dir.display())),
        Command::Compare(c) => cli::cmd_compare(&c.into(), &mut stdout).map(|dir| println!("{}", dir.display())),
        Command::Gridsearch {
            common,
            checkpoint,
            resolution,
        } => cli::cmd_gridsearch(&common.into(), &checkpoint, resolution).map(|(path, grid)| {
            let best = argmax_lowest(grid.iter().map(|g| g.total()));
            println!("{}", path.display());
            println!("argmax {:?} total {}", grid[best].weighting.as_slice(), grid[best].total());
        }),
        Command::Gradcheck {
            common,
            inject_gradient_error,
        } => match cli::cmd_gradcheck(&common.into(), inject_gradient_error, &mut stdout) {
            Ok(report) if report.passed() => Ok(()),
            Ok(_) => return ExitCode::FAILURE,
            Err(e) => Err(e),
        },
        Command::InitConfig { path } => cli::cmd_init_config(&path).map(|()| println!("{}", path.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
