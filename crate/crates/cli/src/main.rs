use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpfpl::config::RunConfig;
use dpfpl::harness::{self, GridSpec, MiaConfig};
use dpfpl::Error;

/// Differentially private federated prompt learning simulator.
#[derive(Debug, Parser)]
#[command(name = "dpfpl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file (run config, grid spec or MIA config depending on the command).
    #[arg(long, env = "DPFPL_CONFIG")]
    config: PathBuf,

    /// Output root; artifacts go into fresh subdirectories.
    #[arg(long, env = "DPFPL_OUT", default_value = "runs")]
    out: PathBuf,

    /// Override the master seed of the config.
    #[arg(long, env = "DPFPL_SEED")]
    seed: Option<u64>,

    /// Worker threads for clients and sweep cells (default: all cores).
    #[arg(long, env = "DPFPL_THREADS")]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one config (each seed repetition gets its own directory).
    Run(Common),
    /// Run a grid over variants, epsilons, ranks and seeds.
    Sweep(Common),
    /// Membership-inference attack against a finished run.
    Mia(Common),
    /// Check a run config without running it.
    Validate(Common),
}

fn run(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), Error> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        config.seeds.master = s;
    }
    let mut first_err = None;
    for s in harness::seeds_of(&config) {
        let output = harness::run_to_dir(&config, s, out)?;
        println!("{}", output.dir.display());
        if let Some(e) = output.error {
            eprintln!("error: seed {s}: {e} (partial artifact in {})", output.dir.display());
            first_err.get_or_insert(e);
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn sweep(grid_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), Error> {
    let mut grid = GridSpec::load(grid_path)?;
    if let Some(s) = seed {
        grid.seeds = vec![s];
    }
    let output = harness::sweep(&grid, out)?;
    let failed = output.rows.iter().filter(|r| !r.failures.is_empty()).count();
    println!("{}", output.dir.join("summary.csv").display());
    if failed > 0 {
        eprintln!("warning: {failed} of {} cells had failed runs", output.rows.len());
    }
    Ok(())
}

fn mia(config_path: &Path, out: &Path) -> Result<(), Error> {
    let cfg = MiaConfig::load(config_path)?;
    let (path, report) = harness::mia_to_dir(&cfg, out)?;
    println!("{}", path.display());
    println!(
        "success_rate {:.4} [{:.4}, {:.4}] over {} queries",
        report.success_rate, report.ci_low, report.ci_high, report.n_queries
    );
    Ok(())
}

fn dispatch(command: &Command) -> Result<(), Error> {
    match command {
        Command::Run(c) => run(&c.config, &c.out, c.seed),
        Command::Sweep(c) => sweep(&c.config, &c.out, c.seed),
        Command::Mia(c) => mia(&c.config, &c.out),
        Command::Validate(c) => {
            let config = RunConfig::load(&c.config)?;
            println!("ok {}", config.hash());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Run(c) | Command::Sweep(c) | Command::Mia(c) | Command::Validate(c) => c,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| dispatch(&cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
