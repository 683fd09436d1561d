use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use bundleflow::cli::{self, RunArgs};

/// Harmonic and Poisson metrics on flat lattice bundles.
#[derive(Parser, Debug)]
#[command(name = "bundleflow", version)]
struct Args {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Seed for random initial metrics.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which is reserved for divergence
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = args.threads {
        cli::set_threads(n);
    }
    let run = cli::load_config(&args.config).and_then(|cfg| {
        cli::run_scenario(&cfg, &RunArgs { resume: args.resume, out: args.out, seed: args.seed })
    });
    match run {
        Ok(o) => {
            print!("{}", o.report);
            ExitCode::from(o.status as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
