use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use overlap_wishart_cli::config::{ExperimentConfig, OutputFormat};
use overlap_wishart_cli::{execute, CliError, Command, Overrides, DEFAULT_Z_THRESHOLD, EXIT_CONFIG, EXIT_RUNTIME};

/// Covariance of trace powers of overlapping dynamical Wishart matrices.
#[derive(Debug, Parser)]
#[command(name = "owishart", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Experiment file (TOML).
    config: PathBuf,
    /// Output format; overrides `[output] format`.
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
    /// Output file; overrides `[output] path`. Standard output when neither is set.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the simulation; overrides `[mc] workers`.
    #[arg(long)]
    workers: Option<usize>,
    /// Largest |z| accepted by `compare` and `validate`.
    #[arg(long, default_value_t = DEFAULT_Z_THRESHOLD)]
    z_threshold: f64,
    /// Print the configuration after defaults and overrides, then exit.
    #[arg(long)]
    dump_effective_config: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    ExitCode::from(run(args) as u8)
}

fn run(args: Args) -> i32 {
    let overrides = Overrides {
        format: args.format,
        out: args.out.clone(),
        workers: args.workers,
    };
    let cfg = ExperimentConfig::load(&args.config).and_then(|mut cfg| {
        overrides.apply(&mut cfg)?;
        Ok(cfg)
    });
    let cfg = match cfg {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if args.dump_effective_config {
        print!("{}", cfg.to_toml());
        return 0;
    }
    let outcome = match execute(args.command, &cfg, args.z_threshold) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let text = outcome.render(cfg.output.format);
    match &cfg.output.path {
        Some(path) => {
            if let Err(e) = std::fs::write(path, text) {
                let e = CliError::Runtime(format!("cannot write {}: {e}", path.display()));
                eprintln!("error: {e}");
                return EXIT_RUNTIME;
            }
        }
        None => print!("{text}"),
    }
    outcome.exit_code()
}
