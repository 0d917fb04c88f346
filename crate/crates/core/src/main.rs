use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use gaussrep::config::{parse_config, Overrides};
use gaussrep::report::run;

/// Drift-energy estimates of Gaussian relative entropy and functional
/// inequality checks.
#[derive(Parser, Debug)]
#[command(name = "gaussrep", version)]
struct Cli {
    /// entropy, laplace, optimize, talagrand, lsi, epi, bl, rbl or verify-all
    command: String,
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of simulated paths
    #[arg(long)]
    paths: Option<usize>,
    /// Number of time steps on [0, 1]
    #[arg(long)]
    steps: Option<usize>,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<String>,
    /// Write recorded trajectories as CSV next to the report
    #[arg(long)]
    dump_paths: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let text = match fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", cli.config.display());
            return ExitCode::from(1);
        }
    };
    let overrides = Overrides {
        command: Some(cli.command.clone()),
        seed: cli.seed,
        paths: cli.paths,
        steps: cli.steps,
        output: cli.out.clone(),
        dump_paths: cli.dump_paths,
    };
    let cfg = match parse_config(&text, &overrides) {
        Ok(c) => c,
        Err(errors) => {
            for e in &errors {
                eprintln!("schema error: {e}");
            }
            return ExitCode::from(1);
        }
    };
    let report = match run(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let json = report.to_json();
    match &cfg.output {
        Some(path) => {
            if let Err(e) = fs::write(path, format!("{json}\n")) {
                eprintln!("error: cannot write {path}: {e}");
                return ExitCode::from(1);
            }
        }
        None => println!("{json}"),
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for v in report.verdicts.iter().filter(|v| v.is_violation()) {
        eprintln!("violation: {} (margin {:e})", v.name, v.margin);
    }
    ExitCode::from(report.exit_code() as u8)
}
