use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use neuraug::experiment::{self, ExperimentConfig, Overrides};
use neuraug::gradcheck;

#[derive(Parser)]
#[command(name = "neuraug", version, about = "Data augmentation experiments on a small CNN")]
struct Cli {
    /// Override the seed of every experiment.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the epoch count of every experiment.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every `*.conf` file in a directory.
    Grid {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Check analytic gradients of every layer and loss against finite differences.
    GradCheck,
}

fn run(path: &Path, overrides: &Overrides) -> u8 {
    let result = ExperimentConfig::from_file(path).and_then(|mut cfg| {
        cfg.apply(overrides);
        experiment::run(&cfg).map(|s| (s, cfg.output_dir))
    });
    match result {
        Ok((s, out)) => {
            println!(
                "{}: best_val_acc={:.4} best_epoch={} outputs={}",
                s.name,
                s.best_val_acc,
                s.best_epoch,
                out.display()
            );
            0
        }
        Err(e) => {
            eprintln!("{}", experiment::error_line(&e));
            experiment::exit_code(&e) as u8
        }
    }
}

fn grid(dir: &Path, overrides: &Overrides) -> u8 {
    match experiment::grid(dir, overrides) {
        Ok(rows) => {
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            println!(
                "{} of {} experiments succeeded; summary in {}",
                rows.len() - failed,
                rows.len(),
                dir.join("grid_summary.csv").display()
            );
            if failed == 0 { 0 } else { 1 }
        }
        Err(e) => {
            eprintln!("{}", experiment::error_line(&e));
            experiment::exit_code(&e) as u8
        }
    }
}

fn grad_check() -> u8 {
    let report = gradcheck::run_suite();
    for r in &report.results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        match &r.error {
            Some(e) => println!("{status:4} {:32} error: {e}", r.name),
            None => println!("{status:4} {:32} max_rel_error={:.3e}", r.name, r.max_rel_error),
        }
    }
    println!(
        "{} items, tolerance {:e}, {:.1}s",
        report.results.len(),
        gradcheck::TOLERANCE,
        report.seconds
    );
    if report.passed() { 0 } else { 1 }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        epochs: cli.epochs,
    };
    ExitCode::from(match &cli.command {
        Command::Run { config } => run(config, &overrides),
        Command::Grid { dir } => grid(dir, &overrides),
        Command::GradCheck => grad_check(),
    })
}
