use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kan_ntk_cli::commands::{
    cmd_gradcheck, cmd_gram_scaling, cmd_init_loss, cmd_lazy_scaling, cmd_pinn, cmd_sgd_expectation, cmd_train, Outcome,
};
use kan_ntk_cli::config::ExperimentConfig;
use kan_ntk_cli::{CliError, OUTPUT_ROOT_VAR};
use serde::Serialize;

/// Convergence studies for two-layer Kolmogorov-Arnold networks.
///
/// Exit status: 0 when every check passes, 1 on a check breach or run
/// failure, 2 on a configuration error.
#[derive(Parser)]
#[command(name = "kan-ntk", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Finite-difference checks of every analytic derivative.
    Gradcheck(Args),
    /// GD or SGD on a regression task.
    Train(Args),
    /// Gram concentration around its expectation across widths.
    GramScaling(Args),
    /// Parameter drift after training across widths.
    LazyScaling(Args),
    /// Initial loss against basis size.
    InitLoss(Args),
    /// Seed-averaged SGD loss curves at a fixed initialization.
    SgdExpectation(Args),
    /// Physics-informed training on a manufactured problem.
    Pinn(Args),
}

#[derive(clap::Args, Clone)]
struct Args {
    /// JSON experiment config.
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; defaults to `$KAN_NTK_OUTPUT_ROOT/<subcommand>` (root `runs`).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn emit<T: Serialize>(result: Result<Outcome<T>, CliError>, out: &Path) -> ExitCode {
    match result {
        Ok(o) => {
            println!("{}", serde_json::to_string_pretty(&o.report).expect("report serializes"));
            println!("{} -> {}", if o.passed { "PASS" } else { "FAIL" }, out.display());
            ExitCode::from(u8::from(!o.passed))
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Gradcheck(a) => ("gradcheck", a),
        Command::Train(a) => ("train", a),
        Command::GramScaling(a) => ("gram-scaling", a),
        Command::LazyScaling(a) => ("lazy-scaling", a),
        Command::InitLoss(a) => ("init-loss", a),
        Command::SgdExpectation(a) => ("sgd-expectation", a),
        Command::Pinn(a) => ("pinn", a),
    };
    let out = match &args.out {
        Some(o) => o.clone(),
        None => PathBuf::from(std::env::var(OUTPUT_ROOT_VAR).unwrap_or_else(|_| "runs".into())).join(name),
    };
    let cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match cli.command {
        Command::Gradcheck(_) => emit(cmd_gradcheck(&cfg, &out), &out),
        Command::Train(_) => emit(cmd_train(&cfg, &out), &out),
        Command::GramScaling(_) => emit(cmd_gram_scaling(&cfg, &out), &out),
        Command::LazyScaling(_) => emit(cmd_lazy_scaling(&cfg, &out), &out),
        Command::InitLoss(_) => emit(cmd_init_loss(&cfg, &out), &out),
        Command::SgdExpectation(_) => emit(cmd_sgd_expectation(&cfg, &out), &out),
        Command::Pinn(_) => emit(cmd_pinn(&cfg, &out), &out),
    }
}
