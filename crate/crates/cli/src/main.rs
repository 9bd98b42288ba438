use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use manta_cli::{
    run_bench, run_eval, run_gendata, run_gradcheck, run_sample, run_train, CliError, RunConfig,
};

#[derive(Parser)]
#[command(name = "manta", version, about = "Train and evaluate a diffusion action-anticipation generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (corpus for gen-data, run directory otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.n_blocks=6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its manifest.
    GenData(Common),
    /// Train a generator on the corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a trained run over the (α, β) grid.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Score observed and future frames instead of the future only.
        #[arg(long)]
        include_past: bool,
    },
    /// Draw samples for one episode.
    Sample(Common),
    /// Time forward passes against sequence length.
    Bench(Common),
    /// Check every parameter gradient against finite differences.
    GradCheck(Common),
}

fn resolve(c: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok((cfg, c.out.clone().unwrap_or_else(|| PathBuf::from("run"))))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => {
            let (mut cfg, _) = resolve(&c)?;
            if let Some(out) = &c.out {
                cfg.data.dir = out.clone();
            }
            let manifest = run_gendata(&cfg, &cfg.data.dir)?;
            println!("{}", manifest.display());
        }
        Command::Train { common, epochs } => {
            let (mut cfg, out) = resolve(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let s = run_train(&cfg, &out)?;
            if let Some(l) = s.epoch_losses.last() {
                println!("final loss {l:.6}");
            }
            println!("{}", s.checkpoint.display());
        }
        Command::Eval { common, include_past } => {
            let (mut cfg, out) = resolve(&common)?;
            cfg.eval.include_past |= include_past;
            let (report, _) = run_eval(&cfg, &out)?;
            print!("{}", report.to_csv());
        }
        Command::Sample(c) => {
            let (cfg, out) = resolve(&c)?;
            println!("{}", run_sample(&cfg, &out)?.display());
        }
        Command::Bench(c) => {
            let (cfg, out) = resolve(&c)?;
            print!("{}", manta_core::eval::bench_csv(&run_bench(&cfg, &out)?));
        }
        Command::GradCheck(c) => {
            let (cfg, _) = resolve(&c)?;
            let checks = run_gradcheck(&cfg)?;
            let worst = checks.iter().fold(0.0f64, |m, c| m.max(c.max_rel_err));
            println!("{} parameter tensors, worst relative error {worst:.2e}", checks.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
