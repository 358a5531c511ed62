use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ictlab::experiment::{self, ExperimentConfig};
use ictlab::meta::Method;
use ictlab::Error;

#[derive(Parser)]
#[command(name = "ictlab", version, about = "In-context tuning experiments on synthetic few-shot suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task suite and fold assignment.
    Gen(Common),
    /// Meta-train a method and save its checkpoint.
    Train(Common),
    /// Evaluate a saved run on the fold's test tasks.
    Eval(Common),
    /// Variance decomposition of a saved run.
    Sense(Common),
    /// Grid search on validation tasks; test metrics for the winner only.
    Grid(Common),
    /// Per-fold and fold-averaged result tables.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// One of ict, fomaml, inst, inst-ft, raw.
    #[arg(long)]
    method: Option<Method>,
    /// Run a single K instead of the configured list.
    #[arg(long)]
    shots: Option<usize>,
}

impl Common {
    fn config(&self) -> ictlab::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(f) = self.fold {
            cfg.folds.fold = f;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        if let Some(m) = self.method {
            cfg.method.name = m;
        }
        if let Some(k) = self.shots {
            cfg.method.shots = vec![k];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn shots(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut ks: Vec<usize> = cfg.method.shots.iter().map(|&k| experiment::effective_k(cfg.method.name, k)).collect();
    ks.dedup();
    ks
}

fn run(cli: Cli) -> ictlab::Result<()> {
    match cli.command {
        Command::Gen(c) => {
            let cfg = c.config()?;
            let m = experiment::cmd_gen(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Train(c) => {
            let cfg = c.config()?;
            for k in shots(&cfg) {
                let dir = experiment::cmd_train(&cfg, k)?;
                println!("{}", dir.display());
            }
        }
        Command::Eval(c) => {
            let cfg = c.config()?;
            for k in shots(&cfg) {
                let s = experiment::cmd_eval(&cfg, k)?;
                let auc = s.macro_auc.map_or_else(|| "-".into(), |a| format!("{a:.4}"));
                println!("{} K={} P@1={:.4} AUC={auc}", s.method, s.k, s.macro_p_at_1);
            }
        }
        Command::Sense(c) => {
            let cfg = c.config()?;
            for k in shots(&cfg) {
                let r = experiment::cmd_sense(&cfg, k)?;
                println!("{}", serde_json::to_string_pretty(&r)?);
            }
        }
        Command::Grid(c) => {
            let cfg = c.config()?;
            for k in shots(&cfg) {
                let w = experiment::cmd_grid(&cfg, k)?;
                println!("{}", serde_json::to_string_pretty(&w)?);
            }
        }
        Command::Report(c) => {
            let cfg = c.config()?;
            let r = experiment::cmd_report(&cfg)?;
            print!("{}", experiment::render_report(&r));
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Toml(_) | Error::BudgetExceeded { .. } => 2,
        Error::Divergence { .. } | Error::NonFiniteGradient { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
