use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use softcot::experiment::{evaluate, run_sweep, run_training, ExperimentConfig, SweepAxis};
use softcot::model::ModelParams;
use softcot::rl::check_rloo_gradient;
use softcot::rollout::{GenMode, NoisePlacement};
use softcot::tasks::{format_prompt, generate_dataset, Dataset, TaskSpec};
use softcot::Error;

#[derive(Parser)]
#[command(name = "softcot", version, about = "RL over hard, soft and fuzzy chains of thought on a tiny transformer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment TOML; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> softcot::Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p, &self.overrides),
            None => ExperimentConfig::from_toml("", &self.overrides),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/val/test splits from a task spec.
    GenData {
        /// Task spec TOML (fields of the `[task]` section).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm start (unless --init) and RLOO training into the run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Start RL from this checkpoint instead of the warm-started base.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from the latest training state in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Six-setting evaluation of a checkpoint; writes metrics CSVs.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; regenerated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; defaults to `<run_dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the RLOO gradient on the configured model.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Modes to check.
        #[arg(long, value_delimiter = ',', default_value = "soft,fuzzy")]
        modes: Vec<String>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Rollouts in the checked group.
        #[arg(long, default_value_t = 2)]
        samples: usize,
    },
    /// One training run per value of an ablation axis on a shared base.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// noise_scale, temperature or placement.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the standard grid when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

/// Exit 1 for bad input or a failed check, 2 for internal errors.
enum Failure {
    Usage(String),
    Internal(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::InvalidConfig(_)
            | Error::ConfigMismatch(_)
            | Error::InfeasibleSpec(_)
            | Error::Checkpoint(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Unencodable(_)
            | Error::EmptyQuestion
            | Error::TooFewSamples { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::GenData { spec, out } => {
            let spec: TaskSpec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
                    toml::from_str(&text).map_err(|e| Failure::Usage(e.to_string()))?
                }
                None => TaskSpec::default(),
            };
            let data = generate_dataset(&spec)?;
            data.save(&out)?;
            println!(
                "{} train / {} val / {} test examples in {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                out.display()
            );
        }
        Cmd::Train { cfg, init, resume } => {
            let cfg = cfg.load()?;
            let init = init.map(|p| ModelParams::load(&p)).transpose()?;
            let (_, outcome) = run_training(&cfg, init, resume)?;
            println!(
                "{}",
                serde_json::json!({
                    "run_dir": cfg.run_dir(),
                    "steps": outcome.log.last().map_or(0, |l| l.step + 1),
                    "initial_validation": outcome.initial_success(),
                    "best_validation": outcome.best_success(),
                    "best_step": outcome.best_step,
                })
            );
        }
        Cmd::Eval {
            cfg,
            checkpoint,
            data,
            out,
        } => {
            let cfg = cfg.load()?;
            let params = ModelParams::load(&checkpoint)?;
            let data = match data {
                Some(d) => Dataset::load(&d)?,
                None => generate_dataset(&cfg.task)?,
            };
            let out = out.unwrap_or_else(|| cfg.run_dir().join("eval"));
            let records = evaluate(&cfg, &params, &data, Some(&out))?;
            println!("{:<14} {:>8} {:>8} {:>8}", "setting", "pass@1", "pass@32", "success");
            for r in &records {
                println!(
                    "{:<14} {:>8.3} {:>8.3} {:>8.3}",
                    r.setting.as_str(),
                    r.pass(1).unwrap_or(f64::NAN),
                    r.pass_at.last().map_or(f64::NAN, |p| p.1),
                    r.mean_success
                );
            }
            if let Some(nll) = records.first().and_then(|r| r.nll_correct) {
                println!("nll of correct answer: {nll:.4}");
            }
            println!("csv written to {}", out.display());
        }
        Cmd::GradCheck {
            cfg,
            modes,
            tolerance,
            step,
            samples,
        } => {
            let cfg = cfg.load()?;
            let params = ModelParams::init(cfg.model.clone(), &mut softcot::seed::rng(cfg.seed, "init", &[]))?;
            let sigma = cfg.train.noise_scale * softcot::model::rms_embedding_norm(params.embedding());
            let prompt = format_prompt("12+34").map_err(Failure::from)?;
            let rewards: Vec<f64> = (0..samples).map(|i| if i % 2 == 0 { 100.0 } else { 0.0 }).collect();
            let mut worst: f64 = 0.0;
            for m in &modes {
                let mode = match m.as_str() {
                    "hard" => GenMode::Hard,
                    "soft" => GenMode::Soft,
                    "fuzzy" => GenMode::Fuzzy,
                    _ => return Err(Failure::Usage(format!("unknown mode {m:?}"))),
                };
                let mut rcfg = cfg.rollout.build().with_sigma(sigma);
                rcfg.mode = mode;
                if cfg.rollout.cot_temperature.is_none() {
                    rcfg.cot_temperature = mode.default_temperature();
                }
                if mode == GenMode::Hard {
                    rcfg.placement = NoisePlacement::Embedding;
                }
                let report = check_rloo_gradient(&params, &prompt, &rcfg, &rewards, cfg.seed, step, tolerance)?;
                println!(
                    "{:<6} max relative error {:.3e} (param {}), max abs error {:.3e}",
                    mode.name(),
                    report.max_relative_error,
                    params.names()[report.worst_param],
                    report.max_abs_error
                );
                worst = worst.max(report.max_relative_error);
            }
            if !(worst < tolerance) {
                return Err(Failure::Check(format!("max relative error {worst:.3e} >= {tolerance:e}")));
            }
            println!("ok: max relative error {worst:.3e} < {tolerance:e}");
        }
        Cmd::Sweep { cfg, axis, values } => {
            let cfg = cfg.load()?;
            let axis: SweepAxis = axis.parse()?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            let cells = run_sweep(&cfg, axis, &values)?;
            println!("{:<16} {:>8} {:>8} {:>10} {:>8}", axis.key(), "val@0", "best", "test_gr", "pass@1");
            for c in &cells {
                println!(
                    "{:<16} {:>8.3} {:>8.3} {:>10.3} {:>8.3}",
                    c.value, c.initial_validation, c.best_validation, c.test_greedy, c.test_pass1
                );
            }
            println!("summary written to {}", cfg.run_dir().join("sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}
