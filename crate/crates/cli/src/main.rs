use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use meec::complex::build_complex;
use meec::experiments::{
    conservation_check, generate_data, invariance_check, nonlinear_solves, poisson_convergence, pretrained_convergence,
    single_shot, system_for, truncation_study, Case, Check, Checkpoint, ConservationConfig, DataInstance,
    GenerateDataConfig, InvarianceConfig, NonlinearConfig, Outcome, PoissonConfig, PretrainedConfig, ResultTable,
    SingleShotConfig, TruncationConfig,
};
use meec::flux::{FluxKernel, MlpParams};
use meec::geometry::DEFAULT_MIN_DEGREE;
use meec::solver::{newton_solve_with, relative_l2, solution_json, SolverOptions};
use meec::training::{train, write_log, TrainConfig, TrainingInstance};

#[derive(Parser)]
#[command(name = "meec", version, about = "Meshfree exterior calculus solver with learnable edge fluxes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config; defaults are used for missing fields or when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Also write complex diagnostics (`solve` only).
    #[arg(long, global = true)]
    dump_complex: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    PoissonConvergence,
    Truncation,
    GenerateData,
    SingleShot,
    PretrainedConvergence,
    Invariance,
    Conservation,
    /// Seeded nonlinear Darcy and nonlinear advection solves.
    Nonlinear,
    Train,
    Solve,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::PoissonConvergence => "poisson-convergence",
            Command::Truncation => "truncation",
            Command::GenerateData => "generate-data",
            Command::SingleShot => "single-shot",
            Command::PretrainedConvergence => "pretrained-convergence",
            Command::Invariance => "invariance",
            Command::Conservation => "conservation",
            Command::Nonlinear => "nonlinear",
            Command::Train => "train",
            Command::Solve => "solve",
        }
    }
}

/// Where a solve gets its flux kernel.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
enum KernelSource {
    /// The case's own analytic law.
    Analytic,
    /// A trained checkpoint written by `train` or `single-shot`.
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SolveConfig {
    case: Case,
    kernel: KernelSource,
    options: SolverOptions,
    /// Optional reference solution (row-major `N × N_F`) for a relative error.
    reference: Option<Vec<f64>>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            case: Case::Advection(Default::default()),
            kernel: KernelSource::Analytic,
            options: SolverOptions::default(),
            reference: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainCommandConfig {
    /// Dataset written by `generate-data`.
    data: PathBuf,
    hidden: usize,
    depth: usize,
    mlp_seed: u64,
    /// Warm start from a checkpoint instead of a fresh network.
    init: Option<PathBuf>,
    train: TrainConfig,
}

impl Default for TrainCommandConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data/dataset.json"),
            hidden: 64,
            depth: 4,
            mlp_seed: 0,
            init: None,
            train: TrainConfig::default(),
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn write_table(out: &Path, table: &ResultTable) -> Result<()> {
    let f = File::create(out.join("results.csv"))?;
    table.write_csv(BufWriter::new(f))?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let ck: Checkpoint = serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))?;
    Ok(ck.params)
}

fn version() -> String {
    std::process::Command::new("git")
        .args(["describe", "--tags", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// Runs one command; returns the configuration echo and the threshold checks.
fn run(cli: &Cli) -> Result<(serde_json::Value, Vec<Check>)> {
    let out = &cli.out;
    let cfg_path = cli.config.as_deref();
    if cli.dump_complex && !matches!(cli.command, Command::Solve) {
        bail!("--dump-complex is only supported by `solve`");
    }
    let table_run = |outcome: Outcome| -> Result<Vec<Check>> {
        write_table(out, &outcome.table)?;
        Ok(outcome.checks)
    };
    Ok(match cli.command {
        Command::PoissonConvergence => {
            let cfg: PoissonConfig = load_config(cfg_path)?;
            (serde_json::to_value(&cfg)?, table_run(poisson_convergence(&cfg)?)?)
        }
        Command::Truncation => {
            let cfg: TruncationConfig = load_config(cfg_path)?;
            (serde_json::to_value(&cfg)?, table_run(truncation_study(&cfg)?)?)
        }
        Command::PretrainedConvergence => {
            let cfg: PretrainedConfig = load_config(cfg_path)?;
            (serde_json::to_value(&cfg)?, table_run(pretrained_convergence(&cfg)?)?)
        }
        Command::Invariance => {
            let cfg: InvarianceConfig = load_config(cfg_path)?;
            (serde_json::to_value(&cfg)?, table_run(invariance_check(&cfg)?)?)
        }
        Command::Conservation => {
            let cfg: ConservationConfig = load_config(cfg_path)?;
            (serde_json::to_value(&cfg)?, table_run(conservation_check(&cfg)?)?)
        }
        Command::Nonlinear => {
            let cfg: NonlinearConfig = load_config(cfg_path)?;
            (serde_json::to_value(&cfg)?, table_run(nonlinear_solves(&cfg)?)?)
        }
        Command::GenerateData => {
            let cfg: GenerateDataConfig = load_config(cfg_path)?;
            let data = generate_data(&cfg)?;
            write_json(&out.join("dataset.json"), &data)?;
            let mut table = ResultTable::default();
            for (k, d) in data.iter().enumerate() {
                table.push("generate_data", k as f64, "nodes", d.cloud.len() as f64);
            }
            write_table(out, &table)?;
            (serde_json::to_value(&cfg)?, Vec::new())
        }
        Command::SingleShot => {
            let cfg: SingleShotConfig = load_config(cfg_path)?;
            let res = single_shot(&cfg)?;
            write_log(&res.log, BufWriter::new(File::create(out.join("train_log.csv"))?))?;
            write_json(
                &out.join("kernel.json"),
                &Checkpoint {
                    iteration: res.best_iteration,
                    params: res.params.clone(),
                },
            )?;
            (serde_json::to_value(&cfg)?, table_run(res.outcome)?)
        }
        Command::Train => {
            let cfg: TrainCommandConfig = load_config(cfg_path)?;
            let text = fs::read_to_string(&cfg.data).with_context(|| format!("reading dataset {}", cfg.data.display()))?;
            let data: Vec<DataInstance> = serde_json::from_str(&text).context("parsing dataset")?;
            let instances = data
                .iter()
                .map(DataInstance::training_instance)
                .collect::<meec::Result<Vec<TrainingInstance>>>()?;
            let theta0 = match &cfg.init {
                Some(p) => load_checkpoint(p)?,
                None => {
                    let width = instances.first().map_or(6, |i| i.system.layout.width);
                    MlpParams::with_architecture(width, cfg.hidden, cfg.depth, 1, cfg.mlp_seed)?
                }
            };
            let res = train(&instances, theta0, &cfg.train)?;
            write_log(&res.log, BufWriter::new(File::create(out.join("train_log.csv"))?))?;
            write_json(
                &out.join("best.json"),
                &Checkpoint {
                    iteration: res.best_iteration,
                    params: res.best.clone(),
                },
            )?;
            if !res.checkpoints.is_empty() {
                let dir = out.join("checkpoints");
                fs::create_dir_all(&dir)?;
                for (iteration, params) in &res.checkpoints {
                    write_json(
                        &dir.join(format!("iter_{iteration:06}.json")),
                        &Checkpoint {
                            iteration: *iteration,
                            params: params.clone(),
                        },
                    )?;
                }
            }
            let mut table = ResultTable::default();
            table.push("train", res.best_iteration as f64, "best_loss", res.best_loss);
            write_table(out, &table)?;
            (serde_json::to_value(&cfg)?, Vec::new())
        }
        Command::Solve => {
            let cfg: SolveConfig = load_config(cfg_path)?;
            let cloud = cfg.case.cloud()?;
            if cli.dump_complex {
                let cx = build_complex(&cloud, DEFAULT_MIN_DEGREE)?;
                write_json(&out.join("complex.json"), &cx.diagnostics())?;
            }
            let sys = system_for(&cloud, &cfg.case.spec(&cloud))?;
            let kernel = match &cfg.kernel {
                KernelSource::Analytic => cfg.case.kernel()?,
                KernelSource::Checkpoint { path } => FluxKernel::Learned(load_checkpoint(path)?),
            };
            let (u, report) = newton_solve_with(&sys, &kernel, &sys.initial_guess()?, &cfg.options)?;
            write_json(&out.join("solution.json"), &solution_json(&u, sys.n_f, &report))?;
            let mut table = ResultTable::default();
            table.push("solve", 0.0, "residual", report.residual);
            table.push("solve", 0.0, "iterations", report.iterations as f64);
            let mut checks = vec![Check::holds("converged", report.converged)];
            if let Some(reference) = &cfg.reference {
                if reference.len() != u.len() {
                    bail!("reference has {} values, expected {}", reference.len(), u.len());
                }
                table.push("solve", 0.0, "rel_l2", relative_l2(&sys, &u, reference));
            }
            if !report.converged {
                checks.push(Check::at_most("residual", report.residual, report.tolerance));
            }
            write_table(out, &table)?;
            (serde_json::to_value(&cfg)?, checks)
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    let result = fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))
        .and_then(|_| run(&cli));
    match result {
        Ok((config, checks)) => {
            let passed = checks.iter().all(|c| c.passed);
            for c in &checks {
                println!("{} {} = {:e} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.bound);
            }
            let manifest = json!({
                "command": cli.command.name(),
                "version": version(),
                "config": config,
                "wall_time_s": start.elapsed().as_secs_f64(),
                "checks": checks,
                "passed": passed,
            });
            if let Err(e) = write_json(&cli.out.join("manifest.json"), &manifest) {
                eprintln!("error: {e:#}");
                return ExitCode::from(1);
            }
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
