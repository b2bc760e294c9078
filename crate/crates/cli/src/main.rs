//! `heatflow`: batch runner for heat-flow transport experiments.
//!
//! Exit codes: 0 all invariants hold, 1 an invariant failed, 2 the config
//! is malformed, 3 a numerical abort.

mod config;
mod report;
mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ScenarioConfig, SuiteConfig, KINDS};
use crate::report::RunReport;
use crate::run::RunError;

const OUT_ENV: &str = "HEATFLOW_OUT";
const DEFAULT_OUT: &str = "heatflow-out";

#[derive(Parser)]
#[command(name = "heatflow", version, about = "Heat-flow transport maps: experiments and acceptance checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment in a config file.
    Run(RunArgs),
    /// Run the acceptance criteria and write a summary.
    Acceptance(AcceptanceArgs),
    /// List scenario kinds, shipped correlation scenarios and acceptance criteria.
    ListScenarios,
    /// Check a config file without running it.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct OutputArgs {
    /// Overrides the seed of every experiment.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; falls back to the config, then $HEATFLOW_OUT, then ./heatflow-out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Multiplies every tolerance.
    #[arg(long, default_value_t = 1.0)]
    tolerance_scale: f64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
    /// Run experiments concurrently, each in its own directory.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct AcceptanceArgs {
    #[command(flatten)]
    output: OutputArgs,
    /// Run only these criteria (repeatable).
    #[arg(long = "criterion")]
    criteria: Vec<usize>,
    /// Scale one criterion's tolerance, `ID=FACTOR` (repeatable).
    #[arg(long = "inject", value_parser = parse_injection)]
    injections: Vec<(usize, f64)>,
}

fn parse_injection(s: &str) -> Result<(usize, f64), String> {
    let (id, f) = s.split_once('=').ok_or("expected ID=FACTOR")?;
    Ok((id.trim().parse().map_err(|e| format!("{e}"))?, f.trim().parse().map_err(|e| format!("{e}"))?))
}

enum Failure {
    Invariant,
    Schema(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invariant => 1,
            Failure::Schema(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Acceptance(args) => cmd_acceptance(&args),
        Command::ListScenarios => cmd_list(),
        Command::ValidateConfig { config } => match config::load(&config) {
            Ok(exps) => {
                println!("ok: {} experiment(s)", exps.len());
                Ok(())
            }
            Err(e) => Err(Failure::Schema(e)),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Schema(m) => eprintln!("error: malformed config: {m}"),
                Failure::Numerical(m) => eprintln!("error: {m}"),
                Failure::Invariant => {}
            }
            ExitCode::from(f.code())
        }
    }
}

fn output_root(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn check_scale(s: f64) -> Result<(), Failure> {
    if s.is_finite() && s > 0.0 {
        Ok(())
    } else {
        Err(Failure::Schema(format!("--tolerance-scale must be positive, got {s}")))
    }
}

fn run_one(exp: &ExperimentConfig, args: &RunArgs) -> Result<RunReport, RunError> {
    let dir = output_root(args.output.out.as_deref(), exp.out.as_deref()).join(&exp.id);
    std::fs::create_dir_all(&dir)?;
    run::execute(exp, args.output.seed.unwrap_or(exp.seed), args.output.tolerance_scale, &dir)
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    check_scale(args.output.tolerance_scale)?;
    let exps = config::load(&args.config).map_err(Failure::Schema)?;
    let results: Vec<Result<RunReport, RunError>> = if args.parallel {
        exps.par_iter().map(|e| run_one(e, args)).collect()
    } else {
        exps.iter().map(|e| run_one(e, args)).collect()
    };
    let mut worst: Option<Failure> = None;
    let mut note = |f: Failure| {
        if worst.as_ref().is_none_or(|w| rank(&f) > rank(w)) {
            worst = Some(f);
        }
    };
    for (exp, r) in exps.iter().zip(results) {
        match r {
            Ok(report) => {
                println!("{}", report.summary_line());
                for v in report.failures() {
                    println!("    failed {}: {:.6e} vs {:.6e}", v.name, v.value, v.tolerance);
                }
                if !report.passed() {
                    note(Failure::Invariant);
                }
            }
            Err(RunError::Schema(m)) => note(Failure::Schema(format!("{}: {m}", exp.id))),
            Err(e) => note(Failure::Numerical(format!("{}: {e}", exp.id))),
        }
    }
    worst.map_or(Ok(()), Err)
}

/// Schema problems outrank numerical aborts, which outrank invariant failures.
fn rank(f: &Failure) -> u8 {
    match f {
        Failure::Invariant => 0,
        Failure::Numerical(_) => 1,
        Failure::Schema(_) => 2,
    }
}

fn cmd_acceptance(args: &AcceptanceArgs) -> Result<(), Failure> {
    check_scale(args.output.tolerance_scale)?;
    let suite = SuiteConfig { criteria: args.criteria.clone(), tolerance_scale: 1.0, overrides: args.injections.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>() };
    let exp = ExperimentConfig { id: "acceptance".into(), seed: args.output.seed.unwrap_or(20_240_601), out: None, scenario: ScenarioConfig::AcceptanceSuite(suite.clone()) };
    exp.validate().map_err(Failure::Schema)?;
    let dir = output_root(args.output.out.as_deref(), None).join(&exp.id);
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Numerical(e.to_string()))?;
    let mut report = RunReport::new(&exp.id, "acceptance-suite", exp.seed);
    let start = std::time::Instant::now();
    let outcomes = run::suite(&suite, exp.seed, args.output.tolerance_scale, &dir, &mut report).map_err(|e| Failure::Numerical(e.to_string()))?;
    report.seconds = start.elapsed().as_secs_f64();
    report.write(&dir).map_err(|e| Failure::Numerical(e.to_string()))?;
    for o in &outcomes {
        println!("{}", o.line());
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("{passed} of {} criteria passed; summary in {}", outcomes.len(), dir.display());
    if passed == outcomes.len() {
        Ok(())
    } else {
        Err(Failure::Invariant)
    }
}

fn cmd_list() -> Result<(), Failure> {
    println!("scenario kinds:");
    for k in KINDS {
        println!("  {k}");
    }
    println!("shipped correlation scenarios:");
    let shipped = heatflow::applications::shipped_scenarios().map_err(|e| Failure::Numerical(e.to_string()))?;
    for s in shipped {
        let dim = s.potential.decomposition();
        println!("  {:<24} dim E0 = {}, blocks {:?}, expectation {:?}", s.name, dim.dim_e0(), dim.block_dims(), s.expectation);
    }
    println!("acceptance criteria:");
    for (k, t) in heatflow::acceptance::TITLES.iter().enumerate() {
        println!("  {:>2} {t}", k + 1);
    }
    Ok(())
}
