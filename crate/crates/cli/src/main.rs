use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use flowday_core::assignment::{relative_gap, solve_ue};
use flowday_core::exec::Parallelism;
use flowday_core::kernel::KernelConfig;
use flowday_core::mechanisms::{
    InitialStrategyChoice, MechanismConfig, MechanismKind, UpdateRule,
};
use flowday_core::network::FlowProfile;
use flowday_core::runner::{
    emit_outputs, execute, tolling_study, KernelChoice, RunConfig,
};
use flowday_core::scenarios::{scenario, scenario_catalog};

#[derive(Parser)]
#[command(
    name = "flowday",
    version,
    about = "Day-to-day commuting dynamics with conversational agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one day-loop and write record.json, runs.csv, series.csv, and the
    /// kernel transcript.
    Run(ExperimentArgs),
    /// Run a seeded ensemble with outlier discarding; same outputs.
    Ensemble(ExperimentArgs),
    /// Calibrate values of time on the tolling settings and predict the
    /// three-route splits.
    TollingStudy(ParArg),
    /// Relative equilibrium gap of uniform mixing on a scenario.
    Gap {
        scenario: String,
        #[command(flatten)]
        par: ParArg,
    },
    /// Solve the route-choice user equilibrium on a scenario's network.
    Ue {
        scenario: String,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 1_000_000)]
        max_iters: usize,
        #[command(flatten)]
        par: ParArg,
    },
    /// List the built-in scenarios.
    Scenarios,
}

#[derive(Args)]
struct ParArg {
    /// Run single-threaded instead of on the thread pool.
    #[arg(long)]
    sequential: bool,
}

impl ParArg {
    fn mode(&self) -> Parallelism {
        if self.sequential {
            Parallelism::Sequential
        } else {
            Parallelism::default()
        }
    }
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML run configuration; other flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, value_enum)]
    mechanism: Option<MechanismArg>,
    /// Update rule for the guided mechanism.
    #[arg(long, value_enum)]
    rule: Option<RuleArg>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    #[arg(long)]
    days: Option<usize>,
    /// Ensemble only: number of runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Ensemble only: most deviant runs to drop before aggregation.
    #[arg(long)]
    discard: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    kernel: Option<KernelArg>,
    /// Transcript to replay (implies --kernel replay).
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    par: ParArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    LlmBaseline,
    LlmRl,
    GuidedRl,
    BestResponse,
}

impl From<MechanismArg> for MechanismKind {
    fn from(arg: MechanismArg) -> Self {
        match arg {
            MechanismArg::LlmBaseline => MechanismKind::LlmBaseline,
            MechanismArg::LlmRl => MechanismKind::LlmRl,
            MechanismArg::GuidedRl => MechanismKind::GuidedRl,
            MechanismArg::BestResponse => MechanismKind::BestResponse,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Proportional,
    MultiplicativeWeights,
}

impl From<RuleArg> for UpdateRule {
    fn from(arg: RuleArg) -> Self {
        match arg {
            RuleArg::Proportional => UpdateRule::Proportional,
            RuleArg::MultiplicativeWeights => UpdateRule::MultiplicativeWeights,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    External,
    SelfChosen,
}

impl From<InitArg> for InitialStrategyChoice {
    fn from(arg: InitArg) -> Self {
        match arg {
            InitArg::External => InitialStrategyChoice::External,
            InitArg::SelfChosen => InitialStrategyChoice::SelfChosen,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Scripted,
    Live,
    Replay,
}

fn mechanism_name(kind: MechanismKind) -> &'static str {
    match kind {
        MechanismKind::LlmBaseline => "llm_baseline",
        MechanismKind::LlmRl => "llm_rl",
        MechanismKind::GuidedRl => "guided_rl",
        MechanismKind::BestResponse => "best_response",
    }
}

fn effective_config(args: &ExperimentArgs, single_run: bool) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = &args.scenario {
        config.scenario = s.clone();
    }
    if let Some(m) = args.mechanism {
        config.mechanism = MechanismConfig::new(m.into());
    }
    if let Some(r) = args.rule {
        config.mechanism.rule = Some(r.into());
    }
    if let Some(i) = args.init {
        config.mechanism.init = i.into();
    }
    if let Some(d) = args.days {
        config.days = d;
    }
    if single_run {
        if args.runs.is_some() || args.discard.is_some() {
            bail!("--runs and --discard apply to `ensemble`; `run` is a single run");
        }
        config.runs = 1;
        config.discard = 0;
    } else {
        if let Some(n) = args.runs {
            config.runs = n;
        }
        if let Some(n) = args.discard {
            config.discard = n;
        }
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    match args.kernel {
        Some(KernelArg::Scripted) => config.kernel = KernelChoice::Scripted,
        Some(KernelArg::Live) => {
            config.kernel = KernelChoice::Live { config: KernelConfig::default() }
        }
        Some(KernelArg::Replay) => {
            let transcript = args
                .transcript
                .clone()
                .or(match &config.kernel {
                    KernelChoice::Replay { transcript } => Some(transcript.clone()),
                    _ => None,
                })
                .context("--kernel replay needs --transcript <path>")?;
            config.kernel = KernelChoice::Replay { transcript };
        }
        None => {
            if let Some(transcript) = &args.transcript {
                config.kernel = KernelChoice::Replay { transcript: transcript.clone() };
            }
        }
    }
    if let Some(dir) = &args.out_dir {
        config.out_dir = dir.clone();
    }
    Ok(config)
}

fn run_experiment(args: &ExperimentArgs, single_run: bool) -> Result<()> {
    let config = effective_config(args, single_run)?;
    let par = args.par.mode();
    let report = execute(&config, par)?;
    emit_outputs(&report, &config.out_dir)?;

    let outcome = &report.outcome;
    println!(
        "{} × {} day(s) of {} on {}",
        outcome.runs.len(),
        config.days,
        mechanism_name(config.mechanism.kind),
        config.scenario,
    );
    println!("outputs written to {}", config.out_dir.display());
    println!(
        "retained {} of {} run(s): {:?}",
        outcome.retained.len(),
        outcome.runs.len(),
        outcome.retained
    );
    if single_run {
        if let Some(record) = outcome.runs.first() {
            if let Some(last) = record.days.last() {
                for (c, strategy) in last.strategies.iter().enumerate() {
                    let probs: Vec<String> =
                        strategy.probs().iter().map(|p| format!("{p:.4}")).collect();
                    println!("class {c} final strategy: [{}]", probs.join(", "));
                }
                if let Some(gap) = last.relative_gap {
                    println!("final relative gap: {gap:.6e}");
                }
            }
        }
    }
    let failed = outcome.failed();
    if !outcome.quota_met() {
        bail!(
            "{} run(s) failed {:?}: not enough completed runs to fill the quota",
            failed.len(),
            failed
        );
    }
    Ok(())
}

fn print_ue(name: &str, tol: f64, max_iters: usize, par: Parallelism) -> Result<()> {
    let spec = scenario(name)?;
    let solution = solve_ue(&spec.network, None, max_iters, tol, par)?;
    println!(
        "{}: {} after {} iteration(s), relative gap {:.6e}",
        name,
        if solution.converged { "converged" } else { "stopped at best iterate" },
        solution.iterations,
        solution.relative_gap
    );
    let classes = spec.network.classes.len();
    if classes <= 8 {
        for (c, flows) in solution.flows.per_class.iter().enumerate() {
            let parts: Vec<String> = flows.iter().map(|f| format!("{f:.3}")).collect();
            println!("class {c} route flows: [{}]", parts.join(", "));
        }
    } else {
        println!("{classes} traveler classes; per-route flows omitted");
    }
    Ok(())
}

fn print_gap(name: &str, par: Parallelism) -> Result<()> {
    let spec = scenario(name)?;
    if !spec.has_route_gap() {
        bail!("scenario {name} has no route-flow equilibrium gap");
    }
    let flows = FlowProfile::uniform(&spec.network);
    let report = relative_gap(&spec.network, &flows, par)?;
    println!("relative gap of uniform mixing on {name}: {:.6e}", report.relative_gap);
    Ok(())
}

fn print_tolling_study(par: Parallelism) -> Result<()> {
    let rows = tolling_study(par)?;
    println!(
        "{:<8} {:>9} {:>16} {:>26} {:>10}",
        "setting", "lambda", "target 1/2", "predicted 1/2/3", "gap"
    );
    for row in rows {
        let shares: Vec<String> = row
            .with3_shares
            .iter()
            .map(|s| format!("{:.1}%", 100.0 * s))
            .collect();
        println!(
            "{:<8} {:>9.4} {:>7.0}% / {:>4.0}% {:>26} {:>10.1e}",
            row.setting,
            row.vot_lambda,
            100.0 * row.target_shares.0,
            100.0 * row.target_shares.1,
            shares.join(" / "),
            row.with3_gap
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(args) => run_experiment(args, true),
        Command::Ensemble(args) => run_experiment(args, false),
        Command::TollingStudy(par) => print_tolling_study(par.mode()),
        Command::Gap { scenario, par } => print_gap(scenario, par.mode()),
        Command::Ue { scenario, tol, max_iters, par } => {
            print_ue(scenario, *tol, *max_iters, par.mode())
        }
        Command::Scenarios => {
            for name in scenario_catalog() {
                println!("{name}");
            }
            Ok(())
        }
    }
}
