use std::io::{ErrorKind, Write};
use std::process::ExitCode;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dip_core::baselines::PolicyKind;
use dip_core::harness::{format_real, preset, run_all, summarize, tail_mean, write_outputs, ExperimentConfig};
use dip_core::oracle::{ArmMdp, IndexTable, LambdaVector};

#[derive(Parser)]
#[command(name = "dip", version, about = "Restless matching bandit experiments and index oracles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a policy on a scenario and write raw and summary CSVs.
    Run(RunArgs),
    /// Exact single-arm quantities.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario preset; may instead come from `preset` in the config file.
    #[arg(long)]
    preset: Option<String>,
    /// dip, swim, whittle, deeptop or random.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Base seed; run k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// TOML overrides applied key by key over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Maximum number of runs executed in parallel.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    scenario: String,
    /// Arm group within the scenario.
    #[arg(long, default_value_t = 0)]
    group: usize,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Partial-index table as CSV `s,h,w`.
    Index {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Comma-separated prices, one per resource.
        #[arg(long)]
        lambda: String,
    },
    /// Transition table `s,a,s_next,prob` followed by the reward table
    /// `s,a,reward`.
    DumpKernel {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Write `kernel.csv` and `reward.csv` here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(name: Option<&str>, file: Option<&Path>) -> Result<ExperimentConfig> {
    let text = match file {
        Some(path) => Some(std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?),
        None => None,
    };
    let base = match (name, &text) {
        (Some(name), _) => preset(name)?,
        (None, Some(text)) if text.parse::<toml::Table>().map(|t| t.contains_key("preset")).unwrap_or(false) => {
            preset("aoi-het-2ch")?
        }
        _ => bail!("no preset given: pass --preset or set `preset` in the config file"),
    };
    Ok(match text {
        Some(text) => base.with_overrides(&text)?,
        None => base,
    })
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = load_config(args.preset.as_deref(), args.config.as_deref())?;
    if let Some(policy) = &args.policy {
        config.policy = policy.parse::<PolicyKind>()?;
    }
    if let Some(runs) = args.runs {
        config.runs = runs;
    }
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.window = config.window.min(config.steps.max(1));
    config.validate()?;
    let results = run_all(&config, args.jobs)?;
    write_outputs(&args.out, &config, &results)?;
    let violations: usize = results.iter().map(|r| r.capacity_violations).sum();
    if violations > 0 {
        bail!("{violations} ticks violated a capacity");
    }
    let summary = summarize(&results, config.window)?;
    let last = summary.mean.last().copied().unwrap_or(0.0);
    let tail: f64 = results.iter().map(|r| tail_mean(&r.metric, config.window)).sum::<f64>() / results.len() as f64;
    eprintln!(
        "{} on {}: {} runs x {} steps, final running average {}, last-window mean {}",
        config.policy,
        config.scenario,
        config.runs,
        config.steps,
        format_real(last),
        format_real(tail)
    );
    Ok(())
}

fn scenario_arm(args: &ScenarioArgs) -> Result<(ExperimentConfig, dip_core::env::ArmSpec)> {
    let config = load_config(Some(&args.scenario), args.config.as_deref())?;
    let arm = config
        .groups
        .get(args.group)
        .with_context(|| format!("scenario has {} groups", config.groups.len()))?
        .arm
        .clone();
    Ok((config, arm))
}

fn oracle_index(args: &ScenarioArgs, lambda: &str) -> Result<()> {
    let (config, arm) = scenario_arm(args)?;
    let values = lambda
        .split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad price `{v}`")))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != arm.num_resources() {
        bail!("expected {} prices, got {}", arm.num_resources(), values.len());
    }
    let bound = config.agent.price_bound;
    let prices = LambdaVector::new(values, bound)?;
    let mdp = ArmMdp::from_arm(&arm, config.agent.discount)?;
    let table = IndexTable::compute(&mdp, &prices, bound)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "s,h,w")?;
    for (i, row) in table.rows().iter().enumerate() {
        for (h, w) in row.iter().enumerate() {
            writeln!(out, "{},{},{}", i + table.floor(), h + 1, format_real(*w))?;
        }
    }
    Ok(())
}

fn dump_kernel(args: &ScenarioArgs, out_dir: Option<&Path>) -> Result<()> {
    let (_, arm) = scenario_arm(args)?;
    let mut kernel = String::from("s,a,s_next,prob\n");
    let mut reward = String::from("s,a,reward\n");
    for s in arm.states() {
        for a in 0..arm.num_actions() {
            for (next, p) in arm.kernel(s, a)?.outcomes() {
                kernel.push_str(&format!("{},{a},{},{}\n", s.value(), next.value(), format_real(*p)));
            }
            reward.push_str(&format!("{},{a},{}\n", s.value(), format_real(arm.mean_reward(s, a)?)));
        }
    }
    match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("kernel.csv"), kernel)?;
            std::fs::write(dir.join("reward.csv"), reward)?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            write!(out, "{kernel}\n{reward}")?;
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Oracle(OracleCommand::Index { scenario, lambda }) => oracle_index(&scenario, &lambda),
        Command::Oracle(OracleCommand::DumpKernel { scenario, out }) => dump_kernel(&scenario, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == ErrorKind::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
