//! Scenario presets, seeded experiment runs, aggregation and CSV output.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::DipConfig;
use crate::baselines::{PolicyHandle, PolicyKind};
use crate::env::{AdArmParams, AdRewardForm, AoiArmParams, ArmEnv, ArmSpec, ArmState, QueueArmParams};
use crate::matching::CapacityVector;
use crate::{Error, Result};

pub const PRESETS: [&str; 9] = [
    "aoi-het-2ch",
    "aoi-het-3ch",
    "aoi-hom-2ch",
    "aoi-hom-3ch",
    "hold-het-2ch",
    "hold-het-3ch",
    "hold-hom-2ch",
    "hold-hom-3ch",
    "ads",
];

/// `count` identical arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmGroup {
    pub count: usize,
    pub arm: ArmSpec,
}

/// How the per-tick metric is derived from the arms' rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Negated total reward (total AoI or holding cost).
    Cost,
    /// Total reward.
    Reward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub groups: Vec<ArmGroup>,
    pub caps: Vec<usize>,
    pub metric: MetricKind,
    pub policy: PolicyKind,
    pub steps: usize,
    pub runs: usize,
    pub seed: u64,
    /// Running-average window of the summary output.
    pub window: usize,
    pub agent: DipConfig,
}

fn aoi(success: &[f64], cap: usize) -> ArmSpec {
    ArmSpec::Aoi(AoiArmParams {
        success: success.to_vec(),
        cap,
    })
}

fn queue(zeta: f64, success: &[f64], cap: usize) -> ArmSpec {
    ArmSpec::Queue(QueueArmParams {
        arrival: zeta,
        success: success.to_vec(),
        cap,
    })
}

fn group(count: usize, arm: ArmSpec) -> ArmGroup {
    ArmGroup { count, arm }
}

/// Channel rows `(count, success)` shared by the AoI and holding-cost
/// scenarios.
fn channel_rows(layout: &str) -> Vec<(usize, Vec<f64>)> {
    match layout {
        "het-2ch" => vec![(14, vec![0.7, 0.3]), (6, vec![0.3, 0.7])],
        "het-3ch" => vec![(20, vec![0.9, 0.5, 0.1]), (4, vec![0.1, 0.9, 0.5]), (10, vec![0.5, 0.1, 0.9])],
        "hom-2ch" => vec![(14, vec![0.7, 0.7]), (6, vec![0.3, 0.3])],
        "hom-3ch" => vec![(20, vec![0.9; 3]), (4, vec![0.7; 3]), (10, vec![0.5; 3])],
        _ => unreachable!(),
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    const CAP: usize = 20;
    let (groups, metric) = if let Some(layout) = name.strip_prefix("aoi-") {
        if !matches!(layout, "het-2ch" | "het-3ch" | "hom-2ch" | "hom-3ch") {
            return Err(Error::UnknownPreset(name.to_string()));
        }
        let groups = channel_rows(layout)
            .into_iter()
            .map(|(count, p)| group(count, aoi(&p, CAP)))
            .collect();
        (groups, MetricKind::Cost)
    } else if let Some(layout) = name.strip_prefix("hold-") {
        let zeta = match layout {
            "het-2ch" | "het-3ch" => 0.11,
            "hom-2ch" => 0.1,
            "hom-3ch" => 0.08,
            _ => return Err(Error::UnknownPreset(name.to_string())),
        };
        let groups = channel_rows(layout)
            .into_iter()
            .map(|(count, p)| group(count, queue(zeta, &p, CAP)))
            .collect();
        (groups, MetricKind::Cost)
    } else if name == "ads" {
        let groups = [[1.0, 3.0, 5.0], [5.0, 1.0, 3.0], [3.0, 5.0, 1.0]]
            .iter()
            .map(|theta0| {
                group(
                    10,
                    ArmSpec::Ad(AdArmParams {
                        theta0: theta0.to_vec(),
                        theta1: vec![0.1; 3],
                        cap: CAP,
                        form: AdRewardForm::Recovering,
                    }),
                )
            })
            .collect();
        (groups, MetricKind::Reward)
    } else {
        return Err(Error::UnknownPreset(name.to_string()));
    };
    let num_resources = if name.ends_with("2ch") { 2 } else { 3 };
    Ok(ExperimentConfig {
        scenario: name.to_string(),
        groups,
        caps: vec![2; num_resources],
        metric,
        policy: PolicyKind::Dip,
        steps: 12_000,
        runs: 20,
        seed: 7,
        window: 100,
        agent: DipConfig::default(),
    })
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(base), toml::Value::Table(overlay)) => {
            for (key, value) in overlay {
                match base.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

impl ExperimentConfig {
    /// Applies a TOML document key by key over this config. Tables merge
    /// recursively; arrays and scalars replace. A `preset` key first resets
    /// the base to that preset.
    pub fn with_overrides(&self, document: &str) -> Result<Self> {
        let mut overlay: toml::Table = document.parse().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        let base_config = match overlay.remove("preset") {
            Some(toml::Value::String(name)) => preset(&name)?,
            Some(_) => return Err(Error::InvalidConfig("`preset` must be a string".into())),
            None => self.clone(),
        };
        let mut base = toml::Value::try_from(&base_config).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        merge(&mut base, toml::Value::Table(overlay));
        let config: Self = base.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn num_arms(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    pub fn num_resources(&self) -> usize {
        self.caps.len()
    }

    pub fn capacity(&self) -> CapacityVector {
        CapacityVector(self.caps.clone())
    }

    /// Arm specs in group order.
    pub fn arm_specs(&self) -> Vec<ArmSpec> {
        self.groups
            .iter()
            .flat_map(|g| std::iter::repeat(g.arm.clone()).take(g.count))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.runs == 0 {
            return bad("runs must be positive".into());
        }
        if self.window == 0 || self.window > self.steps {
            return bad("window must lie in 1..=steps".into());
        }
        if self.num_arms() == 0 || self.caps.is_empty() {
            return bad("need at least one arm and one resource".into());
        }
        for g in &self.groups {
            g.arm.validate()?;
            if g.arm.num_resources() != self.caps.len() {
                return bad(format!(
                    "arm with {} resources in a {}-resource scenario",
                    g.arm.num_resources(),
                    self.caps.len()
                ));
            }
        }
        self.agent.validate()
    }
}

/// Everything recorded by one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    /// Per-tick total metric.
    pub metric: Vec<f64>,
    /// Prices in force after each tick.
    pub prices: Vec<Vec<f64>>,
    /// Ticks whose assignment exceeded some capacity.
    pub capacity_violations: usize,
    pub wall_clock_secs: f64,
}

fn policy_seed(seed: u64) -> u64 {
    seed ^ 0xD1B5_4A32_D192_ED03
}

/// Runs `config.policy` for `config.steps` ticks from the floor states.
pub fn run(config: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    config.validate()?;
    let start = Instant::now();
    let caps = config.capacity();
    let specs = config.arm_specs();
    let mut policy = PolicyHandle::new(config.policy, &specs, caps.clone(), &config.agent, policy_seed(seed))?;
    let mut envs: Vec<ArmEnv> = specs.into_iter().map(ArmEnv::new).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut metric = Vec::with_capacity(config.steps);
    let mut prices = Vec::with_capacity(config.steps);
    let mut capacity_violations = 0;
    for _ in 0..config.steps {
        let states: Vec<ArmState> = envs.iter().map(|e| e.state).collect();
        let assignment = policy.act(&states, &mut rng)?;
        if !assignment.is_feasible(&caps) {
            capacity_violations += 1;
        }
        let transitions = envs
            .iter_mut()
            .zip(&assignment.0)
            .map(|(env, &a)| {
                let (s, r, next) = env.step(a, &mut rng)?;
                Ok((s, a, r, next))
            })
            .collect::<Result<Vec<_>>>()?;
        let total: f64 = transitions.iter().map(|t| t.2).sum();
        metric.push(match config.metric {
            MetricKind::Cost => -total,
            MetricKind::Reward => total,
        });
        policy.observe(&transitions)?;
        prices.push(policy.prices(config.num_resources()));
    }
    Ok(RunResult {
        seed,
        metric,
        prices,
        capacity_violations,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Runs `config.runs` seeds `seed, seed + 1, ..` on at most `jobs` threads
/// (`None` uses the global pool). Results are in run order.
pub fn run_all(config: &ExperimentConfig, jobs: Option<usize>) -> Result<Vec<RunResult>> {
    config.validate()?;
    let work = || {
        (0..config.runs)
            .into_par_iter()
            .map(|k| run(config, config.seed.wrapping_add(k as u64)))
            .collect::<Result<Vec<_>>>()
    };
    match jobs {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .install(work),
        None => work(),
    }
}

/// Element `t` is the mean of elements `t+1-window ..= t` (fewer at the
/// start).
pub fn running_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (t, &x) in series.iter().enumerate() {
        sum += x;
        if t >= window {
            sum -= series[t - window];
        }
        out.push(sum / (t + 1).min(window) as f64);
    }
    out
}

/// Per-step mean and sample standard deviation across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub mean: Vec<f64>,
    /// `n - 1` denominator; zero for a single run.
    pub std: Vec<f64>,
}

pub fn aggregate(series: &[Vec<f64>]) -> Result<SummaryStats> {
    let first = series
        .first()
        .ok_or_else(|| Error::InvalidConfig("nothing to aggregate".into()))?;
    let len = first.len();
    if let Some(bad) = series.iter().find(|s| s.len() != len) {
        return Err(Error::ShapeMismatch {
            expected: len,
            got: bad.len(),
        });
    }
    let n = series.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut std = Vec::with_capacity(len);
    for t in 0..len {
        let m = series.iter().map(|s| s[t]).sum::<f64>() / n;
        let var = if series.len() > 1 {
            series.iter().map(|s| (s[t] - m).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        mean.push(m);
        std.push(var.sqrt());
    }
    Ok(SummaryStats { mean, std })
}

/// `x` with 9 significant digits.
pub fn format_real(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let formatted = format!("{x:.8e}");
    let value: f64 = formatted.parse().expect("valid float");
    let exponent = value.abs().log10().floor() as i32;
    if (-5..=15).contains(&exponent) {
        let decimals = (8 - exponent).max(0) as usize;
        let fixed = format!("{value:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        formatted
    }
}

pub fn write_raw_csv<W: Write>(out: &mut W, results: &[RunResult], num_resources: usize) -> Result<()> {
    let lambdas: Vec<String> = (1..=num_resources).map(|h| format!("lambda_{h}")).collect();
    writeln!(out, "run_id,step,metric,{}", lambdas.join(","))?;
    for (run_id, r) in results.iter().enumerate() {
        for (step, (m, prices)) in r.metric.iter().zip(&r.prices).enumerate() {
            write!(out, "{run_id},{step},{}", format_real(*m))?;
            for p in prices {
                write!(out, ",{}", format_real(*p))?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(out: &mut W, stats: &SummaryStats) -> Result<()> {
    writeln!(out, "step,mean,std")?;
    for (step, (m, s)) in stats.mean.iter().zip(&stats.std).enumerate() {
        writeln!(out, "{step},{},{}", format_real(*m), format_real(*s))?;
    }
    Ok(())
}

/// Summary of the running-averaged metric of every run.
pub fn summarize(results: &[RunResult], window: usize) -> Result<SummaryStats> {
    let smoothed: Vec<Vec<f64>> = results.iter().map(|r| running_average(&r.metric, window)).collect();
    aggregate(&smoothed)
}

/// Writes `raw.csv`, `summary.csv` and the resolved `config.toml` into
/// `dir`.
pub fn write_outputs(dir: &Path, config: &ExperimentConfig, results: &[RunResult]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut raw = std::io::BufWriter::new(std::fs::File::create(dir.join("raw.csv"))?);
    write_raw_csv(&mut raw, results, config.num_resources())?;
    raw.flush()?;
    let mut summary = std::io::BufWriter::new(std::fs::File::create(dir.join("summary.csv"))?);
    write_summary_csv(&mut summary, &summarize(results, config.window)?)?;
    summary.flush()?;
    std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
    Ok(())
}

/// Mean of the last `tail` entries.
pub fn tail_mean(series: &[f64], tail: usize) -> f64 {
    let tail = tail.clamp(1, series.len().max(1));
    let slice = &series[series.len().saturating_sub(tail)..];
    slice.iter().sum::<f64>() / slice.len().max(1) as f64
}
