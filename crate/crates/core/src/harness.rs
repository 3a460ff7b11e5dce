//! Seeded Monte-Carlo experiments over baselines and parameter sweeps, with
//! CSV output and per-cell summaries.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::orchestrator::{initialize, run, write_pdd_trace, write_trace, RunMode};
use crate::scenario::{draw_channels, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Baseline {
    /// Every block optimized, including the surface phases.
    OptimizedRis,
    /// Phases frozen at a seeded random draw.
    RndRis,
    /// Reflected paths removed.
    NoRis,
    /// Radar constraint dropped and no probing signal.
    ComOnly,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::OptimizedRis, Baseline::RndRis, Baseline::NoRis, Baseline::ComOnly];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::OptimizedRis => "optimized-ris",
            Baseline::RndRis => "rnd-ris",
            Baseline::NoRis => "no-ris",
            Baseline::ComOnly => "com-only",
        }
    }

    pub fn mode(self) -> RunMode {
        match self {
            Baseline::OptimizedRis => RunMode::FULL,
            Baseline::RndRis | Baseline::NoRis => RunMode::FIXED_PHASE,
            Baseline::ComOnly => RunMode::COMM_ONLY,
        }
    }

    /// Comma-separated list, e.g. `optimized-ris,no-ris`.
    pub fn parse_list(text: &str) -> Result<Vec<Baseline>> {
        let mut out: Vec<Baseline> = Vec::new();
        for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let b: Baseline = part.parse()?;
            if !out.contains(&b) {
                out.push(b);
            }
        }
        if out.is_empty() {
            return Err(Error::invalid("empty baseline list"));
        }
        Ok(out)
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown baseline `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    None,
    RisElements(Vec<usize>),
    SiDb(Vec<f64>),
}

impl SweepAxis {
    pub fn label(&self) -> &'static str {
        match self {
            SweepAxis::None => "none",
            SweepAxis::RisElements(_) => "m",
            SweepAxis::SiDb(_) => "si",
        }
    }

    /// Sweep values in order; a single `None` when there is no sweep.
    pub fn values(&self) -> Vec<Option<f64>> {
        match self {
            SweepAxis::None => vec![None],
            SweepAxis::RisElements(ms) => ms.iter().map(|&m| Some(m as f64)).collect(),
            SweepAxis::SiDb(v) => v.iter().map(|&x| Some(x)).collect(),
        }
    }

    pub fn apply(&self, base: &ScenarioConfig, value: Option<f64>) -> ScenarioConfig {
        let mut cfg = base.clone();
        match (self, value) {
            (SweepAxis::RisElements(_), Some(m)) => cfg.num_ris_elements = m as usize,
            (SweepAxis::SiDb(_), Some(si)) => cfg.rho_si_db = si,
            _ => {}
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let vals: Vec<f64> = self.values().into_iter().flatten().collect();
        if *self != SweepAxis::None && vals.is_empty() {
            return Err(Error::invalid("sweep list is empty"));
        }
        if vals.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("sweep values must be strictly increasing"));
        }
        if let SweepAxis::RisElements(ms) = self {
            if ms.contains(&0) {
                return Err(Error::invalid("surface size must be at least 1"));
            }
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sweep values must be finite"));
        }
        Ok(())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    /// `none`, `m=8,16,32` or `si=-110,-90,-70`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(SweepAxis::None);
        }
        let (axis, list) = s.split_once('=').ok_or_else(|| Error::invalid(format!("bad sweep `{s}`")))?;
        let items = list.split(',').map(str::trim).filter(|x| !x.is_empty());
        let bad = |x: &str| Error::invalid(format!("bad sweep value `{x}`"));
        let sweep = match axis.trim() {
            "m" => SweepAxis::RisElements(items.map(|x| x.parse().map_err(|_| bad(x))).collect::<Result<_>>()?),
            "si" => SweepAxis::SiDb(items.map(|x| x.parse().map_err(|_| bad(x))).collect::<Result<_>>()?),
            other => return Err(Error::invalid(format!("unknown sweep axis `{other}` (expected m or si)"))),
        };
        sweep.validate()?;
        Ok(sweep)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub base: ScenarioConfig,
    pub sweep: SweepAxis,
    pub baselines: Vec<Baseline>,
    /// Seeds run are `base.seed .. base.seed + num_seeds`.
    pub num_seeds: usize,
    /// Per-run trace files go here when set.
    pub trace_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(base: ScenarioConfig, sweep: SweepAxis, baselines: Vec<Baseline>, num_seeds: usize) -> Self {
        Self { base, sweep, baselines, num_seeds, trace_dir: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_seeds == 0 {
            return Err(Error::invalid("num_seeds must be at least 1"));
        }
        if self.baselines.is_empty() {
            return Err(Error::invalid("no baselines selected"));
        }
        self.sweep.validate()?;
        for v in self.sweep.values() {
            self.sweep.apply(&self.base, v).validate()?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> {
        let first = self.base.seed;
        (0..self.num_seeds as u64).map(move |i| first + i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RunStatus {
    Converged,
    /// Hit the outer iteration cap; the iterate is still feasible.
    MaxIterations,
    Infeasible,
    Failed,
}

impl RunStatus {
    pub const ALL: [RunStatus; 4] = [RunStatus::Converged, RunStatus::MaxIterations, RunStatus::Infeasible, RunStatus::Failed];

    pub fn name(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::MaxIterations => "max-iterations",
            RunStatus::Infeasible => "infeasible",
            RunStatus::Failed => "failed",
        }
    }

    /// Whether the run produced a usable operating point.
    pub fn has_solution(self) -> bool {
        matches!(self, RunStatus::Converged | RunStatus::MaxIterations)
    }
}

impl FromStr for RunStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RunStatus::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown status `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub seed: u64,
    pub baseline: Baseline,
    pub sweep_value: Option<f64>,
    pub sum_rate_nats: Option<f64>,
    pub sum_rate_bits: Option<f64>,
    /// Not applicable for com-only.
    pub radar_sinr_db: Option<f64>,
    pub outer_iterations: usize,
    pub init_halvings: usize,
    pub wall_time_seconds: f64,
    pub status: RunStatus,
}

/// Round to the nine significant digits the CSV carries.
pub fn quantize(x: f64) -> f64 {
    format!("{x:.8e}").parse().unwrap_or(x)
}

impl ResultRecord {
    /// The record as it reads back from CSV.
    pub fn quantized(&self) -> Self {
        let q = |v: Option<f64>| v.map(quantize);
        Self {
            sweep_value: q(self.sweep_value),
            sum_rate_nats: q(self.sum_rate_nats),
            sum_rate_bits: q(self.sum_rate_bits),
            radar_sinr_db: q(self.radar_sinr_db),
            wall_time_seconds: quantize(self.wall_time_seconds),
            ..self.clone()
        }
    }
}

fn trace_name(dir: &Path, stem: &str, baseline: Baseline, value: Option<f64>, seed: u64) -> PathBuf {
    let sweep = value.map_or_else(|| "none".to_string(), |v| format!("{v}"));
    dir.join(format!("{stem}_{}_{sweep}_{seed}.csv", baseline.name()))
}

/// One optimizer run for one (seed, sweep value, baseline) cell.
pub fn run_single(
    config: &ScenarioConfig,
    baseline: Baseline,
    seed: u64,
    sweep_value: Option<f64>,
    trace_dir: Option<&Path>,
) -> Result<ResultRecord> {
    let start = Instant::now();
    let mut record = ResultRecord {
        seed,
        baseline,
        sweep_value,
        sum_rate_nats: None,
        sum_rate_bits: None,
        radar_sinr_db: None,
        outer_iterations: 0,
        init_halvings: 0,
        wall_time_seconds: 0.0,
        status: RunStatus::Failed,
    };
    let channels = draw_channels(config, seed)?;
    let channels = if baseline == Baseline::NoRis { channels.without_ris() } else { channels };
    let outcome = initialize(&channels, config, seed, baseline.mode()).and_then(|st| {
        record.init_halvings = st.init_halvings;
        run(st)
    });
    match outcome {
        Ok(st) => {
            let last = st.history.last().ok_or_else(|| Error::InvalidState("empty run history".into()))?;
            record.sum_rate_nats = Some(last.sum_rate_nats);
            record.sum_rate_bits = Some(last.sum_rate_bits());
            record.radar_sinr_db = last.radar_sinr_db();
            record.outer_iterations = st.iterations();
            record.status = if st.converged { RunStatus::Converged } else { RunStatus::MaxIterations };
            if let Some(dir) = trace_dir {
                write_trace(&st.history, &trace_name(dir, "trace", baseline, sweep_value, seed))?;
                if st.mode.optimize_phase {
                    write_pdd_trace(&st.history, &trace_name(dir, "pdd", baseline, sweep_value, seed))?;
                }
            }
        }
        Err(Error::InfeasibleScenario(_)) => record.status = RunStatus::Infeasible,
        Err(Error::FeasibilityLoss { .. } | Error::InvalidState(_)) => record.status = RunStatus::Failed,
        Err(e) => return Err(e),
    }
    record.wall_time_seconds = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Runs every (sweep value, seed, baseline) cell on the rayon pool. Records come
/// back in that nested order whatever the completion order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRecord>> {
    spec.validate()?;
    if let Some(dir) = &spec.trace_dir {
        std::fs::create_dir_all(dir)?;
    }
    let jobs: Vec<(Option<f64>, u64, Baseline)> = spec
        .sweep
        .values()
        .into_iter()
        .flat_map(|v| spec.seeds().flat_map(move |s| spec.baselines.iter().map(move |&b| (v, s, b))))
        .collect();
    jobs.par_iter()
        .map(|&(v, seed, b)| {
            let cfg = spec.sweep.apply(&spec.base, v);
            run_single(&cfg, b, seed, v, spec.trace_dir.as_deref())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub baseline: Baseline,
    pub sweep_value: Option<f64>,
    /// Records with a usable solution.
    pub count: usize,
    pub infeasible: usize,
    pub failed: usize,
    /// Empty when no record of the cell has a solution.
    pub mean_sum_rate_bits: Option<f64>,
    pub stderr_sum_rate_bits: Option<f64>,
    pub mean_sum_rate_nats: Option<f64>,
    pub stderr_sum_rate_nats: Option<f64>,
    pub mean_outer_iterations: Option<f64>,
}

/// Sample mean and standard error of the mean (0 for a single value).
pub fn mean_stderr(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

/// Per-(sweep value, baseline) means and standard errors, ordered by sweep
/// value then baseline.
pub fn summarize(records: &[ResultRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::invalid("no records to summarize"));
    }
    let mut keys: Vec<(Option<f64>, Baseline)> = records.iter().map(|r| (r.sweep_value, r.baseline)).collect();
    keys.sort_by(|a, b| {
        let av = a.0.unwrap_or(f64::NEG_INFINITY);
        let bv = b.0.unwrap_or(f64::NEG_INFINITY);
        av.total_cmp(&bv).then(a.1.cmp(&b.1))
    });
    keys.dedup();
    Ok(keys
        .into_iter()
        .map(|(v, b)| {
            let cell: Vec<&ResultRecord> = records.iter().filter(|r| r.baseline == b && r.sweep_value == v).collect();
            let ok: Vec<&&ResultRecord> = cell.iter().filter(|r| r.status.has_solution()).collect();
            let nats: Vec<f64> = ok.iter().filter_map(|r| r.sum_rate_nats).collect();
            let bits: Vec<f64> = ok.iter().filter_map(|r| r.sum_rate_bits).collect();
            let iters: Vec<f64> = ok.iter().map(|r| r.outer_iterations as f64).collect();
            let n = mean_stderr(&nats);
            let bt = mean_stderr(&bits);
            SummaryRow {
                baseline: b,
                sweep_value: v,
                count: ok.len(),
                infeasible: cell.iter().filter(|r| r.status == RunStatus::Infeasible).count(),
                failed: cell.iter().filter(|r| r.status == RunStatus::Failed).count(),
                mean_sum_rate_bits: bt.map(|x| x.0),
                stderr_sum_rate_bits: bt.map(|x| x.1),
                mean_sum_rate_nats: n.map(|x| x.0),
                stderr_sum_rate_nats: n.map(|x| x.1),
                mean_outer_iterations: mean_stderr(&iters).map(|x| x.0),
            }
        })
        .collect())
}

const RECORD_HEADER: [&str; 10] = [
    "seed",
    "baseline",
    "sweep_value",
    "sum_rate_nats",
    "sum_rate_bits",
    "radar_sinr_db",
    "outer_iterations",
    "init_halvings",
    "wall_time_seconds",
    "status",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.8e}"))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "NA" || s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::invalid(format!("bad number `{s}`")))
}

pub fn write_records<W: std::io::Write>(records: &[ResultRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORD_HEADER)?;
    for r in records {
        w.write_record([
            r.seed.to_string(),
            r.baseline.name().to_string(),
            fmt_opt(r.sweep_value),
            fmt_opt(r.sum_rate_nats),
            fmt_opt(r.sum_rate_bits),
            fmt_opt(r.radar_sinr_db),
            r.outer_iterations.to_string(),
            r.init_halvings.to_string(),
            format!("{:.8e}", r.wall_time_seconds),
            r.status.name().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: std::io::Read>(input: R) -> Result<Vec<ResultRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if header.iter().ne(RECORD_HEADER) {
        return Err(Error::invalid("unexpected record header"));
    }
    rd.records()
        .map(|row| {
            let row = row?;
            let int = |s: &str| s.parse::<u64>().map_err(|_| Error::invalid(format!("bad integer `{s}`")));
            Ok(ResultRecord {
                seed: int(&row[0])?,
                baseline: row[1].parse()?,
                sweep_value: parse_opt(&row[2])?,
                sum_rate_nats: parse_opt(&row[3])?,
                sum_rate_bits: parse_opt(&row[4])?,
                radar_sinr_db: parse_opt(&row[5])?,
                outer_iterations: int(&row[6])? as usize,
                init_halvings: int(&row[7])? as usize,
                wall_time_seconds: parse_opt(&row[8])?.ok_or_else(|| Error::invalid("missing wall time"))?,
                status: row[9].parse()?,
            })
        })
        .collect()
}

pub fn write_summary<W: std::io::Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "baseline",
        "sweep_value",
        "count",
        "infeasible",
        "failed",
        "mean_sum_rate_bits",
        "stderr_sum_rate_bits",
        "mean_sum_rate_nats",
        "stderr_sum_rate_nats",
        "mean_outer_iterations",
    ])?;
    for r in rows {
        w.write_record([
            r.baseline.name().to_string(),
            fmt_opt(r.sweep_value),
            r.count.to_string(),
            r.infeasible.to_string(),
            r.failed.to_string(),
            fmt_opt(r.mean_sum_rate_bits),
            fmt_opt(r.stderr_sum_rate_bits),
            fmt_opt(r.mean_sum_rate_nats),
            fmt_opt(r.stderr_sum_rate_nats),
            fmt_opt(r.mean_outer_iterations),
        ])?;
    }
    w.flush()?;
    Ok(())
}
