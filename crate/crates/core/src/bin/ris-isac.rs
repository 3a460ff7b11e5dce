use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use ris_isac::harness::{run_experiment, summarize, write_records, write_summary, Baseline, ExperimentSpec, RunStatus, SweepAxis};
use ris_isac::scenario::ScenarioConfig;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Desk,
}

/// Monte-Carlo sum-rate experiments for RIS-assisted full-duplex sensing and
/// uplink communication.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// TOML scenario file; unspecified fields take paper-scale defaults.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Number of seeds, starting at the configured seed.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// `m=8,16,32` or `si=-110,-90,-70`.
    #[arg(long, default_value = "none")]
    sweep: String,
    #[arg(long, default_value = "optimized-ris,rnd-ris,no-ris,com-only")]
    baselines: String,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Also write per-run iteration traces under OUT/traces.
    #[arg(long)]
    trace: bool,
}

fn execute(cli: Cli) -> ris_isac::Result<ExitCode> {
    let base = match (&cli.config, cli.preset) {
        (Some(path), _) => ScenarioConfig::load(path)?,
        (None, Preset::Paper) => ScenarioConfig::paper(),
        (None, Preset::Desk) => ScenarioConfig::desk(),
    };
    let sweep: SweepAxis = cli.sweep.parse()?;
    let baselines = Baseline::parse_list(&cli.baselines)?;
    let mut spec = ExperimentSpec::new(base, sweep, baselines, cli.seeds);
    if cli.trace {
        spec.trace_dir = Some(cli.out.join("traces"));
    }
    spec.validate()?;
    std::fs::create_dir_all(&cli.out)?;

    let records = run_experiment(&spec)?;
    write_records(&records, File::create(cli.out.join("records.csv"))?)?;
    let rows = summarize(&records)?;
    write_summary(&rows, File::create(cli.out.join("summary.csv"))?)?;

    println!("{:<14} {:>10} {:>6} {:>12} {:>10} {:>8}", "baseline", spec.sweep.label(), "runs", "bits/s/Hz", "stderr", "iters");
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for r in &rows {
        println!(
            "{:<14} {:>10} {:>6} {:>12} {:>10} {:>8}",
            r.baseline.name(),
            r.sweep_value.map_or_else(|| "-".to_string(), |v| v.to_string()),
            r.count,
            cell(r.mean_sum_rate_bits),
            cell(r.stderr_sum_rate_bits),
            r.mean_outer_iterations.map_or_else(|| "-".to_string(), |v| format!("{v:.1}")),
        );
    }

    let failed = records.iter().filter(|r| r.status == RunStatus::Failed).count();
    let infeasible = records.iter().filter(|r| r.status == RunStatus::Infeasible).count();
    if failed > 0 {
        eprintln!("{failed} run(s) failed");
        return Ok(ExitCode::from(1));
    }
    if infeasible > 0 {
        eprintln!("{infeasible} run(s) infeasible, excluded from the averages");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
