use std::process::Command;

use ris_isac::harness::{read_records, run_experiment, summarize, write_records, Baseline, ExperimentSpec, RunStatus, SweepAxis};
use ris_isac::orchestrator::{initialize, run, write_pdd_trace, write_trace, RunMode};
use ris_isac::scenario::{draw_channels, ScenarioConfig};

fn full_run(seed: u64) -> ris_isac::orchestrator::OptimizerState {
    let cfg = ScenarioConfig::desk();
    let ch = draw_channels(&cfg, seed).unwrap();
    run(initialize(&ch, &cfg, seed, RunMode::FULL).unwrap()).unwrap()
}

#[test]
fn identical_inputs_give_identical_histories() {
    let a = full_run(4);
    let b = full_run(4);
    let bits = |s: &ris_isac::orchestrator::OptimizerState| s.history.iter().map(|r| r.sum_rate_nats.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.vars, b.vars);
}

#[test]
fn converged_state_stops_after_one_more_iteration() {
    let first = full_run(1);
    assert!(first.converged);
    let before = first.history.last().unwrap().sum_rate_nats;
    let len = first.history.len();
    let again = run(first).unwrap();
    assert_eq!(again.history.len(), len + 1);
    let after = again.history.last().unwrap().sum_rate_nats;
    assert!(after >= before - 1e-6);
    assert!((after - before).abs() <= 1e-4 * before);
}

#[test]
fn paper_scale_starts_need_few_halvings() {
    let cfg = ScenarioConfig::paper();
    for seed in 0..20 {
        let ch = draw_channels(&cfg, seed).unwrap();
        let st = initialize(&ch, &cfg, seed, RunMode::FULL).unwrap();
        assert!(st.init_halvings <= 3, "seed {seed}: {} halvings", st.init_halvings);
    }
}

#[test]
fn communication_only_runs_have_no_radar_metric() {
    let cfg = ScenarioConfig::desk();
    let ch = draw_channels(&cfg, 2).unwrap();
    let st = run(initialize(&ch, &cfg, 2, RunMode::COMM_ONLY).unwrap()).unwrap();
    assert!(st.history.iter().all(|r| r.radar_sinr.is_none()));
    assert_eq!(st.vars.w.norm_squared(), 0.0);
}

#[test]
fn trace_files_have_one_row_per_iteration() {
    let st = full_run(3);
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let pdd = dir.path().join("pdd.csv");
    write_trace(&st.history, &trace).unwrap();
    write_pdd_trace(&st.history, &pdd).unwrap();
    let rows = std::fs::read_to_string(&trace).unwrap().lines().count();
    assert_eq!(rows, st.history.len() + 1);
    let pdd_rows = std::fs::read_to_string(&pdd).unwrap().lines().count();
    assert_eq!(pdd_rows, 1 + st.history.iter().map(|r| r.pdd_trace.len()).sum::<usize>());
}

fn strip_time(mut r: ris_isac::harness::ResultRecord) -> ris_isac::harness::ResultRecord {
    r.wall_time_seconds = 0.0;
    r
}

#[test]
fn dropping_a_seed_leaves_other_rows_unchanged() {
    let baselines = vec![Baseline::RndRis, Baseline::NoRis];
    let all = run_experiment(&ExperimentSpec::new(ScenarioConfig::desk(), SweepAxis::None, baselines.clone(), 3)).unwrap();
    let mut later = ScenarioConfig::desk();
    later.seed = 1;
    let rest = run_experiment(&ExperimentSpec::new(later, SweepAxis::None, baselines, 2)).unwrap();
    assert_eq!(all.len(), 6);
    let kept: Vec<_> = all.into_iter().filter(|r| r.seed != 0).map(strip_time).collect();
    let rest: Vec<_> = rest.into_iter().map(strip_time).collect();
    assert_eq!(kept, rest);
}

/// Recomputes each cell's mean and standard error straight from the CSV text.
#[test]
fn summary_matches_recomputation_from_csv() {
    let spec = ExperimentSpec::new(ScenarioConfig::desk(), SweepAxis::None, vec![Baseline::NoRis], 20);
    let records = run_experiment(&spec).unwrap();
    let mut csv = Vec::new();
    write_records(&records, &mut csv).unwrap();
    let text = String::from_utf8(csv.clone()).unwrap();

    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (rate_col, status_col) = (col("sum_rate_nats"), col("status"));
    let values: Vec<f64> = lines
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[status_col] == "converged" || f[status_col] == "max-iterations")
        .map(|f| f[rate_col].parse().unwrap())
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let stderr = (var / n).sqrt();

    let rows = summarize(&read_records(csv.as_slice()).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].count, values.len());
    assert!((rows[0].mean_sum_rate_nats.unwrap() - mean).abs() <= 1e-12 * mean.abs());
    assert!((rows[0].stderr_sum_rate_nats.unwrap() - stderr).abs() <= 1e-9 * stderr.max(1e-12));
}

#[test]
fn infeasible_scenarios_are_recorded_not_raised() {
    let mut cfg = ScenarioConfig::desk();
    cfg.gamma_r_db = 200.0;
    let spec = ExperimentSpec::new(cfg, SweepAxis::None, vec![Baseline::OptimizedRis, Baseline::ComOnly], 2);
    let records = run_experiment(&spec).unwrap();
    assert_eq!(records.len(), 4);
    for r in &records {
        match r.baseline {
            Baseline::OptimizedRis => assert_eq!(r.status, RunStatus::Infeasible),
            _ => assert!(r.status.has_solution() && r.radar_sinr_db.is_none()),
        }
    }
    let rows = summarize(&records).unwrap();
    assert_eq!(rows[0].mean_sum_rate_nats, None);
    assert_eq!(rows[0].infeasible, 2);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ris-isac"))
}

#[test]
fn cli_writes_records_summary_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let run = cli()
        .args(["--preset", "desk", "--seeds", "1", "--baselines", "no-ris,optimized-ris", "--trace", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0));
    let records = read_records(std::fs::File::open(dir.path().join("records.csv")).unwrap()).unwrap();
    assert_eq!(records.len(), 2);
    assert!(dir.path().join("summary.csv").exists());
    let traces = std::fs::read_dir(dir.path().join("traces")).unwrap().count();
    assert_eq!(traces, 3);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("hard.toml");
    std::fs::write(&config, "num_users = 2\nnum_ris_elements = 4\ngamma_r_db = 200.0\n").unwrap();
    let run = cli()
        .args(["--seeds", "1", "--baselines", "rnd-ris", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(2));

    let bad = cli().args(["--sweep", "m=16,8", "--out"]).arg(dir.path().join("bad")).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let unknown = cli().arg("--no-such-flag").output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));
}
