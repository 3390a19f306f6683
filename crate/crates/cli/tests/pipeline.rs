use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use legato_cli::{aggregate, cmd_report, cmd_rollout, cmd_sweep, cmd_train, Layout, RunConfig, RunOptions};
use legato_core::executor::{run_episode_seeded, ExecConfig, ExecutionTrace, ExpertField, Strategy};
use legato_core::metrics::{evaluate_trace, MetricConfig};
use legato_core::policy::{Checkpoint, Family, Trainer};
use legato_core::schedule::ScheduleParams;
use legato_core::tasks::{Dataset, EnvState, ReachParams, TaskSpec};
use legato_core::Chunk;

fn tiny(out: &Path) -> RunConfig {
    let mut cfg: RunConfig = toml::from_str(
        r#"
        seeds = [0, 1, 2]

        [data]
        n_demos = 200
        seed = 3
        horizon = 20

        [train]
        steps = 15
        batch_size = 16
        hidden = [16]

        [rollout]
        strategies = ["legato", "rtc_soft", "naive"]
        schedules = [{ d = 4, s = 10 }]
        max_steps = 60
        "#,
    )
    .unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn sweep_writes_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_sweep(&cfg, RunOptions::default()).unwrap();
    let layout = Layout::new(dir.path());
    assert!(layout.run_config().is_file());
    assert!(layout.dataset().is_file());
    for family in [Family::Vanilla, Family::Legato] {
        assert!(layout.checkpoint(family).is_file());
        let curve = fs::read_to_string(layout.loss_curve(family)).unwrap();
        assert_eq!(curve.lines().count(), 16);
    }
    assert!(!layout.checkpoint(Family::RtcTrain).exists());
    let cells = cfg.cells().unwrap();
    assert_eq!(cells.len(), 3);
    for cell in &cells {
        for seed in &cfg.seeds {
            assert!(layout.trace(cell, *seed).is_file());
            assert!(layout.metrics(&cell.name(), &format!("seed_{seed}.json")).is_file());
        }
    }
    let summary = fs::read_to_string(layout.summary()).unwrap();
    assert!(summary.starts_with("strategy,d,r,s,metric,mean,se,n"));
    assert!(summary.contains("legato,4,6,10,overlap_rmse,"));
    let drift = fs::read_to_string(layout.drift()).unwrap();
    assert!(drift.contains("rtc_soft,4,6,10,0,"));
    // naive has no reference, so no drift series
    assert!(!drift.contains("naive"));
}

#[test]
fn outputs_are_protected_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_sweep(&cfg, RunOptions { force: false, workers: Some(1) }).unwrap();
    let first = snapshot(dir.path());

    let err = cmd_train(&cfg, RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("--force"), "{err}");
    assert!(cmd_rollout(&cfg, RunOptions::default()).is_err());
    assert_eq!(snapshot(dir.path()), first);

    cmd_sweep(&cfg, RunOptions { force: true, workers: Some(3) }).unwrap();
    assert_eq!(snapshot(dir.path()), first);
}

#[test]
fn changed_config_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_train(&cfg, RunOptions::default()).unwrap();
    let mut other = cfg.clone();
    other.seeds = vec![5];
    let err = cmd_rollout(&other, RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("different config"), "{err}");
    cmd_rollout(&other, RunOptions { force: true, workers: None }).unwrap();
}

#[test]
fn empty_seed_list_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cmd_train(&cfg, RunOptions::default()).unwrap();
    cfg.seeds.clear();
    let paths = cmd_rollout(&cfg, RunOptions { force: true, workers: None }).unwrap();
    assert!(paths.is_empty());
    assert!(!Layout::new(dir.path()).traces().exists());
}

#[test]
fn zero_steps_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.steps = 0;
    cfg.train.families = vec![Family::Legato];
    cmd_train(&cfg, RunOptions::default()).unwrap();
    let layout = Layout::new(dir.path());
    let ckpt = Checkpoint::load(&layout.checkpoint(Family::Legato)).unwrap();
    let data = Dataset::load(&layout.dataset()).unwrap();
    let fresh = Trainer::new(cfg.train.config_for(Family::Legato), &data.demos).unwrap();
    assert_eq!(ckpt.params, fresh.policy().net.params_flat());
    assert_eq!(ckpt.train_config.schedule.d_range, (0, 10));
    assert_eq!(ckpt.train_config.schedule.r_range, (0, 50));
    assert_eq!(fs::read_to_string(layout.loss_curve(Family::Legato)).unwrap(), "step,loss\n");
}

#[test]
fn rollout_rejects_missing_and_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let err = cmd_rollout(&cfg, RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("missing"), "{err}");

    cmd_train(&cfg, RunOptions::default()).unwrap();
    let layout = Layout::new(dir.path());
    fs::copy(layout.checkpoint(Family::Vanilla), layout.checkpoint(Family::Legato)).unwrap();
    let err = cmd_rollout(&cfg, RunOptions::default()).unwrap_err();
    assert!(format!("{err:#}").contains("requires a `legato` checkpoint"), "{err:#}");
}

#[test]
fn report_needs_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert!(cmd_report(&cfg, RunOptions::default()).unwrap_err().to_string().contains("no traces"));
}

fn expert_trace(seed: u64, step: f64) -> ExecutionTrace {
    let task = TaskSpec::BimodalReach(ReachParams::default());
    let field = ExpertField::new(move |_: &EnvState| Chunk::from_elem(20, 2, step), Family::Vanilla, (20, 2));
    let params = ScheduleParams::rtc(4, 10, 20).unwrap();
    let cfg = ExecConfig::new(Strategy::RtcSoft, params, 5, 6, seed);
    run_episode_seeded(&field, &task, &cfg).unwrap()
}

fn row<'a>(report: &'a legato_cli::commands::Report, metric: &str) -> &'a legato_cli::commands::SummaryRow {
    report.summary.iter().find(|r| r.metric == metric).unwrap()
}

#[test]
fn single_trace_has_no_standard_error() {
    let trace = expert_trace(0, 0.01);
    let report = aggregate(&[vec![trace.clone()]], &MetricConfig::default()).unwrap();
    let nsparc = row(&report, "nsparc");
    assert_eq!(nsparc.se, None);
    assert_eq!(nsparc.n, 1);
    assert_eq!(nsparc.mean, evaluate_trace(&trace, &MetricConfig::default()).unwrap().nsparc);
}

#[test]
fn identical_traces_have_zero_standard_error() {
    let trace = expert_trace(0, 0.01);
    let report = aggregate(&[vec![trace.clone(), trace]], &MetricConfig::default()).unwrap();
    for r in &report.summary {
        assert_eq!(r.se, Some(0.0), "{}", r.metric);
    }
    assert!(report.drift.iter().all(|d| d.se == Some(0.0)));
}

#[test]
fn three_trace_fixture_matches_hand_computation() {
    let traces: Vec<ExecutionTrace> = [(0, 0.010), (1, 0.012), (2, 0.009)].iter().map(|&(s, v)| expert_trace(s, v)).collect();
    let report = aggregate(std::slice::from_ref(&traces), &MetricConfig::default()).unwrap();
    let values: Vec<f64> = traces
        .iter()
        .map(|t| evaluate_trace(t, &MetricConfig::default()).unwrap().nldlj)
        .collect();
    let (a, b, c) = (values[0], values[1], values[2]);
    let mean = (a + b + c) / 3.0;
    let var = ((a - mean).powi(2) + (b - mean).powi(2) + (c - mean).powi(2)) / 2.0;
    let se = (var / 3.0).sqrt();
    let got = row(&report, "nldlj");
    assert!((got.mean - mean).abs() < 1e-12);
    assert!((got.se.unwrap() - se).abs() < 1e-12);
    assert_eq!(got.n, 3);
    assert_eq!(got.strategy, "rtc_soft");
    assert_eq!((got.d, got.r, got.s), (4, 6, 10));
}

fn legato(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_legato")).args(args).env("RUST_LOG", "off").output().unwrap()
}

#[test]
fn exit_codes() {
    let ok = legato(&["oracle-check"]);
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8(ok.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4);

    assert_eq!(legato(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(legato(&["train", "--workers", "many"]).status.code(), Some(1));
    assert_eq!(legato(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    assert_eq!(legato(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn binary_runs_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("run"));
    let path = dir.path().join("run.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let out = dir.path().join("elsewhere");
    let args = ["sweep", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "4"];
    let result = legato(&args);
    assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    let layout = Layout::new(&out);
    assert!(layout.summary().is_file());
    let cell = cfg.cells().unwrap()[0];
    assert!(layout.trace(&cell, 4).is_file());
    assert!(!layout.trace(&cell, 0).exists());
    assert_eq!(legato(&args).status.code(), Some(1));
}
