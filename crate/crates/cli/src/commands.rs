use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use legato_core::executor::{run_episode_seeded, ExecutionTrace};
use legato_core::metrics::{evaluate_trace, mean_se, MeanSe, MetricConfig, MetricReport};
use legato_core::policy::{train, Checkpoint, Family, Policy};
use legato_core::tasks::Dataset;
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Cell, Layout, RunConfig};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub force: bool,
    /// Worker threads for grid cells; `None` lets rayon decide.
    pub workers: Option<usize>,
}

fn claim(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", path.display());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn with_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n.max(1));
    }
    Ok(builder.build()?.install(job))
}

/// Records the resolved config next to the outputs. An existing record from
/// a different config is only replaced with `force`.
fn record_config(cfg: &RunConfig, layout: &Layout, force: bool) -> Result<()> {
    let path = layout.run_config();
    let text = cfg.to_toml()?;
    if path.exists() && !force {
        let old = fs::read_to_string(&path)?;
        if old != text {
            bail!("{} was written by a different config; pass --force to reuse the directory", path.display());
        }
        return Ok(());
    }
    claim(&path, true)?;
    fs::write(&path, text)?;
    Ok(())
}

/// Loads the dataset if one matching the config exists, otherwise generates
/// and saves it.
pub fn prepare_dataset(cfg: &RunConfig, layout: &Layout, force: bool) -> Result<Dataset> {
    let path = layout.dataset();
    if path.exists() && !force {
        let data = Dataset::load(&path)?;
        let h = &data.header;
        if h.generator != cfg.task || h.n_demos != cfg.data.n_demos || h.seed != cfg.data.seed || h.horizon != cfg.data.horizon {
            bail!("{} does not match the config; pass --force to regenerate", path.display());
        }
        return Ok(data);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
    let data = Dataset::generate(&cfg.task, &mut rng, cfg.data.n_demos, cfg.data.horizon, cfg.data.seed)?;
    claim(&path, true)?;
    data.save(&path)?;
    Ok(data)
}

/// Trains one checkpoint per family and writes it with its loss curve.
pub fn cmd_train(cfg: &RunConfig, opts: RunOptions) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out);
    let families = cfg.families();
    for &f in &families {
        claim(&layout.checkpoint(f), opts.force)?;
        claim(&layout.loss_curve(f), opts.force)?;
    }
    record_config(cfg, &layout, opts.force)?;
    let data = prepare_dataset(cfg, &layout, opts.force)?;
    info!("training {} families on {} demonstrations", families.len(), data.demos.len());
    let outcomes = with_pool(opts.workers, || {
        families
            .par_iter()
            .map(|&f| {
                let tc = cfg.train.config_for(f);
                train(&data.demos, &tc).map(|out| (f, tc, out))
            })
            .collect::<Vec<_>>()
    })?;
    let mut paths = Vec::new();
    for outcome in outcomes {
        let (family, tc, out) = outcome?;
        let path = layout.checkpoint(family);
        Checkpoint::from_policy(&out.policy, &tc).save(&path)?;
        write_loss_curve(&layout.loss_curve(family), &out.losses)?;
        info!("{family}: final loss {:.4}", out.losses.last().copied().unwrap_or(f64::NAN));
        paths.push(path);
    }
    Ok(paths)
}

fn write_loss_curve(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn load_policy(layout: &Layout, family: Family) -> Result<Policy> {
    let path = layout.checkpoint(family);
    if !path.exists() {
        bail!("checkpoint {} is missing; run `train` first", path.display());
    }
    Ok(Checkpoint::load(&path)?.to_policy()?)
}

/// Runs the strategy by schedule by seed grid, one trace file per run.
pub fn cmd_rollout(cfg: &RunConfig, opts: RunOptions) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        warn!("seed list is empty; nothing to roll out");
        return Ok(Vec::new());
    }
    let layout = Layout::new(&cfg.out);
    let cells = cfg.cells()?;
    let mut policies: HashMap<Family, Policy> = HashMap::new();
    for cell in &cells {
        let f = cell.strategy.required_family();
        if !policies.contains_key(&f) {
            policies.insert(f, load_policy(&layout, f)?);
        }
    }
    let jobs: Vec<(Cell, u64)> = cells.iter().flat_map(|c| cfg.seeds.iter().map(move |&s| (*c, s))).collect();
    for (cell, seed) in &jobs {
        claim(&layout.trace(cell, *seed), opts.force)?;
    }
    record_config(cfg, &layout, opts.force)?;
    info!("rolling out {} runs", jobs.len());
    let results = with_pool(opts.workers, || {
        jobs.par_iter()
            .map(|(cell, seed)| -> Result<PathBuf> {
                let policy = &policies[&cell.strategy.required_family()];
                let exec = cfg.exec_config(cell, *seed);
                let trace = run_episode_seeded(policy, &cfg.task, &exec)?;
                let path = layout.trace(cell, *seed);
                trace.save(&path)?;
                Ok(path)
            })
            .collect::<Vec<_>>()
    })?;
    results.into_iter().collect()
}

/// Trace files under `dir`, grouped by cell directory, both levels sorted.
pub fn find_traces(dir: &Path) -> Result<Vec<(String, Vec<PathBuf>)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut groups = Vec::new();
    let mut cells: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    cells.sort();
    for cell in cells.into_iter().filter(|p| p.is_dir()) {
        let mut files: Vec<PathBuf> = fs::read_dir(&cell)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        files.sort_by_key(|p| seed_of(p));
        if !files.is_empty() {
            let name = cell.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            groups.push((name, files));
        }
    }
    Ok(groups)
}

fn seed_of(path: &Path) -> (u64, PathBuf) {
    let seed = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("seed_"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(u64::MAX);
    (seed, path.to_path_buf())
}

/// Steps to reach the goal, or one past the executed stream when it never
/// gets there.
pub fn completion_proxy(trace: &ExecutionTrace, report: &MetricReport) -> usize {
    report.completion_steps.unwrap_or(trace.stream.horizon() + 1)
}

/// Writes one metric JSON per trace.
pub fn cmd_metrics(cfg: &RunConfig, opts: RunOptions) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.out);
    let groups = find_traces(&layout.traces())?;
    if groups.is_empty() {
        bail!("no traces under {}", layout.traces().display());
    }
    let jobs: Vec<(String, PathBuf)> = groups
        .iter()
        .flat_map(|(name, files)| files.iter().map(move |f| (name.clone(), f.clone())))
        .collect();
    let out_path = |name: &str, file: &Path| layout.metrics(name, &file.file_name().unwrap_or_default().to_string_lossy());
    for (name, file) in &jobs {
        claim(&out_path(name, file), opts.force)?;
    }
    let results = with_pool(opts.workers, || {
        jobs.par_iter()
            .map(|(name, file)| -> Result<PathBuf> {
                let trace = ExecutionTrace::load(file)?;
                let report = evaluate_trace(&trace, &cfg.metrics)?;
                let path = out_path(name, file);
                fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                Ok(path)
            })
            .collect::<Vec<_>>()
    })?;
    results.into_iter().collect()
}

/// One row of the long-format summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub d: usize,
    pub r: usize,
    pub s: usize,
    pub metric: String,
    pub mean: f64,
    /// Absent for a single value.
    pub se: Option<f64>,
    pub n: usize,
}

/// Mean and standard error of the overlap distance at each denoising step,
/// pooled over every guided cycle after the first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftRow {
    pub strategy: String,
    pub d: usize,
    pub r: usize,
    pub s: usize,
    pub step: usize,
    pub mean: f64,
    pub se: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub drift: Vec<DriftRow>,
}

struct CellKey {
    strategy: String,
    d: usize,
    r: usize,
    s: usize,
}

fn key_of(trace: &ExecutionTrace) -> CellKey {
    let p = &trace.config.params;
    CellKey { strategy: trace.config.strategy.name().to_string(), d: p.d, r: p.r, s: p.s }
}

fn stat_fields(stat: MeanSe) -> (f64, Option<f64>, usize) {
    (stat.mean, (stat.n > 1).then_some(stat.se), stat.n)
}

/// Aggregates traces that share a strategy and schedule. Groups keep the
/// order in which they are given.
pub fn aggregate(groups: &[Vec<ExecutionTrace>], metrics: &MetricConfig) -> Result<Report> {
    let mut summary = Vec::new();
    let mut drift = Vec::new();
    for traces in groups {
        let Some(first) = traces.first() else { continue };
        let key = key_of(first);
        let mut columns: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for trace in traces {
            let r = evaluate_trace(trace, metrics)?;
            let mut push = |name, v: Option<f64>| {
                let col = columns.entry(name).or_default();
                col.extend(v);
            };
            push("nsparc", Some(r.nsparc));
            push("nldlj", Some(r.nldlj));
            push("overlap_rmse", r.overlap_rmse);
            push("mode_switches", Some(r.mode_switches as f64));
            push("completion_steps", r.completion_steps.map(|c| c as f64));
            push("completion_proxy", Some(completion_proxy(trace, &r) as f64));
            push("completed", Some(if r.completion_steps.is_some() { 1.0 } else { 0.0 }));
        }
        for (metric, values) in &columns {
            if let Some(stat) = mean_se(values) {
                let (mean, se, n) = stat_fields(stat);
                summary.push(SummaryRow {
                    strategy: key.strategy.clone(),
                    d: key.d,
                    r: key.r,
                    s: key.s,
                    metric: metric.to_string(),
                    mean,
                    se,
                    n,
                });
            }
        }
        let series: Vec<&Vec<f64>> = traces
            .iter()
            .flat_map(|t| t.cycles.iter().filter(|c| c.index >= 1 && !c.drift.is_empty()).map(|c| &c.drift))
            .collect();
        let steps = series.iter().map(|s| s.len()).max().unwrap_or(0);
        for step in 0..steps {
            let values: Vec<f64> = series.iter().filter_map(|s| s.get(step).copied()).collect();
            if let Some(stat) = mean_se(&values) {
                let (mean, se, n) = stat_fields(stat);
                drift.push(DriftRow {
                    strategy: key.strategy.clone(),
                    d: key.d,
                    r: key.r,
                    s: key.s,
                    step,
                    mean,
                    se,
                    n,
                });
            }
        }
    }
    Ok(Report { summary, drift })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Aggregate CSV plus the per-step drift series for every cell.
pub fn cmd_report(cfg: &RunConfig, opts: RunOptions) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.out);
    let groups = find_traces(&layout.traces())?;
    if groups.is_empty() {
        bail!("no traces under {}", layout.traces().display());
    }
    let (summary_path, drift_path) = (layout.summary(), layout.drift());
    claim(&summary_path, opts.force)?;
    claim(&drift_path, opts.force)?;
    let loaded = with_pool(opts.workers, || {
        groups
            .par_iter()
            .map(|(_, files)| files.iter().map(|f| ExecutionTrace::load(f).map_err(|e| anyhow!("{}: {e}", f.display()))).collect())
            .collect::<Vec<Result<Vec<ExecutionTrace>>>>()
    })?;
    let loaded: Vec<Vec<ExecutionTrace>> = loaded.into_iter().collect::<Result<_>>()?;
    let report = aggregate(&loaded, &cfg.metrics)?;
    write_rows(&summary_path, &report.summary)?;
    write_rows(&drift_path, &report.drift)?;
    Ok(vec![summary_path, drift_path])
}

/// Train, roll out, score and report in one go.
pub fn cmd_sweep(cfg: &RunConfig, opts: RunOptions) -> Result<Vec<PathBuf>> {
    let mut paths = cmd_train(cfg, opts)?;
    let traces = cmd_rollout(cfg, opts)?;
    if traces.is_empty() {
        return Ok(paths);
    }
    paths.extend(traces);
    paths.extend(cmd_metrics(cfg, opts)?);
    paths.extend(cmd_report(cfg, opts)?);
    Ok(paths)
}
