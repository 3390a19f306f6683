use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use legato_core::executor::{ExecConfig, FirstReference, Strategy};
use legato_core::metrics::MetricConfig;
use legato_core::policy::{Family, TrainConfig};
use legato_core::schedule::{ScheduleParams, ScheduleRanges};
use legato_core::tasks::{ReachParams, TaskSpec};
use serde::{Deserialize, Serialize};

/// Everything a run needs, read from one TOML file. Every section may be
/// omitted; defaults describe the bimodal reach experiment at desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_task")]
    pub task: TaskSpec,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub metrics: MetricConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_seeds() -> Vec<u64> {
    (0..30).collect()
}

fn default_task() -> TaskSpec {
    TaskSpec::BimodalReach(ReachParams::default())
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: default_out(),
            seeds: default_seeds(),
            task: default_task(),
            data: DataSection::default(),
            train: TrainSection::default(),
            rollout: RolloutSection::default(),
            metrics: MetricConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_demos: usize,
    pub seed: u64,
    pub horizon: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { n_demos: 10_000, seed: 7, horizon: 60 }
    }
}

/// Shared training settings. The family is filled in per checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Families to train; empty means whatever the rollout strategies need.
    pub families: Vec<Family>,
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub hidden: Vec<usize>,
    pub n_steps: usize,
    pub time_frequencies: usize,
    pub grad_clip: Option<f64>,
    pub schedule: ScheduleRanges,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            families: Vec::new(),
            steps: 10_000,
            seed: 1,
            batch_size: base.batch_size,
            learning_rate: base.learning_rate,
            final_lr_fraction: base.final_lr_fraction,
            hidden: base.hidden,
            n_steps: base.n_steps,
            time_frequencies: base.time_frequencies,
            grad_clip: base.grad_clip,
            schedule: base.schedule,
        }
    }
}

impl TrainSection {
    pub fn config_for(&self, family: Family) -> TrainConfig {
        TrainConfig {
            family,
            learning_rate: self.learning_rate,
            final_lr_fraction: self.final_lr_fraction,
            batch_size: self.batch_size,
            steps: self.steps,
            seed: self.seed,
            schedule: self.schedule,
            n_steps: self.n_steps,
            condition_row: true,
            hidden: self.hidden.clone(),
            time_frequencies: self.time_frequencies,
            grad_clip: self.grad_clip,
            ..TrainConfig::default()
        }
    }
}

/// One `(d, s)` cell of the rollout grid. `r` defaults to `H - d - s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSchedule {
    pub d: usize,
    pub s: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub strategies: Vec<Strategy>,
    pub schedules: Vec<GridSchedule>,
    pub n_steps: usize,
    /// Episode budget in control steps; the cycle count is rounded up.
    pub max_steps: usize,
    pub goal_tolerance_frac: f64,
    pub mode_deadband: f64,
    pub stop_at_goal: bool,
    pub first_reference: FirstReference,
}

impl Default for RolloutSection {
    fn default() -> Self {
        let base = ExecConfig::new(Strategy::Legato, ScheduleParams::rtc(8, 30, 60).expect("valid"), 5, 10, 0);
        Self {
            strategies: Strategy::ALL.to_vec(),
            schedules: vec![GridSchedule { d: 8, s: 30, r: None }],
            n_steps: base.n_steps,
            max_steps: 300,
            goal_tolerance_frac: base.goal_tolerance_frac,
            mode_deadband: base.mode_deadband,
            stop_at_goal: base.stop_at_goal,
            first_reference: base.first_reference,
        }
    }
}

/// A strategy at one schedule; seeds vary within a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub strategy: Strategy,
    pub d: usize,
    pub r: usize,
    pub s: usize,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}_d{}_r{}_s{}", self.strategy, self.d, self.r, self.s)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let unique: BTreeSet<u64> = self.seeds.iter().copied().collect();
        ensure!(unique.len() == self.seeds.len(), "seeds must be distinct");
        ensure!(self.data.n_demos > 0 && self.data.horizon > 0, "n_demos and horizon must be positive");
        ensure!(self.rollout.max_steps > 0, "max_steps must be positive");
        for family in self.families() {
            self.train.config_for(family).validate(self.data.horizon)?;
        }
        for cell in self.cells()? {
            self.exec_config(&cell, 0).validate()?;
        }
        Ok(())
    }

    /// Families to train: the explicit list, else those the strategies need.
    pub fn families(&self) -> Vec<Family> {
        let listed = if self.train.families.is_empty() {
            self.rollout.strategies.iter().map(|s| s.required_family()).collect()
        } else {
            self.train.families.clone()
        };
        let mut out: Vec<Family> = Vec::new();
        for f in listed {
            if !out.contains(&f) {
                out.push(f);
            }
        }
        out
    }

    /// Strategy by schedule grid in config order.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let h = self.data.horizon;
        let mut cells = Vec::new();
        for g in &self.rollout.schedules {
            let r = match g.r {
                Some(r) => r,
                None => match h.checked_sub(g.d + g.s) {
                    Some(r) => r,
                    None => bail!("schedule d = {}, s = {} does not fit horizon {h}", g.d, g.s),
                },
            };
            ScheduleParams::new(g.d, r, g.s, h)?;
            for &strategy in &self.rollout.strategies {
                cells.push(Cell { strategy, d: g.d, r, s: g.s });
            }
        }
        Ok(cells)
    }

    pub fn exec_config(&self, cell: &Cell, seed: u64) -> ExecConfig {
        let ro = &self.rollout;
        let params = ScheduleParams { d: cell.d, r: cell.r, s: cell.s, horizon: self.data.horizon };
        ExecConfig {
            goal_tolerance_frac: ro.goal_tolerance_frac,
            mode_deadband: ro.mode_deadband,
            stop_at_goal: ro.stop_at_goal,
            first_reference: ro.first_reference,
            ..ExecConfig::new(cell.strategy, params, ro.n_steps, ro.max_steps.div_ceil(cell.s), seed)
        }
    }
}

/// Where each artifact of a run lives under the output directory.
///
/// ```text
/// run.toml
/// data/demos.lgds
/// checkpoints/<family>.json
/// checkpoints/<family>_loss.csv
/// traces/<strategy>_d<d>_r<r>_s<s>/seed_<seed>.json
/// metrics/<strategy>_d<d>_r<r>_s<s>/seed_<seed>.json
/// report/summary.csv
/// report/drift.csv
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn run_config(&self) -> PathBuf {
        self.root.join("run.toml")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("data").join("demos.lgds")
    }

    pub fn checkpoint(&self, family: Family) -> PathBuf {
        self.root.join("checkpoints").join(format!("{family}.json"))
    }

    pub fn loss_curve(&self, family: Family) -> PathBuf {
        self.root.join("checkpoints").join(format!("{family}_loss.csv"))
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn trace(&self, cell: &Cell, seed: u64) -> PathBuf {
        self.traces().join(cell.name()).join(format!("seed_{seed}.json"))
    }

    pub fn metrics(&self, cell_name: &str, seed_file: &str) -> PathBuf {
        self.root.join("metrics").join(cell_name).join(seed_file)
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("report").join("summary.csv")
    }

    pub fn drift(&self) -> PathBuf {
        self.root.join("report").join("drift.csv")
    }
}
