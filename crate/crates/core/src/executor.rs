//! Delayed receding-horizon execution.
//!
//! Timeline per cycle `c >= 1`: inference for chunk `c` starts at step
//! `c * s` from the observation at that step. Chunk `c` is aligned so that its
//! row `i` corresponds to row `s + i` of chunk `c - 1`. While inference runs
//! (the first `d` steps), the robot keeps executing chunk `c - 1`; afterwards
//! rows `d .. s` of chunk `c` are committed. Every cycle therefore commits
//! exactly `s` steps. Cycle 0 has no predecessor: its reference is either the
//! zero chunk (the robot idles while the first chunk is computed) or absent,
//! and its rows `0 .. s` are committed directly.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmath::{euler_step, guide, guided_step, target_velocity, Chunk, DenoiseState};
use crate::policy::{standard_normal_chunk, Family, Policy};
use crate::schedule::{build_schedule, GuidanceSchedule, ScheduleParams};
use crate::tasks::{rollout_env, EnvState, TaskSpec};

pub const TRACE_FORMAT: &str = "legato-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Independent flow-matching samples, no reference.
    Naive,
    /// Hard prefix clamp at initialization only.
    Oneshot,
    /// Per-step soft guidance applied to a vanilla model at test time.
    RtcSoft,
    /// Hard prefix clamp at every step on a hard-prefix-trained model.
    RtcTrain,
    /// Per-step soft guidance on a continuation-trained model.
    Legato,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Naive,
        Strategy::Oneshot,
        Strategy::RtcSoft,
        Strategy::RtcTrain,
        Strategy::Legato,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Oneshot => "oneshot",
            Strategy::RtcSoft => "rtc_soft",
            Strategy::RtcTrain => "rtc_train",
            Strategy::Legato => "legato",
        }
    }

    pub fn required_family(self) -> Family {
        match self {
            Strategy::Naive | Strategy::Oneshot | Strategy::RtcSoft => Family::Vanilla,
            Strategy::RtcTrain => Family::RtcTrain,
            Strategy::Legato => Family::Legato,
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_tolerance_frac() -> f64 {
    0.05
}

fn default_deadband() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

/// Reference used for the first cycle, which has no previous chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstReference {
    /// Guide toward the all-zero chunk.
    #[default]
    Zero,
    /// Sample the first chunk without guidance.
    Unguided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecConfig {
    pub strategy: Strategy,
    pub params: ScheduleParams,
    pub n_steps: usize,
    pub max_cycles: usize,
    pub seed: u64,
    /// Goal tolerance as a fraction of the start-to-goal distance.
    #[serde(default = "default_tolerance_frac")]
    pub goal_tolerance_frac: f64,
    /// Chunks whose total lateral displacement is within this band get mode label 0.
    #[serde(default = "default_deadband")]
    pub mode_deadband: f64,
    #[serde(default = "default_true")]
    pub stop_at_goal: bool,
    #[serde(default)]
    pub first_reference: FirstReference,
}

impl ExecConfig {
    pub fn new(strategy: Strategy, params: ScheduleParams, n_steps: usize, max_cycles: usize, seed: u64) -> Self {
        Self {
            strategy,
            params,
            n_steps,
            max_cycles,
            seed,
            goal_tolerance_frac: default_tolerance_frac(),
            mode_deadband: default_deadband(),
            stop_at_goal: true,
            first_reference: FirstReference::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.params.d > self.params.s {
            return Err(Error::InvalidParams(format!(
                "delay d = {} must not exceed stride s = {}",
                self.params.d, self.params.s
            )));
        }
        if self.params.d + self.params.s > self.params.horizon {
            return Err(Error::InvalidParams(format!(
                "d + s = {} exceeds H = {}; the previous chunk cannot cover the overlap",
                self.params.d + self.params.s,
                self.params.horizon
            )));
        }
        if self.n_steps == 0 || self.max_cycles == 0 {
            return Err(Error::InvalidParams("n_steps and max_cycles must be positive".into()));
        }
        if self.goal_tolerance_frac < 0.0 || self.mode_deadband < 0.0 {
            return Err(Error::InvalidParams("tolerances must be non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<GuidanceSchedule> {
        build_schedule(&self.params, self.n_steps)
    }
}

/// What a velocity field may look at besides the noisy chunk.
#[derive(Debug, Clone, Copy)]
pub struct FieldContext<'a> {
    pub obs: &'a [f64],
    pub state: &'a EnvState,
}

/// Anything that can drive the denoising loop.
pub trait VelocityField {
    fn family(&self) -> Family;
    fn shape(&self) -> (usize, usize);
    fn velocity(&self, y: &Chunk, ctx: &FieldContext<'_>, t: f64, schedule: &GuidanceSchedule) -> Result<Chunk>;
    fn sample_noise(&self, rng: &mut dyn RngCore) -> Chunk {
        let (h, d) = self.shape();
        standard_normal_chunk(h, d, rng)
    }
}

impl VelocityField for Policy {
    fn family(&self) -> Family {
        self.family
    }

    fn shape(&self) -> (usize, usize) {
        (self.arch.horizon, self.arch.action_dim)
    }

    fn velocity(&self, y: &Chunk, ctx: &FieldContext<'_>, t: f64, schedule: &GuidanceSchedule) -> Result<Chunk> {
        Policy::velocity(self, y, ctx.obs, t, schedule)
    }

    fn sample_noise(&self, rng: &mut dyn RngCore) -> Chunk {
        Policy::sample_noise(self, rng)
    }
}

/// Ideal denoiser toward a known chunk: `v = (A - y) / (1 - t)`. Euler
/// integration with this field reaches `A` at `t = 1` from any state.
pub struct ExpertField<F> {
    expert: F,
    family: Family,
    shape: (usize, usize),
}

impl<F: Fn(&EnvState) -> Chunk> ExpertField<F> {
    /// `expert` maps the environment state at inference time to the chunk the
    /// expert would execute from there.
    pub fn new(expert: F, family: Family, shape: (usize, usize)) -> Self {
        Self { expert, family, shape }
    }
}

impl<F: Fn(&EnvState) -> Chunk> VelocityField for ExpertField<F> {
    fn family(&self) -> Family {
        self.family
    }

    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn velocity(&self, y: &Chunk, ctx: &FieldContext<'_>, t: f64, _schedule: &GuidanceSchedule) -> Result<Chunk> {
        let a = (self.expert)(ctx.state);
        a.ensure_same_shape(y)?;
        let rate = 1.0 / (1.0 - t);
        let mut v = a;
        v.as_array_mut().zip_mut_with(y.as_array(), |a, &y| *a = (*a - y) * rate);
        Ok(v)
    }
}

/// The closed-form continuation target for a fixed `(a, eps)` pair.
pub struct OracleField {
    pub a: Chunk,
    pub eps: Chunk,
}

impl VelocityField for OracleField {
    fn family(&self) -> Family {
        Family::Legato
    }

    fn shape(&self) -> (usize, usize) {
        self.a.shape()
    }

    fn velocity(&self, _y: &Chunk, _ctx: &FieldContext<'_>, t: f64, schedule: &GuidanceSchedule) -> Result<Chunk> {
        target_velocity(&self.a, &self.eps, schedule, t)
    }
}

/// `prev[s..H]` followed by `s` copies of the last row of `prev`.
pub fn pad_last(prev: &Chunk, s: usize) -> Result<Chunk> {
    let (h, dim) = prev.shape();
    if s > h || h == 0 {
        return Err(Error::InvalidParams(format!("shift {s} out of range for horizon {h}")));
    }
    let mut values = Vec::with_capacity(h * dim);
    for i in 0..h {
        values.extend(prev.row((s + i).min(h - 1)).iter());
    }
    Chunk::from_vec(h, dim, values)
}

/// Generated chunk and, when a reference exists, the mean distance between
/// overlap rows (`i < d`) and the reference after initialization and after
/// every denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub chunk: Chunk,
    pub drift: Vec<f64>,
}

fn overlap_distance(state: &Chunk, a_ref: &Chunk, d: usize) -> Option<f64> {
    if d == 0 {
        return None;
    }
    let total: f64 = (0..d)
        .map(|i| {
            state
                .row(i)
                .iter()
                .zip(a_ref.row(i).iter())
                .map(|(x, r)| (x - r) * (x - r))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Some(total / d as f64)
}

fn check_family(field: &dyn VelocityField, strategy: Strategy) -> Result<()> {
    let required = strategy.required_family();
    if field.family() != required {
        return Err(Error::StrategyMismatch {
            strategy: strategy.name().into(),
            required: required.name().into(),
            found: field.family().name().into(),
        });
    }
    Ok(())
}

/// Samples one chunk with the configured strategy. Without a reference
/// (first cycle) every strategy falls back to unguided sampling.
pub fn generate_chunk(
    field: &dyn VelocityField,
    ctx: &FieldContext<'_>,
    a_ref: Option<&Chunk>,
    cfg: &ExecConfig,
    rng: &mut dyn RngCore,
) -> Result<Generation> {
    check_family(field, cfg.strategy)?;
    let eps = field.sample_noise(rng);
    generate_from_noise(field, ctx, a_ref, cfg, eps)
}

/// [`generate_chunk`] with the initial noise supplied by the caller.
pub fn generate_from_noise(
    field: &dyn VelocityField,
    ctx: &FieldContext<'_>,
    a_ref: Option<&Chunk>,
    cfg: &ExecConfig,
    eps: Chunk,
) -> Result<Generation> {
    let (h, _) = field.shape();
    let n = cfg.n_steps;
    let dt = 1.0 / n as f64;
    let zeros = GuidanceSchedule::zeros(h, n)?;
    let d = cfg.params.d;
    let t_at = |k: usize| k as f64 / n as f64;

    let a_ref = match (a_ref, cfg.strategy) {
        (Some(r), s) if s != Strategy::Naive => r,
        _ => {
            let mut x = eps;
            for k in 0..n {
                let v = field.velocity(&x, ctx, t_at(k), &zeros)?;
                x = euler_step(&x, &v, dt)?;
            }
            return Ok(Generation { chunk: x, drift: Vec::new() });
        }
    };
    eps.ensure_same_shape(a_ref)?;

    let mut drift = Vec::with_capacity(n + 1);
    let mut record = |c: &Chunk| drift.extend(overlap_distance(c, a_ref, d));

    let chunk = match cfg.strategy {
        Strategy::Legato | Strategy::RtcSoft | Strategy::RtcTrain => {
            let schedule = match cfg.strategy {
                Strategy::RtcTrain => GuidanceSchedule::hard_prefix(h, d, n)?,
                _ => build_schedule(&cfg.params, n)?,
            };
            // The vanilla model behind rtc_soft never saw a schedule column.
            let condition = if cfg.strategy == Strategy::RtcSoft { &zeros } else { &schedule };
            let y0 = guide(&eps, a_ref, &schedule)?;
            let mut state = DenoiseState::new(eps, y0);
            record(&state.y);
            while state.k < n {
                let v = field.velocity(&state.y, ctx, state.t, condition)?;
                state = guided_step(&state, &v, a_ref, &schedule)?;
                record(&state.y);
            }
            match cfg.strategy {
                Strategy::RtcTrain => state.y,
                _ => state.x,
            }
        }
        Strategy::Oneshot => {
            let mask = GuidanceSchedule::hard_prefix(h, d, n)?;
            let mut x = guide(&eps, a_ref, &mask)?;
            record(&x);
            for k in 0..n {
                let v = field.velocity(&x, ctx, t_at(k), &zeros)?;
                x = euler_step(&x, &v, dt)?;
                record(&x);
            }
            x
        }
        Strategy::Naive => unreachable!("handled above"),
    };
    Ok(Generation { chunk, drift })
}

/// The first `d` rows of a new chunk next to the reference rows they overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapSegment {
    pub reference: Chunk,
    pub generated: Chunk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub index: usize,
    /// Global step at which inference for this chunk started.
    pub start_step: usize,
    pub chunk: Chunk,
    pub reference: Option<Chunk>,
    pub overlap: Option<OverlapSegment>,
    pub mode: i8,
    /// Simulated inference delay in steps.
    pub delay: usize,
    pub drift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub format: String,
    pub version: u32,
    pub config: ExecConfig,
    pub task: TaskSpec,
    pub family: Family,
    /// Committed displacement commands, one row per step.
    pub stream: Chunk,
    /// Agent positions before each committed step and after the last one.
    pub positions: Vec<[f64; 2]>,
    /// Generating cycle of every committed step.
    pub sources: Vec<usize>,
    pub cycles: Vec<CycleRecord>,
}

impl ExecutionTrace {
    pub fn mode_labels(&self) -> Vec<i8> {
        self.cycles.iter().map(|c| c.mode).collect()
    }

    pub fn overlaps(&self) -> Vec<OverlapSegment> {
        self.cycles.iter().filter_map(|c| c.overlap.clone()).collect()
    }

    /// Committed step indices where the command source switches chunks.
    pub fn boundaries(&self) -> Vec<usize> {
        self.sources
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] != w[1])
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let trace: ExecutionTrace = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if trace.format != TRACE_FORMAT || trace.version != TRACE_VERSION {
            return Err(Error::Format(format!("unsupported trace {} v{}", trace.format, trace.version)));
        }
        Ok(trace)
    }
}

/// Sign of the chunk's total lateral displacement, 0 inside the deadband.
pub fn mode_label(chunk: &Chunk, deadband: f64) -> i8 {
    let lateral = chunk.column_sums()[0];
    if lateral.abs() <= deadband {
        0
    } else if lateral > 0.0 {
        1
    } else {
        -1
    }
}

/// Runs up to `cfg.max_cycles` cycles, stopping after the first cycle in
/// which the goal is reached when `cfg.stop_at_goal` is set.
pub fn run_episode(
    field: &dyn VelocityField,
    task: &TaskSpec,
    cfg: &ExecConfig,
    rng: &mut dyn RngCore,
) -> Result<ExecutionTrace> {
    cfg.validate()?;
    check_family(field, cfg.strategy)?;
    let (h, dim) = field.shape();
    if h != cfg.params.horizon {
        return Err(Error::DimensionMismatch {
            what: "policy horizon",
            expected: cfg.params.horizon,
            found: h,
        });
    }
    let (d, s) = (cfg.params.d, cfg.params.s);
    let tolerance = cfg.goal_tolerance_frac * task.goal_distance();

    let mut state = task.initial_state(rng);
    let mut positions = vec![state.position];
    let mut stream: Vec<f64> = Vec::new();
    let mut sources = Vec::new();
    let mut cycles: Vec<CycleRecord> = Vec::new();
    let mut prev: Option<Chunk> = None;

    for c in 0..cfg.max_cycles {
        let obs = task.observe(&state);
        let ctx = FieldContext { obs: &obs, state: &state };
        let reference = match (&prev, cfg.first_reference) {
            (Some(p), _) => Some(pad_last(p, s)?),
            (None, FirstReference::Zero) => Some(Chunk::zeros(h, dim)),
            (None, FirstReference::Unguided) => None,
        };
        let gen = generate_chunk(field, &ctx, reference.as_ref(), cfg, rng)?;
        let chunk = gen.chunk;

        let mut committed: Vec<(usize, [f64; 2])> = Vec::with_capacity(s);
        match &prev {
            None => committed.extend((0..s).map(|i| (c, [chunk.row(i)[0], chunk.row(i)[1]]))),
            Some(p) => {
                committed.extend((s..s + d).map(|i| (c - 1, [p.row(i)[0], p.row(i)[1]])));
                committed.extend((d..s).map(|i| (c, [chunk.row(i)[0], chunk.row(i)[1]])));
            }
        }
        let overlap = match (&reference, d) {
            (Some(r), d) if d > 0 && c > 0 => Some(OverlapSegment {
                reference: r.rows(0..d),
                generated: chunk.rows(0..d),
            }),
            _ => None,
        };

        let mut reached = false;
        for (source, action) in committed {
            if !action.iter().all(|a| a.is_finite()) {
                return Err(Error::NonFiniteAction(stream.len() / dim));
            }
            state = rollout_env(&state, action)?;
            stream.extend_from_slice(&action[..dim]);
            sources.push(source);
            positions.push(state.position);
            reached |= task.goal_reached(&state, tolerance);
        }

        cycles.push(CycleRecord {
            index: c,
            start_step: c * s,
            mode: mode_label(&chunk, cfg.mode_deadband),
            chunk: chunk.clone(),
            reference,
            overlap,
            delay: if c == 0 { 0 } else { d },
            drift: gen.drift,
        });
        prev = Some(chunk);
        if reached && cfg.stop_at_goal {
            break;
        }
    }

    let steps = sources.len();
    Ok(ExecutionTrace {
        format: TRACE_FORMAT.into(),
        version: TRACE_VERSION,
        config: cfg.clone(),
        task: task.clone(),
        family: field.family(),
        stream: Chunk::from_vec(steps, dim, stream)?,
        positions,
        sources,
        cycles,
    })
}

/// [`run_episode`] with a ChaCha8 generator seeded from `cfg.seed`.
pub fn run_episode_seeded(field: &dyn VelocityField, task: &TaskSpec, cfg: &ExecConfig) -> Result<ExecutionTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run_episode(field, task, cfg, &mut rng)
}

/// First step index whose position lies within `tolerance` of any goal.
pub fn completion_time(trace: &ExecutionTrace, task: &TaskSpec, tolerance: f64) -> Option<usize> {
    let goals = task.goals();
    trace.positions.iter().position(|&p| {
        let state = EnvState {
            position: p,
            goals: goals.clone(),
            time: 0,
        };
        task.goal_reached(&state, tolerance)
    })
}
