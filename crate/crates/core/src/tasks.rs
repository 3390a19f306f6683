//! Synthetic 2-D tasks with expert demonstrators.
//!
//! Actions are per-step displacements, so a committed command stream is also
//! the velocity profile of the agent.
//!
//! # Dataset file layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes   b"LGDS"
//! version      u32       currently 1
//! header_len   u32       byte length of the JSON header
//! header       JSON      DatasetHeader
//! n_demos records, each:
//!   mode       u32
//!   obs        f64 x obs_dim
//!   chunk      f64 x (horizon * action_dim), row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmath::Chunk;

pub const DATASET_MAGIC: &[u8; 4] = b"LGDS";
pub const DATASET_VERSION: u32 = 1;

/// Simulated control rate in steps per second.
pub const CONTROL_HZ: f64 = 30.0;

pub const ACTION_DIM: usize = 2;
pub const OBS_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 2],
    pub goals: Vec<[f64; 2]>,
    pub time: usize,
}

/// Applies one displacement.
pub fn rollout_env(state: &EnvState, action: [f64; 2]) -> Result<EnvState> {
    if !action.iter().all(|a| a.is_finite()) {
        return Err(Error::NonFiniteAction(state.time));
    }
    Ok(EnvState {
        position: [state.position[0] + action[0], state.position[1] + action[1]],
        goals: state.goals.clone(),
        time: state.time + 1,
    })
}

/// Executes every row of `chunk` in order.
pub fn rollout_chunk(state: &EnvState, chunk: &Chunk) -> Result<EnvState> {
    let mut s = state.clone();
    for row in chunk.as_array().rows() {
        s = rollout_env(&s, [row[0], row[1]])?;
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    /// State at the chunk start.
    pub observation: Vec<f64>,
    pub chunk: Chunk,
    /// Index of the goal the expert committed to.
    pub mode: usize,
}

fn min_jerk(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    scale * z
}

/// Two goals at `(+-goal_x, goal_y)`. The expert rises with a minimum-jerk
/// profile over `duration` steps and makes its lateral minimum-jerk move
/// between `branch_start` and `duration`.
///
/// The observation is `(|x|, y)`: the two goals are mirror images and the
/// agent cannot see which side it is on, so the committed mode survives only
/// through the actions themselves.
///
/// Demonstrations are cut from the expert at a random step in
/// `0 .. duration + hold_steps`. The observed state is displaced by a Gaussian
/// offset of scale `correction_scale`, and the demonstrated chunk removes that
/// offset over `correction_steps` steps with a minimum-jerk blend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachParams {
    pub goal_x: f64,
    pub goal_y: f64,
    pub duration: usize,
    pub branch_start: usize,
    pub noise_scale: f64,
    #[serde(default)]
    pub correction_scale: f64,
    #[serde(default = "ReachParams::default_correction_steps")]
    pub correction_steps: usize,
    #[serde(default)]
    pub hold_steps: usize,
}

impl Default for ReachParams {
    fn default() -> Self {
        Self {
            goal_x: 1.0,
            goal_y: 1.0,
            duration: 150,
            branch_start: 0,
            noise_scale: 0.01,
            correction_scale: 0.05,
            correction_steps: Self::default_correction_steps(),
            hold_steps: 30,
        }
    }
}

/// One expert reach from `start` to `goal`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachEpisode {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub duration: usize,
    pub branch_start: usize,
}

impl ReachEpisode {
    pub fn position(&self, step: usize) -> [f64; 2] {
        let t = step as f64;
        let lateral = (t - self.branch_start as f64) / (self.duration - self.branch_start) as f64;
        let rise = t / self.duration as f64;
        [
            self.start[0] + (self.goal[0] - self.start[0]) * min_jerk(lateral),
            self.start[1] + (self.goal[1] - self.start[1]) * min_jerk(rise),
        ]
    }

    /// Displacements for steps `from .. from + horizon`.
    pub fn actions(&self, from: usize, horizon: usize) -> Chunk {
        let mut values = Vec::with_capacity(horizon * 2);
        for k in from..from + horizon {
            let (p, q) = (self.position(k), self.position(k + 1));
            values.push(q[0] - p[0]);
            values.push(q[1] - p[1]);
        }
        Chunk::from_vec(horizon, 2, values).expect("sized buffer")
    }

    /// Displacements for steps `from .. from + horizon` starting from
    /// `position(from) + offset`, with the offset blended out over `steps`.
    pub fn corrected_actions(&self, from: usize, horizon: usize, offset: [f64; 2], steps: usize) -> Chunk {
        let at = |k: usize| {
            let p = self.position(k);
            let keep = 1.0 - min_jerk((k - from) as f64 / steps.max(1) as f64);
            [p[0] + keep * offset[0], p[1] + keep * offset[1]]
        };
        let mut values = Vec::with_capacity(horizon * 2);
        for k in from..from + horizon {
            let (p, q) = (at(k), at(k + 1));
            values.push(q[0] - p[0]);
            values.push(q[1] - p[1]);
        }
        Chunk::from_vec(horizon, 2, values).expect("sized buffer")
    }

    pub fn mode(&self) -> usize {
        usize::from(self.goal[0] > 0.0)
    }
}

impl ReachParams {
    fn default_correction_steps() -> usize {
        30
    }

    fn validate(&self) -> Result<()> {
        if self.duration == 0 || self.branch_start >= self.duration {
            return Err(Error::InvalidParams("reach needs 0 <= branch_start < duration".into()));
        }
        if self.noise_scale < 0.0 || self.correction_scale < 0.0 || self.correction_steps == 0 {
            return Err(Error::InvalidParams("reach noise scales must be non-negative and correction_steps positive".into()));
        }
        Ok(())
    }

    pub fn goals(&self) -> Vec<[f64; 2]> {
        vec![[-self.goal_x, self.goal_y], [self.goal_x, self.goal_y]]
    }

    /// Samples a start perturbation and a goal (mode drawn uniformly).
    pub fn sample_episode<R: Rng + ?Sized>(&self, rng: &mut R) -> ReachEpisode {
        let right = rng.random_bool(0.5);
        let sign = if right { 1.0 } else { -1.0 };
        let n = self.noise_scale;
        ReachEpisode {
            start: [gaussian(rng, n), gaussian(rng, n)],
            goal: [sign * self.goal_x + gaussian(rng, n), self.goal_y + gaussian(rng, n)],
            duration: self.duration,
            branch_start: self.branch_start,
        }
    }
}

fn mirrored(position: [f64; 2]) -> Vec<f64> {
    vec![position[0].abs(), position[1]]
}

/// Bimodal reach demonstrations with default geometry.
pub fn gen_bimodal_reach<R: Rng + ?Sized>(
    rng: &mut R,
    n_demos: usize,
    horizon: usize,
    noise_scale: f64,
) -> Result<Vec<Demonstration>> {
    let params = ReachParams {
        noise_scale,
        ..ReachParams::default()
    };
    TaskSpec::BimodalReach(params).generate(rng, n_demos, horizon)
}

/// A rotation-dominant periodic motion: the agent advances `length` per
/// period with a raised-cosine speed profile while tilting up by `lift` and
/// back, repeated `cycles` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PourParams {
    pub period: usize,
    pub length: f64,
    pub lift: f64,
    pub cycles: usize,
    pub noise_scale: f64,
}

impl Default for PourParams {
    fn default() -> Self {
        Self {
            period: 60,
            length: 0.5,
            lift: 0.3,
            cycles: 2,
            noise_scale: 0.0,
        }
    }
}

impl PourParams {
    fn validate(&self) -> Result<()> {
        if self.period == 0 || self.cycles == 0 {
            return Err(Error::InvalidParams("pour needs positive period and cycles".into()));
        }
        Ok(())
    }

    pub fn duration(&self) -> usize {
        self.period * self.cycles
    }

    pub fn goal(&self) -> [f64; 2] {
        [self.length * self.cycles as f64, 0.0]
    }

    pub fn position(&self, step: usize) -> [f64; 2] {
        let u = step.min(self.duration()) as f64 / self.period as f64;
        let phase = 2.0 * std::f64::consts::PI * u;
        [
            self.length * (u - phase.sin() / (2.0 * std::f64::consts::PI)),
            self.lift * 0.5 * (1.0 - phase.cos()),
        ]
    }

    pub fn actions(&self, from: usize, horizon: usize) -> Chunk {
        let mut values = Vec::with_capacity(horizon * 2);
        for k in from..from + horizon {
            let (p, q) = (self.position(k), self.position(k + 1));
            values.push(q[0] - p[0]);
            values.push(q[1] - p[1]);
        }
        Chunk::from_vec(horizon, 2, values).expect("sized buffer")
    }

    /// The full noise-free expert displacement stream.
    pub fn expert_stream(&self) -> Chunk {
        self.actions(0, self.duration())
    }
}

/// Oscillating-pour demonstrations.
pub fn gen_oscillating_pour<R: Rng + ?Sized>(
    rng: &mut R,
    n_demos: usize,
    horizon: usize,
    period: usize,
) -> Result<Vec<Demonstration>> {
    let params = PourParams {
        period,
        ..PourParams::default()
    };
    TaskSpec::OscillatingPour(params).generate(rng, n_demos, horizon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    BimodalReach(ReachParams),
    OscillatingPour(PourParams),
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::BimodalReach(_) => "bimodal_reach",
            TaskSpec::OscillatingPour(_) => "oscillating_pour",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::BimodalReach(p) => p.validate(),
            TaskSpec::OscillatingPour(p) => p.validate(),
        }
    }

    pub fn goals(&self) -> Vec<[f64; 2]> {
        match self {
            TaskSpec::BimodalReach(p) => p.goals(),
            TaskSpec::OscillatingPour(p) => vec![p.goal()],
        }
    }

    /// Distance from the nominal start to the (first) goal.
    pub fn goal_distance(&self) -> f64 {
        let g = self.goals()[0];
        g[0].hypot(g[1])
    }

    /// Episode start: the origin with Gaussian jitter.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let n = match self {
            TaskSpec::BimodalReach(p) => p.noise_scale,
            TaskSpec::OscillatingPour(p) => p.noise_scale,
        };
        EnvState {
            position: [gaussian(rng, n), gaussian(rng, n)],
            goals: self.goals(),
            time: 0,
        }
    }

    pub fn observe(&self, state: &EnvState) -> Vec<f64> {
        match self {
            TaskSpec::BimodalReach(_) => mirrored(state.position),
            TaskSpec::OscillatingPour(_) => state.position.to_vec(),
        }
    }

    pub fn goal_reached(&self, state: &EnvState, tolerance: f64) -> bool {
        state
            .goals
            .iter()
            .any(|g| (state.position[0] - g[0]).hypot(state.position[1] - g[1]) <= tolerance)
    }

    /// `n_demos` (observation, chunk) pairs, each from an independent expert
    /// episode cut at a uniformly drawn start step.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R, n_demos: usize, horizon: usize) -> Result<Vec<Demonstration>> {
        self.validate()?;
        if n_demos == 0 || horizon == 0 {
            return Err(Error::InvalidParams("n_demos and horizon must be positive".into()));
        }
        let demos = (0..n_demos)
            .map(|_| match self {
                TaskSpec::BimodalReach(p) => {
                    let ep = p.sample_episode(rng);
                    let from = rng.random_range(0..p.duration + p.hold_steps);
                    let offset = [gaussian(rng, p.correction_scale), gaussian(rng, p.correction_scale)];
                    let pos = ep.position(from);
                    Demonstration {
                        observation: mirrored([pos[0] + offset[0], pos[1] + offset[1]]),
                        chunk: ep.corrected_actions(from, horizon, offset, p.correction_steps),
                        mode: ep.mode(),
                    }
                }
                TaskSpec::OscillatingPour(p) => {
                    let from = rng.random_range(0..p.duration());
                    let pos = p.position(from);
                    let jitter = [gaussian(rng, p.noise_scale), gaussian(rng, p.noise_scale)];
                    Demonstration {
                        observation: vec![pos[0] + jitter[0], pos[1] + jitter[1]],
                        chunk: p.actions(from, horizon),
                        mode: 0,
                    }
                }
            })
            .collect();
        Ok(demos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub horizon: usize,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub n_demos: usize,
    pub seed: u64,
    pub generator: TaskSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub demos: Vec<Demonstration>,
}

impl Dataset {
    pub fn generate<R: Rng + ?Sized>(task: &TaskSpec, rng: &mut R, n_demos: usize, horizon: usize, seed: u64) -> Result<Self> {
        let demos = task.generate(rng, n_demos, horizon)?;
        Ok(Self {
            header: DatasetHeader {
                horizon,
                action_dim: ACTION_DIM,
                obs_dim: OBS_DIM,
                n_demos,
                seed,
                generator: task.clone(),
            },
            demos,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_u32::<LittleEndian>(DATASET_VERSION)?;
        w.write_u32::<LittleEndian>(header.len() as u32)?;
        w.write_all(&header)?;
        for demo in &self.demos {
            w.write_u32::<LittleEndian>(demo.mode as u32)?;
            for &v in &demo.observation {
                w.write_f64::<LittleEndian>(v)?;
            }
            for &v in demo.chunk.as_array().iter() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: DatasetHeader = serde_json::from_slice(&header)?;
        let mut demos = Vec::with_capacity(header.n_demos);
        for _ in 0..header.n_demos {
            let mode = r.read_u32::<LittleEndian>()? as usize;
            let mut observation = vec![0.0; header.obs_dim];
            r.read_f64_into::<LittleEndian>(&mut observation)?;
            let mut values = vec![0.0; header.horizon * header.action_dim];
            r.read_f64_into::<LittleEndian>(&mut values)?;
            demos.push(Demonstration {
                observation,
                chunk: Chunk::from_vec(header.horizon, header.action_dim, values)?,
                mode,
            });
        }
        Ok(Self { header, demos })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(file)
    }
}
