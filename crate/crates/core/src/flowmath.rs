//! Closed-form flow-matching and continuation math.
//!
//! All operations are element-wise over an `H x D` chunk with the horizon-wise
//! schedule broadcast across the action dimension.

use ndarray::{Array2, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::GuidanceSchedule;

/// An `H x D` matrix of actions (or noise, or an intermediate denoising state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Chunk(Array2<f64>);

impl Chunk {
    pub fn zeros(horizon: usize, action_dim: usize) -> Self {
        Self(Array2::zeros((horizon, action_dim)))
    }

    pub fn from_elem(horizon: usize, action_dim: usize, value: f64) -> Self {
        Self(Array2::from_elem((horizon, action_dim), value))
    }

    pub fn from_array(values: Array2<f64>) -> Self {
        Self(values)
    }

    /// Row-major construction.
    pub fn from_vec(horizon: usize, action_dim: usize, values: Vec<f64>) -> Result<Self> {
        let found = values.len();
        Array2::from_shape_vec((horizon, action_dim), values)
            .map(Self)
            .map_err(|_| Error::DimensionMismatch {
                what: "chunk buffer",
                expected: horizon * action_dim,
                found,
            })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                what: "chunk row",
                expected: dim,
                found: bad.len(),
            });
        }
        Self::from_vec(rows.len(), dim, rows.concat())
    }

    pub fn horizon(&self) -> usize {
        self.0.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn as_array_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    /// Row-major flat copy.
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Chunk) -> f64 {
        Zip::from(&self.0)
            .and(&other.0)
            .fold(0.0, |m: f64, a, b| m.max((a - b).abs()))
    }

    /// Rows `range` as a new chunk.
    pub fn rows(&self, range: std::ops::Range<usize>) -> Chunk {
        Chunk(self.0.slice(ndarray::s![range, ..]).to_owned())
    }

    /// Sum over rows, one entry per action dimension.
    pub fn column_sums(&self) -> Vec<f64> {
        self.0.sum_axis(Axis(0)).to_vec()
    }

    pub fn ensure_same_shape(&self, other: &Chunk) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }

    fn ensure_schedule(&self, schedule: &GuidanceSchedule) -> Result<()> {
        if schedule.horizon() != self.horizon() {
            return Err(Error::DimensionMismatch {
                what: "schedule horizon",
                expected: self.horizon(),
                found: schedule.horizon(),
            });
        }
        Ok(())
    }

    fn combine(&self, other: &Chunk, f: impl Fn(f64, f64) -> f64) -> Chunk {
        let mut out = self.0.clone();
        Zip::from(&mut out).and(&other.0).for_each(|o, &b| *o = f(*o, b));
        Chunk(out)
    }

    /// Like [`combine`](Self::combine) with a per-row weight.
    fn combine_rows(&self, other: &Chunk, weights: &[f64], f: impl Fn(f64, f64, f64) -> f64) -> Chunk {
        let mut out = self.0.clone();
        for ((mut row, b), &w) in out.rows_mut().into_iter().zip(other.0.rows()).zip(weights) {
            Zip::from(&mut row).and(&b).for_each(|o, &b| *o = f(*o, b, w));
        }
        Chunk(out)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParams(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Linear interpolation `(1 - t) eps + t a`.
pub fn fm_path(eps: &Chunk, a: &Chunk, t: f64) -> Result<Chunk> {
    eps.ensure_same_shape(a)?;
    check_time(t)?;
    Ok(eps.combine(a, |e, a| (1.0 - t) * e + t * a))
}

/// Row-wise action/noise mixture `(1 - w) eps + w a`.
pub fn mix_noise(eps: &Chunk, a: &Chunk, schedule: &GuidanceSchedule) -> Result<Chunk> {
    eps.ensure_same_shape(a)?;
    eps.ensure_schedule(schedule)?;
    Ok(eps.combine_rows(a, schedule.omega(), |e, a, w| (1.0 - w) * e + w * a))
}

/// Interpolation from the mixed noise to the action chunk.
pub fn legato_path(eps: &Chunk, a: &Chunk, schedule: &GuidanceSchedule, t: f64) -> Result<Chunk> {
    let mixed = mix_noise(eps, a, schedule)?;
    fm_path(&mixed, a, t)
}

/// Closed-form continuation target `(1 - kappa (1 - t)) (a - eps)`.
///
/// Finite for every weight including `w = 1`.
pub fn target_velocity(a: &Chunk, eps: &Chunk, schedule: &GuidanceSchedule, t: f64) -> Result<Chunk> {
    a.ensure_same_shape(eps)?;
    a.ensure_schedule(schedule)?;
    check_time(t)?;
    let gains: Vec<f64> = schedule.kappa().iter().map(|k| 1.0 - k * (1.0 - t)).collect();
    Ok(a.combine_rows(eps, &gains, |a, e, g| g * (a - e)))
}

/// Soft guidance toward a reference: `(1 - w) x + w a_ref`.
pub fn guide(x: &Chunk, a_ref: &Chunk, schedule: &GuidanceSchedule) -> Result<Chunk> {
    x.ensure_same_shape(a_ref)?;
    x.ensure_schedule(schedule)?;
    Ok(x.combine_rows(a_ref, schedule.omega(), |x, a, w| (1.0 - w) * x + w * a))
}

/// One explicit Euler step `y + dt v`.
pub fn euler_step(y: &Chunk, velocity: &Chunk, dt: f64) -> Result<Chunk> {
    y.ensure_same_shape(velocity)?;
    Ok(y.combine(velocity, |y, v| y + dt * v))
}

/// State of a guided denoising loop at step `k` (time `t = k / N`).
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseState {
    /// Guided state the next velocity is evaluated at.
    pub y: Chunk,
    /// Most recent unguided Euler iterate (the initial noise at `k = 0`).
    pub x: Chunk,
    pub k: usize,
    pub t: f64,
}

impl DenoiseState {
    pub fn new(x0: Chunk, y0: Chunk) -> Self {
        Self { y: y0, x: x0, k: 0, t: 0.0 }
    }
}

/// Advances `state` by one Euler step followed by guidance toward `a_ref`.
pub fn guided_step(
    state: &DenoiseState,
    velocity: &Chunk,
    a_ref: &Chunk,
    schedule: &GuidanceSchedule,
) -> Result<DenoiseState> {
    let n = schedule.n_steps();
    if state.k >= n {
        return Err(Error::StepOverflow { k: state.k, n_steps: n });
    }
    let x = euler_step(&state.y, velocity, schedule.delta_t())?;
    let y = guide(&x, a_ref, schedule)?;
    let k = state.k + 1;
    Ok(DenoiseState { y, x, k, t: k as f64 / n as f64 })
}

/// Per-step-guided Euler integration of the closed-form target with the
/// reference equal to the ground truth. Returns the final guided state, which
/// equals `a` up to rounding for every schedule and step count.
pub fn integrate_exact(eps: &Chunk, a: &Chunk, schedule: &GuidanceSchedule) -> Result<Chunk> {
    integrate_with(eps, a, schedule, target_velocity)
}

/// [`integrate_exact`] with a caller-supplied velocity rule; lets the oracle
/// check be run against deliberately broken targets.
pub fn integrate_with<F>(eps: &Chunk, a: &Chunk, schedule: &GuidanceSchedule, velocity: F) -> Result<Chunk>
where
    F: Fn(&Chunk, &Chunk, &GuidanceSchedule, f64) -> Result<Chunk>,
{
    let y0 = guide(eps, a, schedule)?;
    let mut state = DenoiseState::new(eps.clone(), y0);
    while state.k < schedule.n_steps() {
        let v = velocity(a, eps, schedule, state.t)?;
        state = guided_step(&state, &v, a, schedule)?;
    }
    Ok(state.y)
}
