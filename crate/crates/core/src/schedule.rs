//! Guidance schedules over the chunk horizon.
//!
//! A schedule assigns each of the `H` chunk rows a weight in `[0, 1]`: the
//! first `d` rows (the inference delay) are fully guided, the next `r` rows
//! ramp linearly down, and the rest are free. `kappa = omega * N` is the
//! per-row stiffness of the guided ODE for an `N`-step Euler discretization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar schedule parameters, all in timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleParams {
    /// Inference delay; length of the fully guided prefix.
    pub d: usize,
    /// Ramp length.
    pub r: usize,
    /// Executed stride per cycle.
    pub s: usize,
    /// Chunk horizon.
    #[serde(rename = "H")]
    pub horizon: usize,
}

impl ScheduleParams {
    pub fn new(d: usize, r: usize, s: usize, horizon: usize) -> Result<Self> {
        let params = Self { d, r, s, horizon };
        params.validate()?;
        Ok(params)
    }

    /// Parameters satisfying `r + s + d = H`.
    pub fn rtc(d: usize, s: usize, horizon: usize) -> Result<Self> {
        let r = horizon
            .checked_sub(d + s)
            .ok_or_else(|| Error::InvalidParams(format!("d + s = {} exceeds H = {horizon}", d + s)))?;
        Self::new(d, r, s, horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidParams("H must be positive".into()));
        }
        if self.s == 0 || self.s > self.horizon {
            return Err(Error::InvalidParams(format!(
                "s = {} must lie in [1, H = {}]",
                self.s, self.horizon
            )));
        }
        if self.d + self.r > self.horizon {
            return Err(Error::InvalidParams(format!(
                "d + r = {} exceeds H = {}",
                self.d + self.r,
                self.horizon
            )));
        }
        Ok(())
    }

    /// Whether `r + s + d = H` holds.
    pub fn satisfies_rtc_constraint(&self) -> bool {
        self.r + self.s + self.d == self.horizon
    }

    /// Like [`validate`](Self::validate), additionally requiring the RTC constraint.
    pub fn validate_rtc(&self) -> Result<()> {
        self.validate()?;
        if !self.satisfies_rtc_constraint() {
            return Err(Error::InvalidParams(format!(
                "r + s + d = {} != H = {}",
                self.r + self.s + self.d,
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Per-row guidance weights `omega`, stiffness `kappa = omega / delta_t`, and
/// the step size of the Euler grid they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSchedule {
    omega: Vec<f64>,
    kappa: Vec<f64>,
    delta_t: f64,
    n_steps: usize,
}

impl GuidanceSchedule {
    /// Schedule from an explicit weight vector. Weights must lie in `[0, 1]`;
    /// monotonicity is not required so that nonstandard shapes stay expressible.
    pub fn from_omega(omega: Vec<f64>, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidParams("n_steps must be at least 1".into()));
        }
        if omega.is_empty() {
            return Err(Error::InvalidParams("omega must be non-empty".into()));
        }
        if let Some(w) = omega.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::InvalidParams(format!("omega weight {w} outside [0, 1]")));
        }
        let n = n_steps as f64;
        let kappa = omega.iter().map(|w| w * n).collect();
        Ok(Self {
            omega,
            kappa,
            delta_t: 1.0 / n,
            n_steps,
        })
    }

    /// All-zero schedule: standard flow matching.
    pub fn zeros(horizon: usize, n_steps: usize) -> Result<Self> {
        Self::from_omega(vec![0.0; horizon], n_steps)
    }

    /// Hard 0/1 mask over the first `d` rows.
    pub fn hard_prefix(horizon: usize, d: usize, n_steps: usize) -> Result<Self> {
        if d > horizon {
            return Err(Error::InvalidParams(format!("prefix {d} exceeds H = {horizon}")));
        }
        Self::from_omega(ramp_weights(d, 0, horizon), n_steps)
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn delta_t(&self) -> f64 {
        self.delta_t
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> usize {
        self.omega.len()
    }

    /// Number of leading rows with weight exactly 1.
    pub fn full_prefix_len(&self) -> usize {
        self.omega.iter().take_while(|&&w| w == 1.0).count()
    }

    pub fn is_zero(&self) -> bool {
        self.omega.iter().all(|&w| w == 0.0)
    }
}

fn ramp_weights(d: usize, r: usize, horizon: usize) -> Vec<f64> {
    let mut omega = vec![0.0; horizon];
    omega[..d].fill(1.0);
    for j in 0..r {
        omega[d + j] = 1.0 - (j + 1) as f64 / (r + 1) as f64;
    }
    omega
}

/// Builds the prefix-plus-linear-ramp schedule for `params` on an `n_steps` grid.
pub fn build_schedule(params: &ScheduleParams, n_steps: usize) -> Result<GuidanceSchedule> {
    params.validate()?;
    GuidanceSchedule::from_omega(ramp_weights(params.d, params.r, params.horizon), n_steps)
}

/// Inclusive integer ranges for schedule randomization during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleRanges {
    pub d_range: (usize, usize),
    pub r_range: (usize, usize),
}

impl Default for ScheduleRanges {
    fn default() -> Self {
        Self {
            d_range: (0, 10),
            r_range: (0, 50),
        }
    }
}

impl ScheduleRanges {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        let (lo, hi) = self.d_range;
        if lo > hi || hi > horizon {
            return Err(Error::InvalidParams(format!(
                "d range [{lo}, {hi}] must be ordered and within [0, {horizon}]"
            )));
        }
        // r is clipped against the horizon when drawn.
        if self.r_range.0 > self.r_range.1 {
            return Err(Error::InvalidParams(format!("r range {:?} must be ordered", self.r_range)));
        }
        Ok(())
    }
}

/// Draws `d` and `r` uniformly from their ranges, clips `r` so that
/// `d + r <= H`, and builds the resulting schedule. Returns the drawn pair
/// alongside the schedule.
pub fn sample_schedule<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &ScheduleRanges,
    horizon: usize,
    n_steps: usize,
) -> Result<(GuidanceSchedule, (usize, usize))> {
    ranges.validate(horizon)?;
    let d = rng.random_range(ranges.d_range.0..=ranges.d_range.1);
    let r = rng
        .random_range(ranges.r_range.0..=ranges.r_range.1)
        .min(horizon - d);
    let schedule = GuidanceSchedule::from_omega(ramp_weights(d, r, horizon), n_steps)?;
    Ok((schedule, (d, r)))
}

/// Serialized schedule block of a run configuration. An explicit `omega`
/// overrides `(d, r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub d: usize,
    pub r: usize,
    pub s: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub n_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<Vec<f64>>,
}

impl ScheduleSpec {
    pub fn params(&self) -> Result<ScheduleParams> {
        ScheduleParams::new(self.d, self.r, self.s, self.horizon)
    }

    pub fn build(&self) -> Result<GuidanceSchedule> {
        match &self.omega {
            Some(omega) => {
                if omega.len() != self.horizon {
                    return Err(Error::DimensionMismatch {
                        what: "explicit omega",
                        expected: self.horizon,
                        found: omega.len(),
                    });
                }
                GuidanceSchedule::from_omega(omega.clone(), self.n_steps)
            }
            None => build_schedule(&self.params()?, self.n_steps),
        }
    }
}
