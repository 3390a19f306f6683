//! Velocity-field policy `f(Y, o, t, omega)` and its training.
//!
//! The network sees the noisy chunk with the schedule appended as an extra
//! feature column, the observation, and a sinusoidal embedding of `t`. It
//! works in normalized action coordinates; [`Policy::velocity`] maps to and
//! from raw units. Guidance is a convex combination, so it commutes with the
//! per-dimension affine normalization.

mod checkpoint;
mod gradcheck;
mod mlp;
mod train;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmath::Chunk;
use crate::schedule::GuidanceSchedule;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_with, GradSample};
pub use mlp::{masked_mse, Activation, Dense, ForwardCache, Gradients, Mlp};
pub use train::{train, Adam, TrainConfig, TrainOutcome, TrainingBatch, Trainer};

/// Which training objective produced a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Standard flow matching, zero schedule.
    Vanilla,
    /// Randomized schedule-shaped continuation targets.
    Legato,
    /// Hard-prefix conditioning with the unreshaped flow-matching target.
    RtcTrain,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Vanilla => "vanilla",
            Family::Legato => "legato",
            Family::RtcTrain => "rtc_train",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape descriptor stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub horizon: usize,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    /// Number of sinusoid frequencies in the time embedding.
    pub time_frequencies: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn time_features(&self) -> usize {
        1 + 2 * self.time_frequencies
    }

    pub fn input_dim(&self) -> usize {
        self.horizon * (self.action_dim + 1) + self.obs_dim + self.time_features()
    }

    pub fn output_dim(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.output_dim()))
            .collect()
    }
}

/// Per-dimension affine map `z = (x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Fits mean and standard deviation per column of `rows`; the scale is
    /// floored at `1e-6`.
    pub fn fit<'a, I>(dim: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut count = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for row in rows {
            for ((s, q), &v) in sum.iter_mut().zip(sq.iter_mut()).zip(row) {
                *s += v;
                *q += v * v;
            }
            count += 1;
        }
        if count == 0 {
            return Self::identity(dim);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Self { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn normalize_chunk(&self, chunk: &Chunk) -> Chunk {
        let mut out = chunk.clone();
        for mut row in out.as_array_mut().rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn denormalize_chunk(&self, chunk: &Chunk) -> Chunk {
        let mut out = chunk.clone();
        for mut row in out.as_array_mut().rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = *v * s + m;
            }
        }
        out
    }

    /// Maps a time derivative from normalized to raw units (scale only).
    pub fn denormalize_rate(&self, chunk: &Chunk) -> Chunk {
        let mut out = chunk.clone();
        for mut row in out.as_array_mut().rows_mut() {
            for (v, s) in row.iter_mut().zip(&self.scale) {
                *v *= s;
            }
        }
        out
    }
}

/// Appends the schedule as column `D` of the noisy chunk. With `enabled =
/// false` the column is zero-filled.
pub fn attach_condition_row(y: &Chunk, schedule: &GuidanceSchedule, enabled: bool) -> Result<Array2<f64>> {
    let (h, d) = y.shape();
    if schedule.horizon() != h {
        return Err(Error::DimensionMismatch {
            what: "schedule horizon",
            expected: h,
            found: schedule.horizon(),
        });
    }
    let mut out = Array2::zeros((h, d + 1));
    out.slice_mut(ndarray::s![.., ..d]).assign(y.as_array());
    if enabled {
        out.column_mut(d).assign(&Array1::from(schedule.omega().to_vec()));
    }
    Ok(out)
}

/// Inverse of [`attach_condition_row`].
pub fn strip_condition_row(conditioned: &Array2<f64>) -> Chunk {
    let d = conditioned.ncols() - 1;
    Chunk::from_array(conditioned.slice(ndarray::s![.., ..d]).to_owned())
}

/// `[t, sin(pi j t), cos(pi j t) for j = 1..=frequencies]`.
pub fn time_embedding(t: f64, frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(1 + 2 * frequencies);
    out.push(t);
    for j in 1..=frequencies {
        let phase = std::f64::consts::PI * j as f64 * t;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    out
}

/// A trained (or freshly initialized) velocity field plus the normalization
/// it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub arch: Architecture,
    pub net: Mlp,
    pub action_norm: Normalizer,
    pub obs_norm: Normalizer,
    pub family: Family,
    pub condition_row: bool,
}

impl Policy {
    pub fn new(
        arch: Architecture,
        net: Mlp,
        action_norm: Normalizer,
        obs_norm: Normalizer,
        family: Family,
        condition_row: bool,
    ) -> Result<Self> {
        if net.sizes() != arch.layer_sizes() || net.activation() != arch.activation {
            return Err(Error::ArchitectureMismatch(format!(
                "network sizes {:?} do not match descriptor {:?}",
                net.sizes(),
                arch.layer_sizes()
            )));
        }
        if action_norm.dim() != arch.action_dim || obs_norm.dim() != arch.obs_dim {
            return Err(Error::ArchitectureMismatch("normalizer dimensions".into()));
        }
        Ok(Self {
            arch,
            net,
            action_norm,
            obs_norm,
            family,
            condition_row,
        })
    }

    /// Fresh Xavier-initialized policy with identity normalization.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, family: Family, condition_row: bool, rng: &mut R) -> Result<Self> {
        let net = Mlp::new(&arch.layer_sizes(), arch.activation, rng)?;
        let (a, o) = (Normalizer::identity(arch.action_dim), Normalizer::identity(arch.obs_dim));
        Self::new(arch, net, a, o, family, condition_row)
    }

    /// Network input row for normalized `y` and `obs`.
    pub fn features(&self, y: &Chunk, obs: &[f64], t: f64, schedule: &GuidanceSchedule) -> Result<Vec<f64>> {
        if y.shape() != (self.arch.horizon, self.arch.action_dim) {
            return Err(Error::ShapeMismatch {
                expected: (self.arch.horizon, self.arch.action_dim),
                found: y.shape(),
            });
        }
        if obs.len() != self.arch.obs_dim {
            return Err(Error::DimensionMismatch {
                what: "observation",
                expected: self.arch.obs_dim,
                found: obs.len(),
            });
        }
        let conditioned = attach_condition_row(y, schedule, self.condition_row)?;
        let mut row = Vec::with_capacity(self.arch.input_dim());
        row.extend(conditioned.iter());
        row.extend_from_slice(obs);
        row.extend(time_embedding(t, self.arch.time_frequencies));
        Ok(row)
    }

    /// Velocity prediction in normalized coordinates for a normalized state
    /// and observation.
    pub fn forward(&self, y: &Chunk, obs: &[f64], t: f64, schedule: &GuidanceSchedule) -> Result<Chunk> {
        let row = self.features(y, obs, t, schedule)?;
        let input = Array2::from_shape_vec((1, row.len()), row).expect("row length matches");
        let out = self.net.forward_batch(input.view())?;
        Chunk::from_vec(self.arch.horizon, self.arch.action_dim, out.into_raw_vec_and_offset().0)
    }

    /// Velocity in raw action units for a raw state and observation.
    pub fn velocity(&self, y: &Chunk, obs: &[f64], t: f64, schedule: &GuidanceSchedule) -> Result<Chunk> {
        let yn = self.action_norm.normalize_chunk(y);
        let on = self.obs_norm.normalize(obs);
        let v = self.forward(&yn, &on, t, schedule)?;
        Ok(self.action_norm.denormalize_rate(&v))
    }

    /// A standard normal draw in normalized coordinates, mapped to raw units.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Chunk {
        let z = standard_normal_chunk(self.arch.horizon, self.arch.action_dim, rng);
        self.action_norm.denormalize_chunk(&z)
    }
}

pub fn standard_normal_chunk<R: Rng + ?Sized>(horizon: usize, action_dim: usize, rng: &mut R) -> Chunk {
    let values = (0..horizon * action_dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Chunk::from_vec(horizon, action_dim, values).expect("sized buffer")
}
