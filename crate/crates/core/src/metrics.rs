//! Smoothness and consistency metrics on committed command streams.
//!
//! All smoothness metrics are reported so that lower is smoother.

use std::f64::consts::PI;
use std::ops::Range;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{completion_time, ExecutionTrace, OverlapSegment};
use crate::flowmath::Chunk;
use crate::tasks::CONTROL_HZ;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Linear,
    /// Columns hold angles in radians; they are unwrapped before differencing.
    Angular,
}

/// A group of columns whose velocity norm forms one speed profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionBlock {
    pub kind: MotionKind,
    pub columns: Range<usize>,
}

/// Sampled positions (one row per sample) and the sampling interval.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandStream {
    positions: Chunk,
    dt: f64,
    blocks: Vec<MotionBlock>,
}

impl CommandStream {
    /// One linear block spanning every column.
    pub fn from_positions(positions: Chunk, dt: f64) -> Result<Self> {
        let blocks = vec![MotionBlock { kind: MotionKind::Linear, columns: 0..positions.action_dim() }];
        Self::with_blocks(positions, dt, blocks)
    }

    pub fn with_blocks(positions: Chunk, dt: f64, blocks: Vec<MotionBlock>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParams(format!("sampling interval must be positive, got {dt}")));
        }
        if blocks.is_empty() {
            return Err(Error::InvalidParams("a stream needs at least one motion block".into()));
        }
        for b in &blocks {
            if b.columns.is_empty() || b.columns.end > positions.action_dim() {
                return Err(Error::InvalidParams(format!("block columns {:?} out of range", b.columns)));
            }
        }
        if !positions.is_finite() {
            return Err(Error::InvalidParams("stream contains non-finite samples".into()));
        }
        Ok(Self { positions, dt, blocks })
    }

    /// Integrates displacement commands from the origin: `T` commands give
    /// `T + 1` position samples.
    pub fn from_displacements(commands: &Chunk, dt: f64) -> Result<Self> {
        let (t, dim) = commands.shape();
        let mut values = vec![0.0; (t + 1) * dim];
        for i in 0..t {
            for j in 0..dim {
                values[(i + 1) * dim + j] = values[i * dim + j] + commands.as_array()[[i, j]];
            }
        }
        Self::from_positions(Chunk::from_vec(t + 1, dim, values)?, dt)
    }

    pub fn len(&self) -> usize {
        self.positions.horizon()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn positions(&self) -> &Chunk {
        &self.positions
    }

    pub fn blocks(&self) -> &[MotionBlock] {
        &self.blocks
    }

    /// Positions of one block as per-column series, angles unwrapped.
    fn block_series(&self, block: &MotionBlock) -> Vec<Vec<f64>> {
        block
            .columns
            .clone()
            .map(|j| {
                let col: Vec<f64> = self.positions.as_array().column(j).to_vec();
                match block.kind {
                    MotionKind::Linear => col,
                    MotionKind::Angular => unwrap_angles(&col),
                }
            })
            .collect()
    }

    /// Per-sample velocity vectors of one block.
    fn block_velocity(&self, block: &MotionBlock) -> Vec<Vec<f64>> {
        self.block_series(block)
            .iter()
            .map(|x| derivative(x, self.dt))
            .collect()
    }
}

/// Removes `2π` jumps between consecutive samples.
pub fn unwrap_angles(angles: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(angles.len());
    let mut offset = 0.0;
    for (i, &a) in angles.iter().enumerate() {
        if i > 0 {
            let delta = a - angles[i - 1];
            offset -= 2.0 * PI * ((delta + PI) / (2.0 * PI)).floor();
        }
        out.push(a + offset);
    }
    out
}

/// Central differences inside, first-order one-sided differences at the two
/// ends.
pub fn derivative(x: &[f64], dt: f64) -> Vec<f64> {
    let n = x.len();
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| {
                if i == 0 {
                    (x[1] - x[0]) / dt
                } else if i == n - 1 {
                    (x[n - 1] - x[n - 2]) / dt
                } else {
                    (x[i + 1] - x[i - 1]) / (2.0 * dt)
                }
            })
            .collect(),
    }
}

fn norms(components: &[Vec<f64>]) -> Vec<f64> {
    let n = components.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| components.iter().map(|c| c[i] * c[i]).sum::<f64>().sqrt())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparcParams {
    pub threshold: f64,
    pub max_cutoff_hz: f64,
    /// Zero padding: the FFT length is the next power of two above the
    /// signal length, times `2^pad_level`.
    pub pad_level: u32,
}

impl Default for SparcParams {
    fn default() -> Self {
        Self { threshold: 0.05, max_cutoff_hz: 10.0, pad_level: 4 }
    }
}

/// Magnitude spectrum of `signal`, zero-padded to `nfft`, for bins `0 ..= nfft/2`.
fn magnitude_spectrum(signal: &[f64], nfft: usize) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(nfft, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    buf[..=nfft / 2].iter().map(|c| c.norm()).collect()
}

/// Arc length of a normalized spectrum sampled at `freqs`, up to the last bin
/// within `max_cutoff_hz` whose magnitude reaches `threshold`.
pub fn spectral_arc_length(freqs: &[f64], magnitude: &[f64], threshold: f64, max_cutoff_hz: f64) -> Result<f64> {
    let dc = magnitude[0];
    if !(dc > 0.0) {
        return Err(Error::UndefinedMetric("spectral arc length of a motionless profile"));
    }
    let within = freqs.iter().take_while(|&&f| f <= max_cutoff_hz).count().max(2);
    let cutoff = (0..within)
        .rev()
        .find(|&k| magnitude[k] / dc >= threshold)
        .unwrap_or(0)
        .max(1);
    let wc = freqs[cutoff];
    Ok((1..=cutoff)
        .map(|k| {
            let dw = (freqs[k] - freqs[k - 1]) / wc;
            let dv = (magnitude[k] - magnitude[k - 1]) / dc;
            dw.hypot(dv)
        })
        .sum())
}

/// Negated spectral arc length of a speed profile.
pub fn nsparc_of_speed(speed: &[f64], dt: f64, params: &SparcParams) -> Result<f64> {
    if speed.len() < 8 {
        return Err(Error::InvalidParams(format!("spectral arc length needs at least 8 samples, got {}", speed.len())));
    }
    let nfft = speed.len().next_power_of_two() << params.pad_level;
    let magnitude = magnitude_spectrum(speed, nfft);
    let freqs: Vec<f64> = (0..magnitude.len()).map(|k| k as f64 / (nfft as f64 * dt)).collect();
    spectral_arc_length(&freqs, &magnitude, params.threshold, params.max_cutoff_hz)
}

/// Negated spectral arc length, averaged over motion blocks.
pub fn nsparc(stream: &CommandStream, params: &SparcParams) -> Result<f64> {
    let mut total = 0.0;
    for block in stream.blocks() {
        let speed = norms(&stream.block_velocity(block));
        total += nsparc_of_speed(&speed, stream.dt(), params)?;
    }
    Ok(total / stream.blocks().len() as f64)
}

/// Sample indices within `radius` of any of `boundaries`, clipped to `len`.
pub fn expand_boundaries(boundaries: &[usize], radius: usize, len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = boundaries
        .iter()
        .flat_map(|&b| b.saturating_sub(radius)..(b + radius + 1).min(len))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Negated log dimensionless jerk, averaged over motion blocks. Jerk samples
/// at `excluded` indices are left out of the squared-jerk integral.
pub fn nldlj(stream: &CommandStream, excluded: &[usize]) -> Result<f64> {
    let n = stream.len();
    if n < 4 {
        return Err(Error::InvalidParams(format!("jerk needs at least 4 samples, got {n}")));
    }
    let dt = stream.dt();
    let duration = (n - 1) as f64 * dt;
    let mut keep = vec![true; n];
    for &i in excluded {
        if i < n {
            keep[i] = false;
        }
    }
    let mut total = 0.0;
    for block in stream.blocks() {
        let velocity = stream.block_velocity(block);
        let jerk: Vec<Vec<f64>> = velocity
            .iter()
            .map(|v| derivative(&derivative(v, dt), dt))
            .collect();
        let v_peak = norms(&velocity).into_iter().fold(0.0, f64::max);
        if !(v_peak > 0.0) {
            return Err(Error::UndefinedMetric("log dimensionless jerk of a motionless profile"));
        }
        let integral: f64 = norms(&jerk)
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(j, _)| j * j * dt)
            .sum();
        total += (duration.powi(5) / (v_peak * v_peak) * integral).ln();
    }
    Ok(total / stream.blocks().len() as f64)
}

/// Root-mean-square row distance of one overlap segment.
pub fn segment_rmse(a: &Chunk, b: &Chunk) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let rows = a.horizon();
    if rows == 0 {
        return Err(Error::UndefinedMetric("overlap of zero rows"));
    }
    let sq: f64 = a.as_array().iter().zip(b.as_array().iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / rows as f64).sqrt())
}

/// Mean per-boundary RMSE; `None` when no segment has any rows.
pub fn overlap_rmse(segments: &[OverlapSegment]) -> Result<Option<f64>> {
    let mut values = Vec::new();
    for s in segments.iter().filter(|s| s.reference.horizon() > 0) {
        values.push(segment_rmse(&s.reference, &s.generated)?);
    }
    if values.is_empty() {
        return Ok(None);
    }
    Ok(Some(values.iter().sum::<f64>() / values.len() as f64))
}

/// Number of adjacent label pairs that differ. Label 0 (no lateral motion)
/// carries no mode, so those cycles are skipped.
pub fn count_switches(labels: &[i8]) -> usize {
    let committed: Vec<i8> = labels.iter().copied().filter(|&l| l != 0).collect();
    committed.windows(2).filter(|w| w[0] != w[1]).count()
}

pub fn mode_switches(trace: &ExecutionTrace) -> usize {
    count_switches(&trace.mode_labels())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub sparc: SparcParams,
    /// Jerk samples within this many steps of a chunk boundary are excluded.
    pub boundary_radius: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { sparc: SparcParams::default(), boundary_radius: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nsparc: f64,
    pub nldlj: f64,
    pub overlap_rmse: Option<f64>,
    pub mode_switches: usize,
    pub completion_steps: Option<usize>,
}

/// Metrics of one trace, sampled at the control rate.
pub fn evaluate_trace(trace: &ExecutionTrace, cfg: &MetricConfig) -> Result<MetricReport> {
    let stream = CommandStream::from_displacements(&trace.stream, 1.0 / CONTROL_HZ)?;
    let excluded = expand_boundaries(&trace.boundaries(), cfg.boundary_radius, stream.len());
    let tolerance = trace.config.goal_tolerance_frac * trace.task.goal_distance();
    Ok(MetricReport {
        nsparc: nsparc(&stream, &cfg.sparc)?,
        nldlj: nldlj(&stream, &excluded)?,
        overlap_rmse: overlap_rmse(&trace.overlaps())?,
        mode_switches: mode_switches(trace),
        completion_steps: completion_time(trace, &trace.task, tolerance),
    })
}

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

pub fn mean_se(values: &[f64]) -> Option<MeanSe> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanSe { mean, se, n })
}

/// Per-field statistics over a set of reports; absent values are skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub nsparc: Option<MeanSe>,
    pub nldlj: Option<MeanSe>,
    pub overlap_rmse: Option<MeanSe>,
    pub mode_switches: Option<MeanSe>,
    pub completion_steps: Option<MeanSe>,
    pub completed: usize,
    pub runs: usize,
}

pub fn summarize(reports: &[MetricReport]) -> ReportSummary {
    let collect = |f: &dyn Fn(&MetricReport) -> Option<f64>| -> Vec<f64> { reports.iter().filter_map(f).collect() };
    let completion = collect(&|r| r.completion_steps.map(|c| c as f64));
    ReportSummary {
        nsparc: mean_se(&collect(&|r| Some(r.nsparc))),
        nldlj: mean_se(&collect(&|r| Some(r.nldlj))),
        overlap_rmse: mean_se(&collect(&|r| r.overlap_rmse)),
        mode_switches: mean_se(&collect(&|r| Some(r.mode_switches as f64))),
        completed: completion.len(),
        completion_steps: mean_se(&completion),
        runs: reports.len(),
    }
}
