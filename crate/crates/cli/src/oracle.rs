//! Model-free invariant checks behind `oracle-check`.

use legato_core::flowmath::{euler_step, fm_path, guide, guided_step, legato_path, target_velocity, DenoiseState};
use legato_core::policy::{grad_check, Activation, GradSample, Mlp, TrainConfig};
use legato_core::schedule::{build_schedule, GuidanceSchedule, ScheduleParams};
use legato_core::{Chunk, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Signature of the regression target under test.
pub type TargetFn = fn(&Chunk, &Chunk, &GuidanceSchedule, f64) -> Result<Chunk>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct OracleSuite {
    pub target: TargetFn,
    pub seed: u64,
    /// Random cases per step count in the path check.
    pub cases_per_n: usize,
    pub max_n: usize,
}

impl Default for OracleSuite {
    fn default() -> Self {
        Self { target: target_velocity, seed: 0, cases_per_n: 50, max_n: 20 }
    }
}

fn normal_chunk(rng: &mut ChaCha8Rng, h: usize, dim: usize, scale: f64) -> Chunk {
    let v = (0..h * dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Chunk::from_vec(h, dim, v).expect("sized")
}

/// A ramp schedule half the time, otherwise arbitrary weights behind a
/// full-guidance prefix.
fn random_schedule(rng: &mut ChaCha8Rng, h: usize, n: usize) -> GuidanceSchedule {
    let d = rng.random_range(0..=h);
    if rng.random_bool(0.5) {
        let r = rng.random_range(0..=h - d);
        let params = ScheduleParams::new(d, r, d.max(1).min(h), h).expect("fits");
        build_schedule(&params, n).expect("valid")
    } else {
        let omega = (0..h).map(|i| if i < d { 1.0 } else { rng.random_range(0.0..=1.0) }).collect();
        GuidanceSchedule::from_omega(omega, n).expect("valid")
    }
}

fn scaled_error(got: &Chunk, want: &Chunk) -> f64 {
    got.max_abs_diff(want) / want.max_abs().max(1.0)
}

impl OracleSuite {
    pub fn run(&self) -> Vec<CheckOutcome> {
        vec![self.path_consistency(), self.fm_reduction(), self.full_guidance(), self.gradients()]
    }

    /// Every guided iterate sits on the training path and the last one is
    /// the action chunk, for step counts `1..=max_n`.
    fn path_consistency(&self) -> CheckOutcome {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut worst: f64 = 0.0;
        let mut cases = 0;
        for n in 1..=self.max_n {
            for _ in 0..self.cases_per_n {
                let h = rng.random_range(1..=60);
                let dim = rng.random_range(1..=14);
                let eps = normal_chunk(&mut rng, h, dim, 1.0);
                let a = normal_chunk(&mut rng, h, dim, 2.0);
                let s = random_schedule(&mut rng, h, n);
                worst = worst.max(self.path_error(&eps, &a, &s).unwrap_or(f64::INFINITY));
                cases += 1;
            }
        }
        outcome("path_consistency", cases, worst, 1e-10)
    }

    fn path_error(&self, eps: &Chunk, a: &Chunk, s: &GuidanceSchedule) -> Result<f64> {
        let mut state = DenoiseState::new(eps.clone(), guide(eps, a, s)?);
        let mut worst = scaled_error(&state.y, &legato_path(eps, a, s, 0.0)?);
        while state.k < s.n_steps() {
            let v = (self.target)(a, eps, s, state.t)?;
            state = guided_step(&state, &v, a, s)?;
            worst = worst.max(scaled_error(&state.y, &legato_path(eps, a, s, state.t)?));
        }
        Ok(worst.max(scaled_error(&state.y, a)))
    }

    /// Zero weights give the plain flow-matching path, target and sampler.
    fn fm_reduction(&self) -> CheckOutcome {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 1);
        let mut worst: f64 = 0.0;
        let cases = 200;
        for _ in 0..cases {
            let (h, dim, n) = (rng.random_range(1..=60), rng.random_range(1..=14), rng.random_range(1..=20));
            let eps = normal_chunk(&mut rng, h, dim, 1.0);
            let a = normal_chunk(&mut rng, h, dim, 2.0);
            let t: f64 = rng.random();
            let err = (|| -> Result<f64> {
                let zero = GuidanceSchedule::zeros(h, n)?;
                let diff = Chunk::from_array(a.as_array() - eps.as_array());
                let mut e = scaled_error(&legato_path(&eps, &a, &zero, t)?, &fm_path(&eps, &a, t)?);
                e = e.max(scaled_error(&(self.target)(&a, &eps, &zero, t)?, &diff));
                let (mut plain, mut state) = (eps.clone(), DenoiseState::new(eps.clone(), guide(&eps, &a, &zero)?));
                while state.k < n {
                    plain = euler_step(&plain, &diff, zero.delta_t())?;
                    state = guided_step(&state, &(self.target)(&a, &eps, &zero, state.t)?, &a, &zero)?;
                }
                Ok(e.max(scaled_error(&state.y, &plain)))
            })()
            .unwrap_or(f64::INFINITY);
            worst = worst.max(err);
        }
        outcome("fm_reduction", cases, worst, 1e-14)
    }

    /// Unit weights pin the path to the action chunk for every `t`.
    fn full_guidance(&self) -> CheckOutcome {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 2);
        let mut worst: f64 = 0.0;
        let cases = 200;
        for _ in 0..cases {
            let (h, dim) = (rng.random_range(1..=60), rng.random_range(1..=14));
            let eps = normal_chunk(&mut rng, h, dim, 1.0);
            let a = normal_chunk(&mut rng, h, dim, 2.0);
            let t: f64 = rng.random();
            let ones = GuidanceSchedule::from_omega(vec![1.0; h], 5).expect("valid");
            let err = legato_path(&eps, &a, &ones, t).map(|y| scaled_error(&y, &a)).unwrap_or(f64::INFINITY);
            worst = worst.max(err);
        }
        outcome("full_guidance", cases, worst, 1e-14)
    }

    /// Backprop against central differences on a network shaped like the
    /// default reach policy.
    fn gradients(&self) -> CheckOutcome {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 3);
        let sizes = TrainConfig::default().architecture(60, 2, 2).layer_sizes();
        let net = Mlp::new(&sizes, Activation::Tanh, &mut rng).expect("valid sizes");
        let indices: Vec<usize> = (0..50).map(|_| rng.random_range(0..net.param_count())).collect();
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let sample = GradSample {
                input: (0..net.input_dim()).map(|_| rng.sample(StandardNormal)).collect(),
                target: (0..net.output_dim()).map(|_| rng.sample(StandardNormal)).collect(),
            };
            worst = worst.max(grad_check(&net, &sample, 1e-5, &indices));
        }
        outcome("gradient_check", 10 * indices.len(), worst, 1e-4)
    }
}

fn outcome(name: &'static str, cases: usize, worst: f64, tolerance: f64) -> CheckOutcome {
    CheckOutcome { name, cases, worst, tolerance, passed: worst <= tolerance }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped(a: &Chunk, eps: &Chunk, s: &GuidanceSchedule, t: f64) -> Result<Chunk> {
        Ok(Chunk::from_array(-target_velocity(a, eps, s, t)?.into_array()))
    }

    fn small() -> OracleSuite {
        OracleSuite { cases_per_n: 5, ..OracleSuite::default() }
    }

    #[test]
    fn suite_passes() {
        for check in small().run() {
            assert!(check.passed, "{check:?}");
        }
    }

    #[test]
    fn sign_error_is_caught() {
        let report = OracleSuite { target: flipped, ..small() }.run();
        let path = report.iter().find(|c| c.name == "path_consistency").unwrap();
        assert!(!path.passed);
        assert!(path.worst > 1e-3);
    }
}
