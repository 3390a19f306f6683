use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{masked_mse, Gradients, Mlp};
use super::{standard_normal_chunk, Activation, Architecture, Family, Normalizer, Policy};
use crate::error::{Error, Result};
use crate::flowmath::{legato_path, target_velocity};
use crate::schedule::{sample_schedule, GuidanceSchedule, ScheduleRanges};
use crate::tasks::Demonstration;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub family: Family,
    pub learning_rate: f64,
    /// Cosine decay from `learning_rate` down to `learning_rate * final_lr_fraction`.
    #[serde(default = "TrainConfig::default_final_lr_fraction")]
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub schedule: ScheduleRanges,
    pub n_steps: usize,
    pub condition_row: bool,
    pub hidden: Vec<usize>,
    #[serde(default = "TrainConfig::default_time_frequencies")]
    pub time_frequencies: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            family: Family::Legato,
            learning_rate: 1e-3,
            final_lr_fraction: Self::default_final_lr_fraction(),
            batch_size: 128,
            steps: 3000,
            seed: 0,
            schedule: ScheduleRanges::default(),
            n_steps: 5,
            condition_row: true,
            hidden: vec![256, 256],
            time_frequencies: Self::default_time_frequencies(),
            grad_clip: Some(1.0),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }
}

impl TrainConfig {
    fn default_final_lr_fraction() -> f64 {
        0.1
    }

    fn default_time_frequencies() -> usize {
        4
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate > 0.0),
            ("batch_size", self.batch_size > 0),
            ("n_steps", self.n_steps > 0),
            ("adam_eps", self.adam_eps > 0.0),
            ("final_lr_fraction", self.final_lr_fraction > 0.0),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, ok)| !ok) {
            return Err(Error::InvalidParams(format!("{name} must be positive")));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidParams("hidden widths must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::InvalidParams("grad_clip must be positive".into()));
            }
        }
        self.schedule.validate(horizon)
    }

    pub fn architecture(&self, horizon: usize, action_dim: usize, obs_dim: usize) -> Architecture {
        Architecture {
            horizon,
            action_dim,
            obs_dim,
            hidden: self.hidden.clone(),
            time_frequencies: self.time_frequencies,
            activation: Activation::Tanh,
        }
    }

    fn learning_rate_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.learning_rate;
        }
        let progress = step as f64 / (self.steps - 1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = Gradients {
            layers: net
                .layers()
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), ndarray::Array1::zeros(l.bias.len())))
                .collect(),
        };
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, net: &mut Mlp, grads: &Gradients, lr: f64) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in net
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            let params = layer.weight.iter_mut().chain(layer.bias.iter_mut());
            let g = gw.iter().chain(gb.iter());
            let m = mw.iter_mut().chain(mb.iter_mut());
            let v = vw.iter_mut().chain(vb.iter_mut());
            for (((p, &g), m), v) in params.zip(g).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Network inputs, regression targets and loss mask for one minibatch.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub mask: Array2<f64>,
}

/// Draws `t`, noise and a schedule for every demonstration and builds the
/// corresponding path sample and target in normalized coordinates.
///
/// Draw order per sample is fixed: `t`, then the noise chunk, then the schedule.
pub fn build_batch<R: Rng + ?Sized>(
    policy: &Policy,
    cfg: &TrainConfig,
    demos: &[&Demonstration],
    rng: &mut R,
) -> Result<TrainingBatch> {
    let arch = &policy.arch;
    let (h, dim) = (arch.horizon, arch.action_dim);
    let mut inputs = Array2::zeros((demos.len(), arch.input_dim()));
    let mut targets = Array2::zeros((demos.len(), arch.output_dim()));
    let mut mask = Array2::ones((demos.len(), arch.output_dim()));
    for (b, demo) in demos.iter().enumerate() {
        let a = policy.action_norm.normalize_chunk(&demo.chunk);
        let obs = policy.obs_norm.normalize(&demo.observation);
        let t: f64 = rng.random();
        let eps = standard_normal_chunk(h, dim, rng);
        let schedule = match cfg.family {
            Family::Vanilla => GuidanceSchedule::zeros(h, cfg.n_steps)?,
            Family::Legato => sample_schedule(rng, &cfg.schedule, h, cfg.n_steps)?.0,
            Family::RtcTrain => {
                let d = rng.random_range(cfg.schedule.d_range.0..=cfg.schedule.d_range.1);
                GuidanceSchedule::hard_prefix(h, d, cfg.n_steps)?
            }
        };
        let y = legato_path(&eps, &a, &schedule, t)?;
        let target = match cfg.family {
            Family::Legato => target_velocity(&a, &eps, &schedule, t)?,
            Family::Vanilla | Family::RtcTrain => {
                target_velocity(&a, &eps, &GuidanceSchedule::zeros(h, cfg.n_steps)?, t)?
            }
        };
        if cfg.family == Family::RtcTrain {
            let d = schedule.full_prefix_len();
            mask.row_mut(b).slice_mut(ndarray::s![..d * dim]).fill(0.0);
        }
        let row = policy.features(&y, &obs, t, &schedule)?;
        inputs.row_mut(b).assign(&ndarray::ArrayView1::from(&row));
        targets.row_mut(b).assign(&ndarray::ArrayView1::from(&target.to_vec()));
    }
    Ok(TrainingBatch { inputs, targets, mask })
}

/// Policy plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    policy: Policy,
    adam: Adam,
    cfg: TrainConfig,
    step: usize,
}

impl Trainer {
    /// Initializes the network from `cfg.seed` and fits normalizers on `demos`.
    pub fn new(cfg: TrainConfig, demos: &[Demonstration]) -> Result<Self> {
        let first = demos
            .first()
            .ok_or_else(|| Error::InvalidParams("training set is empty".into()))?;
        let (horizon, action_dim) = first.chunk.shape();
        let obs_dim = first.observation.len();
        cfg.validate(horizon)?;
        let arch = cfg.architecture(horizon, action_dim, obs_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = Mlp::new(&arch.layer_sizes(), arch.activation, &mut rng)?;
        let action_norm = Normalizer::fit(
            action_dim,
            demos.iter().flat_map(|d| d.chunk.as_array().rows().into_iter().map(|r| r.to_slice().expect("standard layout"))),
        );
        let obs_norm = Normalizer::fit(obs_dim, demos.iter().map(|d| d.observation.as_slice()));
        let policy = Policy::new(arch, net, action_norm, obs_norm, cfg.family, cfg.condition_row)?;
        Ok(Self::from_policy(policy, cfg))
    }

    pub fn from_policy(policy: Policy, cfg: TrainConfig) -> Self {
        let adam = Adam::new(&policy.net, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Self { policy, adam, cfg, step: 0 }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn into_policy(self) -> Policy {
        self.policy
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One optimizer update on `batch`; returns the batch-mean loss.
    pub fn training_step<R: Rng + ?Sized>(&mut self, batch: &[&Demonstration], rng: &mut R) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidParams("empty batch".into()));
        }
        let tb = build_batch(&self.policy, &self.cfg, batch, rng)?;
        let cache = self.policy.net.forward_cached(tb.inputs.view())?;
        let (loss, d_out) = masked_mse(cache.prediction(), &tb.targets, &tb.mask);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, loss });
        }
        let mut grads = self.policy.net.backward(&cache, &d_out);
        if let Some(clip) = self.cfg.grad_clip {
            let norm = grads.norm();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        let lr = self.cfg.learning_rate_at(self.step);
        self.adam.update(&mut self.policy.net, &grads, lr);
        self.step += 1;
        Ok(loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub losses: Vec<f64>,
}

/// Runs `cfg.steps` minibatch updates with batches drawn uniformly with
/// replacement. Bit-reproducible for a given config and dataset.
pub fn train(demos: &[Demonstration], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), demos)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut batch: Vec<&Demonstration> = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            batch.push(&demos[rng.random_range(0..demos.len())]);
        }
        losses.push(trainer.training_step(&batch, &mut rng)?);
    }
    Ok(TrainOutcome {
        policy: trainer.into_policy(),
        losses,
    })
}
