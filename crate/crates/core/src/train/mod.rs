//! Large-batch PPO: advantage estimation, the clipped surrogate loss, the
//! Lamb optimizer and the learning-rate schedule.

mod lamb;
mod ppo;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{NnError, RecurrentState, Scalar};

pub use lamb::{apply_direction, clip_grad_norm, lamb_step, LambConfig, LambStats, OptimizerState, TrustStep};
pub use ppo::{ppo_loss, train_iteration, IterationStats, PpoBatch, PpoLoss};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training fault: {0}")]
    Fault(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// PPO and optimizer hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub ppo_clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    /// Learning rate at the base batch size (5e-4 for depth, 2.5e-4 for RGB).
    pub base_lr: f64,
    pub batch_base: usize,
    pub weight_decay: f64,
    pub lamb_rho: f64,
    pub phi_cap: f64,
    pub max_grad_norm: f64,
    pub value_loss_coef: f64,
    pub entropy_coef: f64,
    pub normalize_advantages: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Environments per forward/backward chunk inside a mini-batch; 0 means
    /// the whole mini-batch. Gradients are accumulated across chunks.
    pub chunk_envs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            ppo_clip: 0.2,
            epochs: 1,
            minibatches: 2,
            base_lr: 5e-4,
            batch_base: 256,
            weight_decay: 1e-2,
            lamb_rho: 1e-2,
            phi_cap: 10.0,
            max_grad_norm: 1.0,
            value_loss_coef: 0.5,
            entropy_coef: 0.01,
            normalize_advantages: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            chunk_envs: 8,
        }
    }
}

/// Base learning rate for RGB observations.
pub const RGB_BASE_LR: f64 = 2.5e-4;

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            p.push(format!("train.gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            p.push(format!("train.gae_lambda must lie in [0, 1], got {}", self.gae_lambda));
        }
        if !(self.ppo_clip > 0.0 && self.ppo_clip < 1.0) {
            p.push(format!("train.ppo_clip must lie in (0, 1), got {}", self.ppo_clip));
        }
        if self.epochs == 0 {
            p.push("train.epochs must be positive".into());
        }
        if self.minibatches == 0 {
            p.push("train.minibatches must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            p.push(format!("train.base_lr must be positive, got {}", self.base_lr));
        }
        if self.batch_base == 0 {
            p.push("train.batch_base must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            p.push("train.weight_decay must be non-negative".into());
        }
        if !(self.lamb_rho > 0.0 && self.lamb_rho <= 1.0) {
            p.push(format!("train.lamb_rho must lie in (0, 1], got {}", self.lamb_rho));
        }
        if !(self.phi_cap > 0.0) {
            p.push("train.phi_cap must be positive".into());
        }
        if !(self.max_grad_norm > 0.0) {
            p.push("train.max_grad_norm must be positive".into());
        }
        if !(self.value_loss_coef >= 0.0) || !(self.entropy_coef >= 0.0) {
            p.push("train.value_loss_coef and train.entropy_coef must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            p.push("train.adam_beta1 and train.adam_beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            p.push("train.adam_eps must be positive".into());
        }
        p
    }

    pub fn lamb(&self) -> LambConfig {
        LambConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            rho: self.lamb_rho,
            phi_cap: self.phi_cap,
        }
    }
}

/// `base_lr · √(B / B_base)`.
pub fn scale_lr(base_lr: f64, batch: usize, batch_base: usize) -> f64 {
    base_lr * (batch as f64 / batch_base as f64).sqrt()
}

/// Cosine decay from `scaled_lr` at `u = 0` to `base_lr` at `u = 0.5`,
/// constant afterwards.
pub fn lr_schedule(scaled_lr: f64, base_lr: f64, progress: f64) -> f64 {
    let x = (progress / 0.5).clamp(0.0, 1.0);
    let w = (1.0 + (std::f64::consts::PI * x).cos()) / 2.0;
    scaled_lr * w + base_lr * (1.0 - w)
}

/// Generalized advantage estimates for `envs` sequences of `steps`
/// transitions, stored env-major. `values` holds `steps + 1` entries per env
/// (the last one bootstraps). Returns `(advantages, returns)`.
pub fn gae<T: Scalar>(
    rewards: &[T],
    values: &[T],
    dones: &[bool],
    envs: usize,
    steps: usize,
    gamma: T,
    lambda: T,
) -> Result<(Vec<T>, Vec<T>), TrainError> {
    if rewards.len() != envs * steps || dones.len() != envs * steps || values.len() != envs * (steps + 1) {
        return Err(TrainError::Shape(format!(
            "gae needs {} rewards/dones and {} values, got {}/{}/{}",
            envs * steps,
            envs * (steps + 1),
            rewards.len(),
            dones.len(),
            values.len()
        )));
    }
    let mut adv = vec![T::zero(); envs * steps];
    let mut ret = vec![T::zero(); envs * steps];
    for e in 0..envs {
        let v = &values[e * (steps + 1)..(e + 1) * (steps + 1)];
        let mut next = T::zero();
        for t in (0..steps).rev() {
            let i = e * steps + t;
            let live = if dones[i] { T::zero() } else { T::one() };
            let delta = rewards[i] + gamma * v[t + 1] * live - v[t];
            next = delta + gamma * lambda * live * next;
            adv[i] = next;
            ret[i] = next + v[t];
        }
    }
    Ok((adv, ret))
}

/// `envs × steps` transitions stored env-major, plus what the recurrent
/// policy needs to replay them.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub envs: usize,
    pub steps: usize,
    /// Length of one flattened observation.
    pub obs_len: usize,
    pub obs: Vec<f32>,
    /// Three entries per transition.
    pub compass: Vec<f32>,
    /// True where the observation is the first of an episode.
    pub starts: Vec<bool>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f32>,
    /// `steps + 1` entries per env.
    pub values: Vec<f32>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    /// Recurrent state before the first step.
    pub initial: RecurrentState<f32>,
}

impl RolloutBuffer {
    pub fn new(envs: usize, steps: usize, obs_len: usize, hidden: usize) -> Self {
        let n = envs * steps;
        Self {
            envs,
            steps,
            obs_len,
            obs: vec![0.0; n * obs_len],
            compass: vec![0.0; n * 3],
            starts: vec![false; n],
            actions: vec![0; n],
            log_probs: vec![0.0; n],
            values: vec![0.0; envs * (steps + 1)],
            rewards: vec![0.0; n],
            dones: vec![false; n],
            initial: RecurrentState::zeros(envs, hidden),
        }
    }

    pub fn transitions(&self) -> usize {
        self.envs * self.steps
    }

    /// Flat index of transition `(env, step)`.
    pub fn index(&self, env: usize, step: usize) -> usize {
        env * self.steps + step
    }

    pub fn value_index(&self, env: usize, step: usize) -> usize {
        env * (self.steps + 1) + step
    }
}
