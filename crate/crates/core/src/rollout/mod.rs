//! The batch loop: simulate N environments, render their observations into
//! one megaframe, evaluate the policy on the whole batch and sample actions.
//!
//! [`Collector`] gathers rollouts of length L, [`Trainer`] alternates
//! collection with PPO updates and owns checkpointing, [`evaluate`] scores a
//! fixed episode list and [`fps_benchmark`] measures end-to-end throughput.

mod bench;
mod collect;
mod eval;
mod run;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bench::{fps_benchmark, FpsOptions, FpsReport};
pub use collect::{ActionMode, CallCounters, Collector, RolloutSummary};
pub use eval::{evaluate, oracle_action, Agent, EvalConfig, EvalReport};
pub use run::{load_checkpoint_policy, train_run, MetricsRecord, RunSummary, TrainSpec, Trainer};

use crate::navsim::{NavError, TaskConfig};
use crate::nn::NnError;
use crate::render::{RenderError, Sensor};
use crate::scene::{SceneError, SceneId, SceneSource, DEFAULT_SHARE_CAP};
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("step {step}: simulation fault: {source}")]
    Sim {
        step: u64,
        #[source]
        source: NavError,
    },
    #[error("step {step}: render fault: {source}")]
    Render {
        step: u64,
        #[source]
        source: RenderError,
    },
    #[error("step {step}: policy fault: {source}")]
    Policy {
        step: u64,
        #[source]
        source: NnError,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl RolloutError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| RolloutError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Shape of the environment batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    /// N
    pub envs: usize,
    /// K, the number of resident scene assets. A rotated-in scene is
    /// admitted once a resident is unreferenced, which needs
    /// `envs <= (scenes - 1) * share_cap`.
    pub scenes: usize,
    /// L
    pub rollout_len: usize,
    pub share_cap: usize,
    pub task: TaskConfig,
    pub sensor: Sensor,
    pub resolution: usize,
    /// Simulation worker threads.
    pub sim_workers: usize,
    /// Raster worker threads.
    pub render_workers: usize,
    /// Scenes the rotation window advances by after each iteration.
    pub rotate_stride: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            envs: 64,
            scenes: 4,
            rollout_len: 32,
            share_cap: DEFAULT_SHARE_CAP,
            task: TaskConfig::default(),
            sensor: Sensor::Depth,
            resolution: 64,
            sim_workers: 1,
            render_workers: 1,
            rotate_stride: 1,
        }
    }
}

impl BatchConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.envs == 0 {
            p.push("batch.envs must be positive".into());
        }
        if self.scenes == 0 {
            p.push("batch.scenes must be positive".into());
        }
        if self.rollout_len == 0 {
            p.push("batch.rollout_len must be at least 1".into());
        }
        if self.share_cap == 0 {
            p.push("batch.share_cap must be positive".into());
        }
        if self.scenes > 0 && self.envs > self.scenes * self.share_cap {
            p.push(format!(
                "batch.envs / batch.scenes = {}/{} exceeds the share cap of {}",
                self.envs, self.scenes, self.share_cap
            ));
        }
        if self.resolution == 0 || self.resolution > 1024 {
            p.push(format!(
                "batch.resolution must lie in 1..=1024, got {}",
                self.resolution
            ));
        }
        if self.sim_workers == 0 || self.render_workers == 0 {
            p.push("batch.sim_workers and batch.render_workers must be positive".into());
        }
        if self.task.forward_step <= 0.0 || self.task.turn_degrees <= 0.0 || self.task.max_steps == 0 {
            p.push("batch.task needs a positive forward_step, turn_degrees and max_steps".into());
        }
        if !(self.task.min_goal_geodesic <= self.task.max_goal_geodesic) {
            p.push("batch.task.min_goal_geodesic exceeds max_goal_geodesic".into());
        }
        p
    }

    pub fn channels(&self) -> usize {
        match self.sensor {
            Sensor::Depth => 1,
            Sensor::Rgb => 3,
        }
    }

    /// Transitions per rollout.
    pub fn frames_per_rollout(&self) -> u64 {
        (self.envs * self.rollout_len) as u64
    }
}

/// Scenes available to a run, in rotation order.
#[derive(Clone)]
pub struct SceneSet {
    pub source: Arc<dyn SceneSource>,
    pub ids: Vec<SceneId>,
}

impl std::fmt::Debug for SceneSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SceneSet").field("ids", &self.ids.len()).finish()
    }
}

/// Per-frame stage costs in microseconds, exponentially averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub sim_render_us: f64,
    pub inference_us: f64,
    pub learning_us: f64,
}

impl StageTimings {
    pub fn total_us(&self) -> f64 {
        self.sim_render_us + self.inference_us + self.learning_us
    }

    /// Blend in a new sample; the first sample is taken as is.
    pub fn update(&mut self, sample: &StageTimings, alpha: f64, first: bool) {
        if first {
            *self = *sample;
            return;
        }
        let mix = |old: f64, new: f64| (1.0 - alpha) * old + alpha * new;
        self.sim_render_us = mix(self.sim_render_us, sample.sim_render_us);
        self.inference_us = mix(self.inference_us, sample.inference_us);
        self.learning_us = mix(self.learning_us, sample.learning_us);
    }
}
