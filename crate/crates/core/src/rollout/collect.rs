use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BatchConfig, RolloutError};
use crate::navsim::{Action, EpisodeSummary, SimBatch};
use crate::nn::{
    argmax_rows, encode_compass, log_softmax_rows, Policy, PolicyOutput, RecurrentState, Tensor, COMPASS_WIDTH,
};
use crate::render::{render_batch_into, CameraView, Megaframe, RenderConfig, Sensor, DEFAULT_EYE_HEIGHT};
use crate::scene::{AssetResolver, SceneAsset, SceneId};
use crate::train::RolloutBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    /// Sample from the policy's categorical distribution.
    Sample,
    /// Take the most likely action.
    Greedy,
}

/// Whole-batch calls made into each component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounters {
    pub sim_calls: u64,
    pub render_calls: u64,
    pub inference_calls: u64,
}

/// What one call to [`Collector::collect`] observed.
#[derive(Debug, Clone, Default)]
pub struct RolloutSummary {
    pub episodes: Vec<EpisodeSummary>,
    pub reward_sum: f64,
    pub sim_render: Duration,
    pub inference: Duration,
}

enum Assets {
    Store,
    Fixed(HashMap<SceneId, Arc<SceneAsset>>),
}

/// Drives a [`SimBatch`] through the renderer and a policy, keeping the
/// current observations and recurrent state between rollouts.
pub struct Collector {
    sim: SimBatch,
    assets: Assets,
    render: RenderConfig,
    frame: Megaframe,
    views: Vec<CameraView>,
    obs: Tensor<f32>,
    compass: Tensor<f32>,
    state: RecurrentState<f32>,
    starts: Vec<bool>,
    rng: ChaCha8Rng,
    mode: ActionMode,
    counters: CallCounters,
    steps: u64,
}

impl Collector {
    /// Wraps `sim` and renders its first observations. Without a store the
    /// renderer resolves scenes from the assets the environments hold.
    pub fn new(
        sim: SimBatch,
        batch: &BatchConfig,
        hidden: usize,
        mode: ActionMode,
        seed: u64,
    ) -> Result<Self, RolloutError> {
        let render = RenderConfig {
            tile_width: batch.resolution,
            tile_height: batch.resolution,
            sensor: batch.sensor,
            workers: batch.render_workers,
            ..RenderConfig::default()
        };
        render.validate().map_err(|e| RolloutError::Config(e.to_string()))?;
        let n = sim.len();
        let assets = if sim.store().is_some() {
            Assets::Store
        } else {
            Assets::Fixed(
                sim.envs()
                    .iter()
                    .map(|e| (e.scene_id(), Arc::clone(e.asset())))
                    .collect(),
            )
        };
        let channels = batch.channels();
        let mut c = Self {
            frame: Megaframe::new(n, batch.resolution, batch.resolution, batch.sensor == Sensor::Rgb, 0.0),
            views: Vec::with_capacity(n),
            obs: Tensor::zeros(&[n, channels, batch.resolution, batch.resolution]),
            compass: Tensor::zeros(&[n, COMPASS_WIDTH]),
            state: RecurrentState::zeros(n, hidden),
            starts: vec![true; n],
            rng: ChaCha8Rng::seed_from_u64(seed),
            sim,
            assets,
            render,
            mode,
            counters: CallCounters::default(),
            steps: 0,
        };
        c.observe()?;
        Ok(c)
    }

    pub fn sim(&self) -> &SimBatch {
        &self.sim
    }

    pub fn len(&self) -> usize {
        self.sim.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sim.is_empty()
    }

    pub fn counters(&self) -> CallCounters {
        self.counters
    }

    pub fn observations(&self) -> &Tensor<f32> {
        &self.obs
    }

    pub fn compass(&self) -> &Tensor<f32> {
        &self.compass
    }

    pub fn state(&self) -> &RecurrentState<f32> {
        &self.state
    }

    pub fn starts(&self) -> &[bool] {
        &self.starts
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn megaframe(&self) -> &Megaframe {
        &self.frame
    }

    /// Batch steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Replaces the recurrent state, episode-start flags and action RNG.
    pub fn set_carry(
        &mut self,
        state: RecurrentState<f32>,
        starts: Vec<bool>,
        rng: ChaCha8Rng,
    ) -> Result<(), RolloutError> {
        if state.len() != self.len() || starts.len() != self.len() || state.h.shape() != self.state.h.shape() {
            return Err(RolloutError::Checkpoint(
                "carried state does not match the batch".into(),
            ));
        }
        self.state = state;
        self.starts = starts;
        self.rng = rng;
        Ok(())
    }

    /// Renders the current poses and refreshes the observation tensors.
    fn observe(&mut self) -> Result<(), RolloutError> {
        self.views.clear();
        self.views.extend(
            self.sim
                .envs()
                .iter()
                .map(|e| CameraView::for_agent(e.scene_id(), e.position, e.heading, DEFAULT_EYE_HEIGHT)),
        );
        let resolver: &dyn AssetResolver = match &self.assets {
            Assets::Store => self.sim.store().expect("store-backed batch"),
            Assets::Fixed(map) => map,
        };
        render_batch_into(&self.views, resolver, &self.render, &mut self.frame).map_err(|source| {
            RolloutError::Render {
                step: self.steps,
                source,
            }
        })?;
        self.counters.render_calls += 1;
        let per = self.obs.len() / self.len();
        let obs = self.obs.data_mut();
        for i in 0..self.frame.tiles {
            let out = &mut obs[i * per..(i + 1) * per];
            match self.render.sensor {
                Sensor::Depth => self.frame.write_depth_observation(i, out),
                Sensor::Rgb => self.frame.write_rgb_observation(i, out),
            }
        }
        let compass = self.compass.data_mut();
        for (i, env) in self.sim.envs().iter().enumerate() {
            let (d, b) = env.compass();
            for (k, v) in encode_compass(d, b).into_iter().enumerate() {
                compass[i * COMPASS_WIDTH + k] = v as f32;
            }
        }
        Ok(())
    }

    /// Evaluates the policy on the current observations.
    pub fn infer(&mut self, policy: &Policy<f32>) -> Result<PolicyOutput<f32>, RolloutError> {
        self.counters.inference_calls += 1;
        policy
            .forward(&self.obs, &self.compass, &self.state, &self.starts)
            .map_err(|source| RolloutError::Policy {
                step: self.steps,
                source,
            })
    }

    /// Picks one action per environment from `logits` `[N, A]`.
    pub fn choose(&mut self, logits: &Tensor<f32>) -> Vec<usize> {
        match self.mode {
            ActionMode::Greedy => argmax_rows(logits),
            ActionMode::Sample => {
                let a = logits.shape()[1];
                log_softmax_rows(logits.data(), a)
                    .chunks(a)
                    .map(|row| {
                        let w: Vec<f64> = row.iter().map(|&l| f64::from(l).exp()).collect();
                        WeightedIndex::new(&w).map(|d| d.sample(&mut self.rng)).unwrap_or(0)
                    })
                    .collect()
            }
        }
    }

    /// Steps every environment and renders the next observations. The
    /// recurrent state is not touched.
    pub fn advance(&mut self, actions: &[usize]) -> Result<(), RolloutError> {
        let acts: Vec<Action> = actions
            .iter()
            .map(|&a| Action::from_index(a).unwrap_or(Action::Stop))
            .collect();
        self.counters.sim_calls += 1;
        let step = self.steps;
        let results = self
            .sim
            .simulate_batch(&acts)
            .map_err(|source| RolloutError::Sim { step, source })?;
        for (s, r) in self.starts.iter_mut().zip(results) {
            *s = r.done;
        }
        self.steps += 1;
        self.observe()
    }

    /// One policy step: infer, choose, carry the recurrent state and advance.
    /// Returns the actions taken and the simulator's results.
    pub fn step(&mut self, policy: &Policy<f32>) -> Result<Vec<usize>, RolloutError> {
        let out = self.infer(policy)?;
        let actions = self.choose(&out.logits);
        self.state = out.state;
        self.advance(&actions)?;
        Ok(actions)
    }

    /// Collects `buf.steps` transitions per environment into `buf` and fills
    /// the bootstrap values.
    pub fn collect(&mut self, policy: &Policy<f32>, buf: &mut RolloutBuffer) -> Result<RolloutSummary, RolloutError> {
        let n = self.len();
        let per = self.obs.len() / n;
        if buf.envs != n || buf.obs_len != per {
            return Err(RolloutError::Config(format!(
                "rollout buffer holds {} envs of {} values, the batch has {n} of {per}",
                buf.envs, buf.obs_len
            )));
        }
        let actions_n = policy.config().actions;
        let mut summary = RolloutSummary::default();
        buf.initial = self.state.clone();
        for t in 0..buf.steps {
            let t0 = Instant::now();
            let out = self.infer(policy)?;
            let actions = self.choose(&out.logits);
            let logp = log_softmax_rows(out.logits.data(), actions_n);
            let obs = self.obs.data();
            let compass = self.compass.data();
            for e in 0..n {
                let i = buf.index(e, t);
                buf.obs[i * per..(i + 1) * per].copy_from_slice(&obs[e * per..(e + 1) * per]);
                buf.compass[i * COMPASS_WIDTH..(i + 1) * COMPASS_WIDTH]
                    .copy_from_slice(&compass[e * COMPASS_WIDTH..(e + 1) * COMPASS_WIDTH]);
                buf.starts[i] = self.starts[e];
                buf.actions[i] = actions[e];
                buf.log_probs[i] = logp[e * actions_n + actions[e]];
                let vi = buf.value_index(e, t);
                buf.values[vi] = out.value[e];
            }
            self.state = out.state;
            let t1 = Instant::now();
            summary.inference += t1 - t0;

            self.advance(&actions)?;
            for (e, r) in self.sim.results().iter().enumerate() {
                let i = buf.index(e, t);
                buf.rewards[i] = r.reward as f32;
                buf.dones[i] = r.done;
                summary.reward_sum += r.reward;
                if let Some(ep) = r.episode {
                    summary.episodes.push(ep);
                }
            }
            summary.sim_render += t1.elapsed();
        }
        let t0 = Instant::now();
        let out = self.infer(policy)?;
        for e in 0..n {
            let vi = buf.value_index(e, buf.steps);
            buf.values[vi] = out.value[e];
        }
        summary.inference += t0.elapsed();
        Ok(summary)
    }
}
