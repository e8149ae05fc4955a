use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use rayon::prelude::*;

use super::{reset_episode, task_step, Action, EnvSnapshot, EnvState, NavError, StepResult, TaskConfig};
use crate::scene::{AssetHandle, AssetStore, SceneAsset};

/// Cumulative call counters for the batched simulator.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimCounters {
    pub batches: u64,
    pub env_steps: u64,
    pub resets: u64,
    pub asset_swaps: u64,
    /// Writes per result slot during the most recent batch.
    pub last_slot_writes: Vec<u32>,
}

/// N environments stepped together, one result slot per environment.
pub struct SimBatch {
    envs: Vec<EnvState>,
    results: Vec<StepResult>,
    task: TaskConfig,
    handles: Vec<Option<AssetHandle>>,
    store: Option<AssetStore>,
    pool: rayon::ThreadPool,
    workers: usize,
    counters: SimCounters,
}

/// Per-environment seed derived from the batch seed.
pub fn env_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool, NavError> {
    if workers == 0 {
        return Err(NavError::InvalidInput("worker count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .thread_name(|i| format!("sim-worker-{i}"))
        .build()
        .map_err(|e| NavError::InvalidInput(format!("cannot build worker pool: {e}")))
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".into()
    }
}

impl SimBatch {
    /// `n` environments over a fixed asset list, env `i` using asset `i % K`.
    pub fn from_assets(
        assets: &[Arc<SceneAsset>],
        n: usize,
        seed: u64,
        task: TaskConfig,
        workers: usize,
    ) -> Result<Self, NavError> {
        if assets.is_empty() || n == 0 {
            return Err(NavError::InvalidInput(
                "need at least one asset and one environment".into(),
            ));
        }
        let envs = (0..n)
            .map(|i| EnvState::new(Arc::clone(&assets[i % assets.len()]), env_seed(seed, i)))
            .collect();
        Self::assemble(envs, (0..n).map(|_| None).collect(), None, task, workers)
    }

    /// `n` environments whose assets come from (and rotate through) `store`.
    pub fn with_store(
        store: AssetStore,
        n: usize,
        seed: u64,
        task: TaskConfig,
        workers: usize,
    ) -> Result<Self, NavError> {
        if n == 0 {
            return Err(NavError::InvalidInput("need at least one environment".into()));
        }
        let mut envs = Vec::with_capacity(n);
        let mut handles = Vec::with_capacity(n);
        for i in 0..n {
            let h = store.acquire_next().map_err(|e| NavError::Env {
                index: i,
                message: e.to_string(),
            })?;
            envs.push(EnvState::new(Arc::clone(h.asset()), env_seed(seed, i)));
            handles.push(Some(h));
        }
        Self::assemble(envs, handles, Some(store), task, workers)
    }

    /// Rebuild a batch from environment snapshots.
    pub fn restore(
        snapshots: &[EnvSnapshot],
        store: Option<AssetStore>,
        assets: &[Arc<SceneAsset>],
        task: TaskConfig,
        workers: usize,
    ) -> Result<Self, NavError> {
        let mut envs = Vec::with_capacity(snapshots.len());
        let mut handles = Vec::with_capacity(snapshots.len());
        for (i, s) in snapshots.iter().enumerate() {
            let (asset, handle) = match &store {
                Some(st) => {
                    let h = st.acquire(s.scene).map_err(|e| NavError::Env {
                        index: i,
                        message: e.to_string(),
                    })?;
                    (Arc::clone(h.asset()), Some(h))
                }
                None => {
                    let a = assets.iter().find(|a| a.id() == s.scene).ok_or_else(|| NavError::Env {
                        index: i,
                        message: format!("scene {} not available", s.scene),
                    })?;
                    (Arc::clone(a), None)
                }
            };
            envs.push(EnvState::restore(s, asset, &task)?);
            handles.push(handle);
        }
        let mut batch = Self::assemble_raw(envs, handles, store, task, workers)?;
        batch.refresh_observations();
        Ok(batch)
    }

    fn assemble_raw(
        envs: Vec<EnvState>,
        handles: Vec<Option<AssetHandle>>,
        store: Option<AssetStore>,
        task: TaskConfig,
        workers: usize,
    ) -> Result<Self, NavError> {
        let n = envs.len();
        Ok(Self {
            envs,
            results: vec![StepResult::default(); n],
            task,
            handles,
            store,
            pool: build_pool(workers)?,
            workers,
            counters: SimCounters::default(),
        })
    }

    fn assemble(
        envs: Vec<EnvState>,
        handles: Vec<Option<AssetHandle>>,
        store: Option<AssetStore>,
        task: TaskConfig,
        workers: usize,
    ) -> Result<Self, NavError> {
        let mut batch = Self::assemble_raw(envs, handles, store, task, workers)?;
        let mask = vec![true; batch.envs.len()];
        batch.reset_masked(&mask)?;
        batch.refresh_observations();
        Ok(batch)
    }

    fn refresh_observations(&mut self) {
        for (env, slot) in self.envs.iter().zip(self.results.iter_mut()) {
            slot.position = env.position;
            slot.heading = env.heading;
            slot.compass = env.compass();
        }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn envs(&self) -> &[EnvState] {
        &self.envs
    }

    pub fn results(&self) -> &[StepResult] {
        &self.results
    }

    pub fn task(&self) -> &TaskConfig {
        &self.task
    }

    pub fn store(&self) -> Option<&AssetStore> {
        self.store.as_ref()
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn set_workers(&mut self, workers: usize) -> Result<(), NavError> {
        self.pool = build_pool(workers)?;
        self.workers = workers;
        Ok(())
    }

    pub fn counters(&self) -> &SimCounters {
        &self.counters
    }

    pub fn snapshot(&self) -> Vec<EnvSnapshot> {
        self.envs.iter().map(EnvState::snapshot).collect()
    }

    fn reset_masked(&mut self, mask: &[bool]) -> Result<(), NavError> {
        let task = &self.task;
        let envs = &mut self.envs;
        let outcomes: Vec<Result<(), NavError>> = self.pool.install(|| {
            envs.par_iter_mut()
                .zip(mask.par_iter())
                .enumerate()
                .map(|(i, (env, &m))| {
                    if !m {
                        return Ok(());
                    }
                    match catch_unwind(AssertUnwindSafe(|| reset_episode(env, task))) {
                        Ok(Ok(())) => Ok(()),
                        Ok(Err(e)) => Err(NavError::Env {
                            index: i,
                            message: e.to_string(),
                        }),
                        Err(p) => Err(NavError::Env {
                            index: i,
                            message: panic_message(p),
                        }),
                    }
                })
                .collect()
        });
        self.counters.resets += mask.iter().filter(|&&m| m).count() as u64;
        outcomes.into_iter().collect()
    }

    /// Advance every environment by one action. Finished episodes are reset
    /// immediately (after swapping in the store's next asset), so each slot
    /// holds the step's reward/done plus the observation for the next step.
    pub fn simulate_batch(&mut self, actions: &[Action]) -> Result<&[StepResult], NavError> {
        let n = self.envs.len();
        if actions.len() != n {
            return Err(NavError::InvalidInput(format!(
                "expected {n} actions, got {}",
                actions.len()
            )));
        }
        let task = &self.task;
        let envs = &mut self.envs;
        let results = &mut self.results;
        let mut writes = vec![0u32; n];
        let outcomes: Vec<Result<(), NavError>> = self.pool.install(|| {
            envs.par_iter_mut()
                .zip(results.par_iter_mut())
                .zip(writes.par_iter_mut())
                .zip(actions.par_iter())
                .enumerate()
                .map(
                    |(i, (((env, slot), w), &a))| match catch_unwind(AssertUnwindSafe(|| task_step(env, a, task))) {
                        Ok(Ok(r)) => {
                            *slot = r;
                            *w += 1;
                            Ok(())
                        }
                        Ok(Err(e)) => Err(NavError::Env {
                            index: i,
                            message: e.to_string(),
                        }),
                        Err(p) => Err(NavError::Env {
                            index: i,
                            message: panic_message(p),
                        }),
                    },
                )
                .collect()
        });
        self.counters.last_slot_writes = writes;
        outcomes.into_iter().collect::<Result<(), _>>()?;
        self.counters.batches += 1;
        self.counters.env_steps += n as u64;

        let mask: Vec<bool> = self.results.iter().map(|r| r.done).collect();
        if let Some(store) = &self.store {
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                self.handles[i] = None;
                let h = store.acquire_next().map_err(|e| NavError::Env {
                    index: i,
                    message: e.to_string(),
                })?;
                if h.id() != self.envs[i].scene_id() {
                    self.counters.asset_swaps += 1;
                }
                self.envs[i].set_asset(Arc::clone(h.asset()));
                self.handles[i] = Some(h);
            }
        }
        if mask.iter().any(|&m| m) {
            self.reset_masked(&mask)?;
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                let env = &self.envs[i];
                let slot = &mut self.results[i];
                slot.position = env.position;
                slot.heading = env.heading;
                slot.compass = env.compass();
            }
        }
        Ok(&self.results)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GeneratorSpec};

    fn assets() -> Vec<Arc<SceneAsset>> {
        let spec = GeneratorSpec {
            cells_x: 3,
            cells_z: 3,
            ..GeneratorSpec::default()
        };
        (0..2).map(|s| Arc::new(generate_scene(s, &spec).unwrap())).collect()
    }

    #[test]
    fn slots_written_once() {
        let mut b = SimBatch::from_assets(&assets(), 64, 1, TaskConfig::default(), 4).unwrap();
        b.simulate_batch(&[Action::Forward; 64]).unwrap();
        assert_eq!(b.counters().last_slot_writes, vec![1; 64]);
    }

    #[test]
    fn turning_keeps_positions() {
        let mut b = SimBatch::from_assets(&assets(), 16, 3, TaskConfig::default(), 2).unwrap();
        let before: Vec<_> = b.envs().iter().map(|e| (e.position, e.heading)).collect();
        b.simulate_batch(&[Action::TurnLeft; 16]).unwrap();
        for (e, (p, h)) in b.envs().iter().zip(before) {
            assert_eq!(e.position, p);
            let d = crate::geom::wrap_signed(e.heading - h);
            assert!((d - 10f64.to_radians()).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_action_count_rejected() {
        let mut b = SimBatch::from_assets(&assets(), 4, 0, TaskConfig::default(), 1).unwrap();
        assert!(b.simulate_batch(&[Action::Stop; 3]).is_err());
    }
}
