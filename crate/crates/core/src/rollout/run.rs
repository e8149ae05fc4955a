use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionMode, BatchConfig, Collector, RolloutError, SceneSet, StageTimings};
use crate::navsim::{env_seed, spl, success_rate, EnvSnapshot, SimBatch, Task};
use crate::nn::{read_params, write_params, ParamGroup, ParamSet, Policy, PolicyConfig, RecurrentState, Tensor};
use crate::scene::{AssetStore, SceneId, StoreState};
use crate::train::{lr_schedule, scale_lr, train_iteration, OptimizerState, RolloutBuffer, TrainConfig};

const CHECKPOINT_VERSION: u32 = 1;
const TIMING_ALPHA: f64 = 0.1;

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub batch: BatchConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub total_frames: u64,
    /// Iterations between checkpoints; 0 writes one only at the end.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            batch: BatchConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            total_frames: 2_000_000,
            checkpoint_every: 50,
            seed: 0,
        }
    }
}

impl TrainSpec {
    /// Every violated constraint, including the cross-section ones.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.batch.problems();
        p.extend(self.policy.problems());
        p.extend(self.train.problems());
        if self.policy.resolution != self.batch.resolution {
            p.push(format!(
                "policy.resolution ({}) must equal batch.resolution ({})",
                self.policy.resolution, self.batch.resolution
            ));
        }
        if self.policy.in_channels != self.batch.channels() {
            p.push(format!(
                "policy.in_channels ({}) must be {} for the {:?} sensor",
                self.policy.in_channels,
                self.batch.channels(),
                self.batch.sensor
            ));
        }
        if self.policy.actions != crate::navsim::ACTION_COUNT {
            p.push(format!("policy.actions must be {}", crate::navsim::ACTION_COUNT));
        }
        if self.train.minibatches > 0 && !self.batch.envs.is_multiple_of(self.train.minibatches) {
            p.push(format!(
                "train.minibatches ({}) must divide batch.envs ({})",
                self.train.minibatches, self.batch.envs
            ));
        }
        if self.total_frames < self.batch.frames_per_rollout() {
            p.push(format!(
                "total_frames ({}) is smaller than one rollout ({} frames)",
                self.total_frames,
                self.batch.frames_per_rollout()
            ));
        }
        p
    }

    pub fn validate(&self) -> Result<(), RolloutError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(RolloutError::Config(p.join("; ")))
        }
    }

    /// Number of iterations needed to reach `total_frames`.
    pub fn iterations(&self) -> u64 {
        self.total_frames.div_ceil(self.batch.frames_per_rollout())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub frames: u64,
    pub fps: f64,
    pub timings: StageTimings,
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub mean_trust_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub episodes: usize,
    pub mean_reward: f64,
    /// Success and SPL of the episodes finished during the rollout.
    pub train_success: Option<f64>,
    pub train_spl: Option<f64>,
    pub eval_success: Option<f64>,
    pub eval_spl: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointState {
    version: u32,
    spec: TrainSpec,
    iteration: u64,
    frames: u64,
    optimizer_step: u64,
    rotation: usize,
    rng: ChaCha8Rng,
    starts: Vec<bool>,
    envs: Vec<EnvSnapshot>,
    store: StoreState,
    timings: StageTimings,
}

/// Alternates rollout collection and PPO updates over a rotating scene set.
pub struct Trainer {
    spec: TrainSpec,
    scenes: SceneSet,
    store: AssetStore,
    policy: Policy<f32>,
    opt: OptimizerState<f32>,
    collector: Collector,
    buf: RolloutBuffer,
    iteration: u64,
    frames: u64,
    rotation: usize,
    timings: StageTimings,
    last_sample: StageTimings,
}

fn window(ids: &[SceneId], start: usize, k: usize) -> Vec<SceneId> {
    let k = k.min(ids.len());
    (0..k).map(|j| ids[(start + j) % ids.len()]).collect()
}

impl Trainer {
    /// Fresh run: initial parameters from `spec.seed`, first K scenes loaded.
    pub fn new(spec: TrainSpec, scenes: SceneSet) -> Result<Self, RolloutError> {
        spec.validate()?;
        if scenes.ids.is_empty() {
            return Err(RolloutError::Config("no training scenes".into()));
        }
        let b = &spec.batch;
        let store = AssetStore::deterministic(b.scenes, b.share_cap, scenes.source.clone());
        store.rotate(&window(&scenes.ids, 0, b.scenes));
        store.sync();
        let sim = SimBatch::with_store(store.clone(), b.envs, spec.seed, b.task.clone(), b.sim_workers)
            .map_err(|source| RolloutError::Sim { step: 0, source })?;
        let policy = Policy::new(&spec.policy, spec.seed).map_err(|source| RolloutError::Policy { step: 0, source })?;
        let collector = Collector::new(
            sim,
            b,
            spec.policy.hidden,
            ActionMode::Sample,
            env_seed(spec.seed, usize::MAX),
        )?;
        let opt = OptimizerState::new(policy.params());
        let buf = RolloutBuffer::new(b.envs, b.rollout_len, spec.policy.obs_len(), spec.policy.hidden);
        Ok(Self {
            store,
            policy,
            opt,
            collector,
            buf,
            iteration: 0,
            frames: 0,
            rotation: 0,
            timings: StageTimings::default(),
            last_sample: StageTimings::default(),
            spec,
            scenes,
        })
    }

    pub fn spec(&self) -> &TrainSpec {
        &self.spec
    }

    pub fn policy(&self) -> &Policy<f32> {
        &self.policy
    }

    pub fn optimizer(&self) -> &OptimizerState<f32> {
        &self.opt
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn timings(&self) -> StageTimings {
        self.timings
    }

    /// Unaveraged per-frame timings of the most recent iteration.
    pub fn last_sample(&self) -> StageTimings {
        self.last_sample
    }

    pub fn collector(&self) -> &Collector {
        &self.collector
    }

    pub fn store(&self) -> &AssetStore {
        &self.store
    }

    pub fn finished(&self) -> bool {
        self.frames >= self.spec.total_frames
    }

    /// One collect-and-update iteration.
    pub fn step(&mut self) -> Result<MetricsRecord, RolloutError> {
        let wall = Instant::now();
        let b = &self.spec.batch;
        let t0 = Instant::now();
        self.rotation = (self.rotation + b.rotate_stride) % self.scenes.ids.len();
        self.store.rotate(&window(&self.scenes.ids, self.rotation, b.scenes));
        let rotate = t0.elapsed();

        let summary = self.collector.collect(&self.policy, &mut self.buf)?;

        let t1 = Instant::now();
        let batch_size = b.frames_per_rollout() as usize;
        let scaled = scale_lr(self.spec.train.base_lr, batch_size, self.spec.train.batch_base);
        let progress = self.frames as f64 / self.spec.total_frames as f64;
        let lr = lr_schedule(scaled, self.spec.train.base_lr, progress);
        let stats = train_iteration(&mut self.policy, &mut self.opt, &self.buf, &self.spec.train, lr)?;
        let learning = t1.elapsed();

        let t2 = Instant::now();
        self.store.sync();
        let sync = t2.elapsed();

        self.iteration += 1;
        self.frames += b.frames_per_rollout();
        let per_frame = |d: std::time::Duration| d.as_secs_f64() * 1e6 / batch_size as f64;
        let sample = StageTimings {
            sim_render_us: per_frame(summary.sim_render + rotate + sync),
            inference_us: per_frame(summary.inference),
            learning_us: per_frame(learning),
        };
        self.timings.update(&sample, TIMING_ALPHA, self.iteration == 1);
        self.last_sample = sample;
        let eps = &summary.episodes;
        let nav = b.task.task == Task::PointGoalNav && !eps.is_empty();
        Ok(MetricsRecord {
            iteration: self.iteration,
            frames: self.frames,
            fps: batch_size as f64 / wall.elapsed().as_secs_f64(),
            timings: self.timings,
            loss: stats.loss,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            grad_norm: stats.grad_norm,
            lr,
            mean_trust_ratio: stats.mean_trust_ratio,
            clip_fraction: stats.clip_fraction,
            approx_kl: stats.approx_kl,
            episodes: eps.len(),
            mean_reward: summary.reward_sum / b.envs as f64,
            train_success: nav.then(|| success_rate(eps)),
            train_spl: if nav { spl(eps).ok() } else { None },
            eval_success: None,
            eval_spl: None,
        })
    }

    /// Writes a checkpoint directory, replacing any previous one only after
    /// the new one is complete.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), RolloutError> {
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(RolloutError::io(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(RolloutError::io(&tmp))?;
        let write_set = |name: &str, set: &ParamSet<f32>| -> Result<(), RolloutError> {
            let path = tmp.join(name);
            let f = fs::File::create(&path).map_err(RolloutError::io(&path))?;
            let mut w = std::io::BufWriter::new(f);
            write_params(&mut w, set).map_err(|e| RolloutError::Checkpoint(e.to_string()))?;
            w.flush().map_err(RolloutError::io(&path))
        };
        write_set("params.bin", self.policy.params())?;
        write_set("adam_m.bin", &self.moment_set(&self.opt.m))?;
        write_set("adam_v.bin", &self.moment_set(&self.opt.v))?;
        let state = self.collector.state();
        let mut rec = ParamSet::default();
        rec.push("h", state.h.clone(), ParamGroup::Default);
        rec.push("c", state.c.clone(), ParamGroup::Default);
        write_set("recurrent.bin", &rec)?;
        let cp = CheckpointState {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            iteration: self.iteration,
            frames: self.frames,
            optimizer_step: self.opt.step,
            rotation: self.rotation,
            rng: self.collector.rng().clone(),
            starts: self.collector.starts().to_vec(),
            envs: self.collector.sim().snapshot(),
            store: self.store.export_state(),
            timings: self.timings,
        };
        let path = tmp.join("state.json");
        let json = serde_json::to_vec(&cp).map_err(|e| RolloutError::Checkpoint(e.to_string()))?;
        fs::write(&path, json).map_err(RolloutError::io(&path))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(RolloutError::io(dir))?;
        }
        fs::rename(&tmp, dir).map_err(RolloutError::io(dir))
    }

    fn moment_set(&self, moments: &[Tensor<f32>]) -> ParamSet<f32> {
        let mut set = ParamSet::default();
        for (p, m) in self.policy.params().iter().zip(moments) {
            set.push(p.name.clone(), m.clone(), p.group);
        }
        set
    }

    /// Rebuilds a run from a checkpoint written by [`Trainer::save_checkpoint`].
    /// `total_frames` and `checkpoint_every` may change; with them unchanged,
    /// continuing reproduces the uninterrupted run exactly.
    pub fn resume(spec: TrainSpec, scenes: SceneSet, dir: &Path) -> Result<Self, RolloutError> {
        spec.validate()?;
        let path = dir.join("state.json");
        let bytes = fs::read(&path).map_err(RolloutError::io(&path))?;
        let cp: CheckpointState =
            serde_json::from_slice(&bytes).map_err(|e| RolloutError::Checkpoint(e.to_string()))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(RolloutError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                cp.version
            )));
        }
        let mismatched: Vec<&str> = [
            ("batch", cp.spec.batch != spec.batch),
            ("policy", cp.spec.policy != spec.policy),
            ("train", cp.spec.train != spec.train),
            ("seed", cp.spec.seed != spec.seed),
        ]
        .into_iter()
        .filter_map(|(name, differs)| differs.then_some(name))
        .collect();
        if !mismatched.is_empty() {
            return Err(RolloutError::Checkpoint(format!(
                "checkpoint was written with a different {}",
                mismatched.join(", ")
            )));
        }
        if cp.frames > spec.total_frames {
            return Err(RolloutError::Checkpoint(format!(
                "checkpoint is at {} frames, past total_frames = {}",
                cp.frames, spec.total_frames
            )));
        }
        let read_set = |name: &str| -> Result<ParamSet<f32>, RolloutError> {
            let path = dir.join(name);
            let f = fs::File::open(&path).map_err(RolloutError::io(&path))?;
            read_params(std::io::BufReader::new(f)).map_err(|e| RolloutError::Checkpoint(format!("{name}: {e}")))
        };
        let b = &spec.batch;
        let mut policy =
            Policy::new(&spec.policy, spec.seed).map_err(|source| RolloutError::Policy { step: 0, source })?;
        policy
            .params_mut()
            .assign_from(&read_set("params.bin")?)
            .map_err(|e| RolloutError::Checkpoint(e.to_string()))?;
        let mut opt = OptimizerState::new(policy.params());
        for (name, target) in [("adam_m.bin", &mut opt.m), ("adam_v.bin", &mut opt.v)] {
            let set = read_set(name)?;
            if set.len() != target.len() {
                return Err(RolloutError::Checkpoint(format!("{name} holds {} tensors", set.len())));
            }
            for (t, p) in target.iter_mut().zip(set.iter()) {
                if t.shape() != p.tensor.shape() {
                    return Err(RolloutError::Checkpoint(format!(
                        "{name}: shape mismatch for {}",
                        p.name
                    )));
                }
                *t = p.tensor.clone();
            }
        }
        opt.step = cp.optimizer_step;
        let rec = read_set("recurrent.bin")?;
        if rec.len() != 2 {
            return Err(RolloutError::Checkpoint("recurrent.bin must hold h and c".into()));
        }
        let state = RecurrentState {
            h: rec.tensor(0).clone(),
            c: rec.tensor(1).clone(),
        };

        let store = AssetStore::deterministic(b.scenes, b.share_cap, scenes.source.clone());
        store.import_state(&cp.store)?;
        let sim = SimBatch::restore(&cp.envs, Some(store.clone()), &[], b.task.clone(), b.sim_workers)
            .map_err(|source| RolloutError::Sim { step: 0, source })?;
        let mut collector = Collector::new(sim, b, spec.policy.hidden, ActionMode::Sample, 0)?;
        collector.set_carry(state, cp.starts, cp.rng)?;
        let buf = RolloutBuffer::new(b.envs, b.rollout_len, spec.policy.obs_len(), spec.policy.hidden);
        Ok(Self {
            store,
            policy,
            opt,
            collector,
            buf,
            iteration: cp.iteration,
            frames: cp.frames,
            rotation: cp.rotation,
            timings: cp.timings,
            last_sample: StageTimings::default(),
            spec,
            scenes,
        })
    }
}

/// Outcome of [`train_run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub iterations: u64,
    pub frames: u64,
    pub last: Option<MetricsRecord>,
    pub checkpoint: Option<PathBuf>,
}

/// Runs (or, with `resume`, continues) training until `spec.total_frames`,
/// appending one metrics record per iteration to `out_dir/metrics.ndjson` and
/// checkpointing into `out_dir/checkpoint`. On a fault the last good
/// checkpoint is left in place.
pub fn train_run(
    spec: &TrainSpec,
    scenes: SceneSet,
    out_dir: Option<&Path>,
    resume: bool,
    mut on_iteration: impl FnMut(&MetricsRecord),
) -> Result<RunSummary, RolloutError> {
    let checkpoint = out_dir.map(|d| d.join("checkpoint"));
    let mut trainer = match (&checkpoint, resume) {
        (Some(cp), true) if cp.join("state.json").exists() => Trainer::resume(spec.clone(), scenes, cp)?,
        _ => Trainer::new(spec.clone(), scenes)?,
    };
    let mut metrics = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(RolloutError::io(d))?;
            let path = d.join("metrics.ndjson");
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(RolloutError::io(&path))?;
            Some((path, f))
        }
        None => None,
    };
    let mut last = None;
    while !trainer.finished() {
        let rec = trainer.step()?;
        if let Some((path, f)) = metrics.as_mut() {
            let mut line = serde_json::to_vec(&rec).map_err(|e| RolloutError::Checkpoint(e.to_string()))?;
            line.push(b'\n');
            f.write_all(&line).map_err(RolloutError::io(path))?;
        }
        on_iteration(&rec);
        let every = spec.checkpoint_every;
        if let Some(cp) = &checkpoint {
            if (every > 0 && trainer.iteration() % every == 0) || trainer.finished() {
                trainer.save_checkpoint(cp)?;
            }
        }
        last = Some(rec);
    }
    Ok(RunSummary {
        iterations: trainer.iteration(),
        frames: trainer.frames(),
        last,
        checkpoint,
    })
}

/// The policy stored in a checkpoint directory, with the run configuration
/// that produced it.
pub fn load_checkpoint_policy(dir: &Path) -> Result<(Policy<f32>, TrainSpec), RolloutError> {
    let path = dir.join("state.json");
    let bytes = fs::read(&path).map_err(RolloutError::io(&path))?;
    let cp: CheckpointState = serde_json::from_slice(&bytes).map_err(|e| RolloutError::Checkpoint(e.to_string()))?;
    let mut policy =
        Policy::new(&cp.spec.policy, cp.spec.seed).map_err(|source| RolloutError::Policy { step: 0, source })?;
    let path = dir.join("params.bin");
    let f = fs::File::open(&path).map_err(RolloutError::io(&path))?;
    let params = read_params(std::io::BufReader::new(f)).map_err(|e| RolloutError::Checkpoint(e.to_string()))?;
    policy
        .params_mut()
        .assign_from(&params)
        .map_err(|e| RolloutError::Checkpoint(e.to_string()))?;
    Ok((policy, cp.spec))
}
