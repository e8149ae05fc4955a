use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionMode, BatchConfig, Collector, RolloutError};
use crate::geom::{wrap_signed, xz};
use crate::navsim::{
    forward_landing, spl, success_rate, Action, EnvState, EpisodeSummary, SimBatch, Task, TaskConfig, ACTION_COUNT,
};
use crate::nn::Policy;
use crate::scene::SceneAsset;

/// Who picks the actions during evaluation.
#[derive(Clone, Copy)]
pub enum Agent<'a> {
    /// The policy's most likely action.
    Greedy(&'a Policy<f32>),
    /// Follows the geodesic to the goal and stops within reach of it.
    Oracle,
    /// Uniformly random actions from a seeded generator.
    Random(u64),
    /// Stops on the first step.
    Stop,
}

/// Evaluation episode list: `envs` environments over the held-out assets
/// (env `i` on asset `i % K`), each contributing its first
/// `ceil(episodes / envs)` episodes in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub envs: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Sensor, resolution and task used for policy agents.
    pub batch: BatchConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            envs: 16,
            episodes: 64,
            seed: 1_000_003,
            batch: BatchConfig {
                envs: 16,
                ..BatchConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub success: f64,
    pub spl: f64,
    /// Mean episode score (Flee: final distance from the start, Explore:
    /// cells visited).
    pub score: f64,
    pub mean_steps: f64,
}

/// Action that makes the most geodesic progress towards the goal: among the
/// headings reachable by turning, pick the one whose forward step lands
/// closest to the goal, and step forward when the current heading is within
/// a small margin of it. Stops once the goal is within `success_distance`.
pub fn oracle_action(env: &EnvState, task: &TaskConfig) -> Action {
    let mesh = env.navmesh();
    let Some(field) = env.field() else { return Action::Stop };
    let here = field.distance_from(mesh, env.position);
    if here <= task.success_distance {
        return Action::Stop;
    }
    let turn = task.turn_degrees.to_radians();
    let half = (std::f64::consts::PI / turn).floor() as i64;
    let gain = |k: i64| {
        let (p, _) = forward_landing(mesh, env.position, env.heading + k as f64 * turn, task.forward_step);
        here - field.distance_from(mesh, p)
    };
    let straight = gain(0);
    let (best_k, best) = (-half..=half)
        .map(|k| (k, gain(k)))
        .fold((0i64, straight), |acc, (k, g)| {
            if g > acc.1 + 1e-12 || (g >= acc.1 - 1e-12 && k.abs() < acc.0.abs()) {
                (k, g)
            } else {
                acc
            }
        });
    if best <= ORACLE_MIN_PROGRESS * task.forward_step {
        return detour(env, task, half);
    }
    if best_k == 0 || straight >= best - ORACLE_SLACK * task.forward_step {
        Action::Forward
    } else if best_k > 0 {
        Action::TurnLeft
    } else {
        Action::TurnRight
    }
}

/// Turns towards (or steps along) the unblocked heading closest to the next
/// path waypoint, for corners no single step can make progress around.
fn detour(env: &EnvState, task: &TaskConfig, half: i64) -> Action {
    let mesh = env.navmesh();
    let Some(path) = env.field().and_then(|f| f.path_from(mesh, env.position)) else {
        return Action::Stop;
    };
    let here = xz(env.position);
    let Some(next) = path.iter().map(|&p| xz(p)).find(|p| (*p - here).length() > 1e-6) else {
        return Action::Stop;
    };
    let d = next - here;
    let desired = (-d.x).atan2(-d.y);
    let turn = task.turn_degrees.to_radians();
    let pick = (-half..=half)
        .filter(|&k| {
            let (p, _) = forward_landing(mesh, env.position, env.heading + k as f64 * turn, task.forward_step);
            (p - env.position).length() > 0.5 * task.forward_step
        })
        .min_by(|&a, &b| {
            let off = |k: i64| wrap_signed(env.heading + k as f64 * turn - desired).abs();
            off(a).total_cmp(&off(b)).then(a.abs().cmp(&b.abs()))
        });
    match pick {
        None => Action::Stop,
        Some(0) => Action::Forward,
        Some(k) if k > 0 => Action::TurnLeft,
        Some(_) => Action::TurnRight,
    }
}

/// Fraction of a step of progress the oracle gives up to avoid turning.
const ORACLE_SLACK: f64 = 0.02;

/// Fraction of a step below which no heading counts as making progress.
const ORACLE_MIN_PROGRESS: f64 = 0.1;

fn summarize(episodes: &[EpisodeSummary], task: Task) -> Result<EvalReport, RolloutError> {
    let n = episodes.len().max(1) as f64;
    let (success, spl) = if task == Task::PointGoalNav {
        let s = spl(episodes).map_err(|source| RolloutError::Sim { step: 0, source })?;
        (success_rate(episodes), s)
    } else {
        (0.0, 0.0)
    };
    Ok(EvalReport {
        episodes: episodes.len(),
        success,
        spl,
        score: episodes.iter().map(|e| e.score).sum::<f64>() / n,
        mean_steps: episodes.iter().map(|e| f64::from(e.steps)).sum::<f64>() / n,
    })
}

/// Runs `agent` over the fixed episode list defined by `cfg` on `assets`.
pub fn evaluate(agent: Agent<'_>, assets: &[Arc<SceneAsset>], cfg: &EvalConfig) -> Result<EvalReport, RolloutError> {
    if cfg.envs == 0 || cfg.episodes == 0 {
        return Err(RolloutError::Config(
            "evaluation needs at least one env and one episode".into(),
        ));
    }
    let task = cfg.batch.task.clone();
    if matches!(agent, Agent::Oracle) && task.task != Task::PointGoalNav {
        return Err(RolloutError::Config("the oracle agent only solves PointGoalNav".into()));
    }
    let quota = cfg.episodes.div_ceil(cfg.envs);
    let sim = SimBatch::from_assets(assets, cfg.envs, cfg.seed, task.clone(), cfg.batch.sim_workers)
        .map_err(|source| RolloutError::Sim { step: 0, source })?;
    let mut done: Vec<Vec<EpisodeSummary>> = vec![Vec::new(); cfg.envs];
    let record = |results: &[crate::navsim::StepResult], done: &mut Vec<Vec<EpisodeSummary>>| {
        for (e, r) in results.iter().enumerate() {
            if let Some(ep) = r.episode {
                if done[e].len() < quota {
                    done[e].push(ep);
                }
            }
        }
    };
    let finished = |done: &Vec<Vec<EpisodeSummary>>| done.iter().all(|d| d.len() >= quota);

    match agent {
        Agent::Greedy(policy) => {
            let batch = BatchConfig {
                envs: cfg.envs,
                task: task.clone(),
                ..cfg.batch.clone()
            };
            let mut col = Collector::new(sim, &batch, policy.config().hidden, ActionMode::Greedy, cfg.seed)?;
            while !finished(&done) {
                col.step(policy)?;
                record(col.sim().results(), &mut done);
            }
        }
        _ => {
            let mut sim = sim;
            let mut rng = ChaCha8Rng::seed_from_u64(match agent {
                Agent::Random(s) => s,
                _ => 0,
            });
            let mut step = 0u64;
            while !finished(&done) {
                let actions: Vec<Action> = sim
                    .envs()
                    .iter()
                    .enumerate()
                    .map(|(e, env)| {
                        if done[e].len() >= quota {
                            return Action::TurnLeft;
                        }
                        match agent {
                            Agent::Oracle => oracle_action(env, &task),
                            Agent::Random(_) => Action::ALL[rng.gen_range(0..ACTION_COUNT)],
                            _ => Action::Stop,
                        }
                    })
                    .collect();
                let results = sim
                    .simulate_batch(&actions)
                    .map_err(|source| RolloutError::Sim { step, source })?;
                step += 1;
                record(results, &mut done);
            }
        }
    }
    let episodes: Vec<EpisodeSummary> = done.into_iter().flatten().take(cfg.episodes).collect();
    summarize(&episodes, task.task)
}
