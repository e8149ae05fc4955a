//! Batch navigation simulator: agent kinematics on the navmesh, task logic
//! (PointGoalNav, Flee, Explore), rewards, episode metrics and the batched
//! step over N environments on a worker pool.

mod batch;
pub mod geodesic;

use std::collections::BTreeSet;
use std::sync::Arc;

use glam::DVec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{env_seed, SimBatch, SimCounters};
pub use geodesic::{geodesic_distance, shortest_path, DistanceField};

use crate::geom::{heading_dir, heading_right, wrap_angle, xz};
use crate::scene::{NavMesh, SceneAsset, SceneId};

#[derive(Debug, thiserror::Error)]
pub enum NavError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("could not sample an episode after {attempts} attempts")]
    EpisodeSampling { attempts: u32 },
    #[error("environment {index} failed: {message}")]
    Env { index: usize, message: String },
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

pub const ACTION_COUNT: usize = 4;

impl Action {
    pub const ALL: [Action; ACTION_COUNT] = [Action::Forward, Action::TurnLeft, Action::TurnRight, Action::Stop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    PointGoalNav,
    Flee,
    Explore,
}

/// Task, action and episode-sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub task: Task,
    pub forward_step: f64,
    pub turn_degrees: f64,
    pub success_distance: f64,
    pub slack_reward: f64,
    pub success_reward: f64,
    pub max_steps: u32,
    pub min_goal_geodesic: f64,
    pub max_goal_geodesic: f64,
    pub explore_cell: f64,
    pub explore_reward: f64,
    pub sampling_attempts: u32,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            task: Task::PointGoalNav,
            forward_step: 0.25,
            turn_degrees: 10.0,
            success_distance: 0.2,
            slack_reward: 0.01,
            success_reward: 2.5,
            max_steps: 500,
            min_goal_geodesic: 1.0,
            max_goal_geodesic: 30.0,
            explore_cell: 0.5,
            explore_reward: 0.1,
            sampling_attempts: 100,
        }
    }
}

/// Outcome of one finished episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub success: bool,
    /// Geodesic start-to-goal distance at reset.
    pub shortest_path: f64,
    pub path_length: f64,
    /// Flee: final geodesic distance from start; Explore: cells visited.
    pub score: f64,
    pub steps: u32,
}

/// Per-environment result slot of a batched step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepResult {
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    pub collision: bool,
    /// Pose observed after the step (after the automatic reset when `done`).
    pub position: DVec3,
    pub heading: f64,
    /// Euclidean distance to the goal and its bearing in the agent frame
    /// (radians, positive to the left).
    pub compass: (f64, f64),
    pub episode: Option<EpisodeSummary>,
}

/// One environment: agent pose, goal, episode counters and its own RNG.
#[derive(Debug, Clone)]
pub struct EnvState {
    asset: Arc<SceneAsset>,
    pub position: DVec3,
    pub heading: f64,
    pub start: DVec3,
    pub goal: DVec3,
    pub step_count: u32,
    pub path_length: f64,
    pub start_geodesic: f64,
    pub prev_geodesic: f64,
    pub visited: BTreeSet<(u32, i64, i64)>,
    pub done: bool,
    pub episode: u64,
    rng: ChaCha8Rng,
    field: Option<Arc<DistanceField>>,
}

/// Serializable form of an [`EnvState`]; the asset is referenced by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub scene: SceneId,
    pub position: DVec3,
    pub heading: f64,
    pub start: DVec3,
    pub goal: DVec3,
    pub step_count: u32,
    pub path_length: f64,
    pub start_geodesic: f64,
    pub prev_geodesic: f64,
    pub visited: Vec<(u32, i64, i64)>,
    pub done: bool,
    pub episode: u64,
    pub rng: ChaCha8Rng,
}

impl EnvState {
    /// A fresh environment bound to `asset`; call [`reset_episode`] before stepping.
    pub fn new(asset: Arc<SceneAsset>, seed: u64) -> Self {
        let start = asset.navmesh().vertices()[0];
        Self {
            asset,
            position: start,
            heading: 0.0,
            start,
            goal: start,
            step_count: 0,
            path_length: 0.0,
            start_geodesic: 0.0,
            prev_geodesic: 0.0,
            visited: BTreeSet::new(),
            done: true,
            episode: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            field: None,
        }
    }

    pub fn asset(&self) -> &Arc<SceneAsset> {
        &self.asset
    }

    pub fn scene_id(&self) -> SceneId {
        self.asset.id()
    }

    pub(crate) fn set_asset(&mut self, asset: Arc<SceneAsset>) {
        self.asset = asset;
    }

    pub fn navmesh(&self) -> &NavMesh {
        self.asset.navmesh()
    }

    /// Distance field of the current episode (to the goal, or to the start
    /// for Flee).
    pub fn field(&self) -> Option<&DistanceField> {
        self.field.as_deref()
    }

    pub fn compass(&self) -> (f64, f64) {
        let to_goal = self.goal - self.position;
        let dist = xz(to_goal).length();
        let f = heading_dir(self.heading);
        let r = heading_right(self.heading);
        let bearing = (-to_goal.dot(r)).atan2(to_goal.dot(f));
        (dist, if dist == 0.0 { 0.0 } else { bearing })
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            scene: self.scene_id(),
            position: self.position,
            heading: self.heading,
            start: self.start,
            goal: self.goal,
            step_count: self.step_count,
            path_length: self.path_length,
            start_geodesic: self.start_geodesic,
            prev_geodesic: self.prev_geodesic,
            visited: self.visited.iter().copied().collect(),
            done: self.done,
            episode: self.episode,
            rng: self.rng.clone(),
        }
    }

    pub fn restore(s: &EnvSnapshot, asset: Arc<SceneAsset>, task: &TaskConfig) -> Result<Self, NavError> {
        if asset.id() != s.scene {
            return Err(NavError::InvalidInput("snapshot scene differs from asset".into()));
        }
        let field = if s.done {
            None
        } else {
            let target = match task.task {
                Task::PointGoalNav => s.goal,
                Task::Flee | Task::Explore => s.start,
            };
            Some(Arc::new(DistanceField::new(asset.navmesh(), target)))
        };
        Ok(Self {
            asset,
            position: s.position,
            heading: s.heading,
            start: s.start,
            goal: s.goal,
            step_count: s.step_count,
            path_length: s.path_length,
            start_geodesic: s.start_geodesic,
            prev_geodesic: s.prev_geodesic,
            visited: s.visited.iter().copied().collect(),
            done: s.done,
            episode: s.episode,
            rng: s.rng.clone(),
            field,
        })
    }
}

/// Closest point on the navmesh.
pub fn snap_to_navmesh(mesh: &NavMesh, p: DVec3) -> DVec3 {
    mesh.closest_point(p).0
}

fn explore_cell(mesh: &NavMesh, p: DVec3, cell: f64) -> (u32, i64, i64) {
    let tri = mesh.locate(xz(p)).unwrap_or_else(|| mesh.closest_point(p).1);
    (tri as u32, (p.x / cell).floor() as i64, (p.z / cell).floor() as i64)
}

fn sample_on(mesh: &NavMesh, rng: &mut ChaCha8Rng) -> DVec3 {
    let (u, a, b) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
    mesh.sample_point(u, a, b)
}

/// Start a new episode: sample start (and goal), heading and reset counters.
pub fn reset_episode(env: &mut EnvState, cfg: &TaskConfig) -> Result<(), NavError> {
    let asset = Arc::clone(&env.asset);
    let mesh = asset.navmesh();
    let mut accepted = None;
    for _ in 0..cfg.sampling_attempts {
        let start = sample_on(mesh, &mut env.rng);
        match cfg.task {
            Task::PointGoalNav => {
                let goal = sample_on(mesh, &mut env.rng);
                let field = DistanceField::new(mesh, goal);
                let d = field.distance_from(mesh, start);
                if d >= cfg.min_goal_geodesic && d <= cfg.max_goal_geodesic {
                    accepted = Some((start, goal, field, d));
                    break;
                }
            }
            Task::Flee | Task::Explore => {
                let field = DistanceField::new(mesh, start);
                accepted = Some((start, start, field, 0.0));
                break;
            }
        }
    }
    let (start, goal, field, d) = accepted.ok_or(NavError::EpisodeSampling {
        attempts: cfg.sampling_attempts,
    })?;
    env.heading = wrap_angle(env.rng.gen::<f64>() * std::f64::consts::TAU);
    env.position = start;
    env.start = start;
    env.goal = goal;
    env.step_count = 0;
    env.path_length = 0.0;
    env.start_geodesic = d;
    env.prev_geodesic = d;
    env.visited.clear();
    if cfg.task == Task::Explore {
        env.visited.insert(explore_cell(mesh, start, cfg.explore_cell));
    }
    env.field = Some(Arc::new(field));
    env.done = false;
    env.episode += 1;
    Ok(())
}

/// Kinematic outcome of one action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentMove {
    pub displacement: f64,
    pub collision: bool,
}

/// Where a forward step of `distance` from `position` along `heading` ends,
/// and whether it was stopped by the navmesh boundary.
pub fn forward_landing(mesh: &NavMesh, position: DVec3, heading: f64, distance: f64) -> (DVec3, bool) {
    let from = xz(position);
    let to = from + xz(heading_dir(heading)) * distance;
    let (end, collision) = match mesh.first_exit(from, to) {
        Some(t) => (from + (to - from) * t, true),
        None => (to, false),
    };
    let lifted = mesh
        .lift(end)
        .unwrap_or_else(|| mesh.closest_point(DVec3::new(end.x, position.y, end.y)).0);
    (lifted, collision)
}

/// Apply one action to the agent. Forward motion stops at the navmesh
/// boundary (no sliding).
pub fn step_agent(env: &mut EnvState, action: Action, cfg: &TaskConfig) -> Result<AgentMove, NavError> {
    if env.done {
        return Err(NavError::Contract("step on a finished episode".into()));
    }
    env.step_count += 1;
    let turn = cfg.turn_degrees.to_radians();
    let mut mv = AgentMove {
        displacement: 0.0,
        collision: false,
    };
    match action {
        Action::TurnLeft => env.heading = wrap_angle(env.heading + turn),
        Action::TurnRight => env.heading = wrap_angle(env.heading - turn),
        Action::Stop => env.done = true,
        Action::Forward => {
            let (lifted, collision) = forward_landing(env.asset.navmesh(), env.position, env.heading, cfg.forward_step);
            mv.collision = collision;
            mv.displacement = (lifted - env.position).length();
            env.path_length += mv.displacement;
            env.position = lifted;
        }
    }
    Ok(mv)
}

/// One task step: kinematics plus reward, termination and metrics.
pub fn task_step(env: &mut EnvState, action: Action, cfg: &TaskConfig) -> Result<StepResult, NavError> {
    let mv = step_agent(env, action, cfg)?;
    let asset = Arc::clone(&env.asset);
    let mesh = asset.navmesh();
    let field = env
        .field
        .clone()
        .ok_or_else(|| NavError::Contract("environment was never reset".into()))?;
    let stopped = action == Action::Stop;
    let mut success = false;
    let mut score = 0.0;
    let reward = match cfg.task {
        Task::PointGoalNav => {
            let geo = field.distance_from(mesh, env.position);
            success = stopped && geo <= cfg.success_distance;
            let r = -(geo - env.prev_geodesic) - cfg.slack_reward + if success { cfg.success_reward } else { 0.0 };
            env.prev_geodesic = geo;
            r
        }
        Task::Flee => {
            let geo = field.distance_from(mesh, env.position);
            let r = geo - env.prev_geodesic;
            env.prev_geodesic = geo;
            score = geo;
            r
        }
        Task::Explore => {
            let fresh = env.visited.insert(explore_cell(mesh, env.position, cfg.explore_cell));
            score = env.visited.len() as f64;
            if fresh {
                cfg.explore_reward
            } else {
                0.0
            }
        }
    };
    if env.step_count >= cfg.max_steps {
        env.done = true;
    }
    let episode = env.done.then_some(EpisodeSummary {
        success,
        shortest_path: env.start_geodesic,
        path_length: env.path_length,
        score,
        steps: env.step_count,
    });
    Ok(StepResult {
        reward,
        done: env.done,
        success,
        collision: mv.collision,
        position: env.position,
        heading: env.heading,
        compass: env.compass(),
        episode,
    })
}

/// Success weighted by (normalized inverse) path length, averaged over episodes.
pub fn spl(episodes: &[EpisodeSummary]) -> Result<f64, NavError> {
    if episodes.is_empty() {
        return Err(NavError::InvalidInput("SPL of an empty episode list".into()));
    }
    let mut total = 0.0;
    for e in episodes {
        if !(e.shortest_path > 0.0) || !(e.path_length >= 0.0) {
            return Err(NavError::InvalidInput(format!(
                "episode with shortest path {} and path length {}",
                e.shortest_path, e.path_length
            )));
        }
        if e.success {
            total += e.shortest_path / e.path_length.max(e.shortest_path);
        }
    }
    Ok(total / episodes.len() as f64)
}

/// Mean success rate.
pub fn success_rate(episodes: &[EpisodeSummary]) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    episodes.iter().filter(|e| e.success).count() as f64 / episodes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(success: bool, l: f64, p: f64) -> EpisodeSummary {
        EpisodeSummary {
            success,
            shortest_path: l,
            path_length: p,
            score: 0.0,
            steps: 1,
        }
    }

    #[test]
    fn spl_examples() {
        assert_eq!(spl(&[summary(true, 3.0, 3.0)]).unwrap(), 1.0);
        assert_eq!(spl(&[summary(false, 3.0, 3.0)]).unwrap(), 0.0);
        assert_eq!(spl(&[summary(true, 3.0, 6.0)]).unwrap(), 0.5);
        // shorter-than-optimal paths clamp at 1
        assert_eq!(spl(&[summary(true, 3.0, 2.0)]).unwrap(), 1.0);
        assert!(spl(&[]).is_err());
        assert!(spl(&[summary(true, 0.0, 1.0)]).is_err());
    }

    #[test]
    fn action_indices_round_trip() {
        for a in Action::ALL {
            assert_eq!(Action::from_index(a.index()), Some(a));
        }
        assert_eq!(Action::from_index(4), None);
    }
}
