mod common;

use batchsim::navsim::SimBatch;
use batchsim::navsim::{Task, TaskConfig};
use batchsim::nn::Policy;
use batchsim::rollout::{
    evaluate, train_run, ActionMode, Agent, BatchConfig, Collector, EvalConfig, MetricsRecord, Trainer,
};
use batchsim::scene::{AssetStore, GeneratedSource};
use batchsim::train::RolloutBuffer;
use std::sync::Arc;

use common::{scene_set, small_scenes, tiny_policy_config, tiny_spec};

fn collector(mode: ActionMode, envs: usize) -> (Collector, Policy<f32>, BatchConfig) {
    let spec = tiny_spec(envs, 8, 1);
    let assets: Vec<_> = small_scenes(2, 0).into_iter().map(Arc::new).collect();
    let sim = SimBatch::from_assets(&assets, envs, 9, spec.batch.task.clone(), 1).unwrap();
    let policy = Policy::new(&spec.policy, 3).unwrap();
    let c = Collector::new(sim, &spec.batch, spec.policy.hidden, mode, 11).unwrap();
    (c, policy, spec.batch)
}

#[test]
fn buffer_holds_n_times_l_transitions_and_resets_follow_dones() {
    let (mut c, policy, b) = collector(ActionMode::Sample, 6);
    let mut buf = RolloutBuffer::new(6, 40, policy.config().obs_len(), policy.config().hidden);
    let before = c.counters();
    c.collect(&policy, &mut buf).unwrap();
    assert_eq!(buf.transitions(), 6 * 40);
    let after = c.counters();
    assert_eq!(after.sim_calls - before.sim_calls, 40);
    assert_eq!(after.render_calls - before.render_calls, 40);
    assert_eq!(after.inference_calls - before.inference_calls, 41);
    let mut dones = 0;
    for e in 0..6 {
        for t in 0..39 {
            let i = buf.index(e, t);
            assert_eq!(buf.starts[i + 1], buf.dones[i], "env {e} step {t}");
            if buf.dones[i] {
                dones += 1;
                // a fresh episode starts with the recurrent state zeroed and
                // the compass pointing at a new goal
                let next = &buf.compass[(i + 1) * 3..(i + 2) * 3];
                assert!(next[0] >= 0.0);
            }
        }
    }
    assert!(dones > 0, "max_steps of {} must end episodes", b.task.max_steps);
}

#[test]
fn greedy_collection_is_reproducible() {
    let run = || {
        let (mut c, policy, _) = collector(ActionMode::Greedy, 4);
        let mut buf = RolloutBuffer::new(4, 12, policy.config().obs_len(), policy.config().hidden);
        c.collect(&policy, &mut buf).unwrap();
        buf
    };
    let (a, b) = (run(), run());
    assert_eq!(a.obs, b.obs);
    assert_eq!(a.actions, b.actions);
    assert_eq!(a.values, b.values);
    assert_eq!(a.rewards, b.rewards);
    assert_eq!(a.dones, b.dones);
}

#[test]
fn one_iteration_for_one_rollout_of_frames() {
    let spec = tiny_spec(4, 8, 1);
    let summary = train_run(&spec, scene_set(small_scenes(3, 0)), None, false, |_| {}).unwrap();
    assert_eq!(summary.iterations, 1);
    assert_eq!(summary.frames, 32);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let spec = tiny_spec(4, 6, 4);
    let scenes = || scene_set(small_scenes(3, 20));
    let mut full = Trainer::new(spec.clone(), scenes()).unwrap();
    while !full.finished() {
        full.step().unwrap();
    }

    let dir = tempfile::tempdir().unwrap();
    let cp = dir.path().join("checkpoint");
    let mut first = Trainer::new(spec.clone(), scenes()).unwrap();
    first.step().unwrap();
    first.step().unwrap();
    first.save_checkpoint(&cp).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(spec.clone(), scenes(), &cp).unwrap();
    assert_eq!(resumed.iteration(), 2);
    while !resumed.finished() {
        resumed.step().unwrap();
    }
    assert_eq!(resumed.frames(), full.frames());
    for (a, b) in full.policy().params().iter().zip(resumed.policy().params().iter()) {
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
    assert_eq!(full.optimizer().m, resumed.optimizer().m);
    assert_eq!(full.optimizer().v, resumed.optimizer().v);
    assert_eq!(full.collector().sim().snapshot(), resumed.collector().sim().snapshot());
}

#[test]
fn train_run_writes_metrics_and_checkpoint() {
    let spec = tiny_spec(4, 4, 3);
    let dir = tempfile::tempdir().unwrap();
    let mut seen = Vec::new();
    let s = train_run(&spec, scene_set(small_scenes(3, 0)), Some(dir.path()), false, |r| {
        seen.push(r.iteration)
    })
    .unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    assert!(s.checkpoint.unwrap().join("state.json").exists());
    let text = std::fs::read_to_string(dir.path().join("metrics.ndjson")).unwrap();
    let recs: Vec<MetricsRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 3);
    for (k, r) in recs.iter().enumerate() {
        assert_eq!(r.iteration, k as u64 + 1);
        let t = r.timings;
        assert!(t.sim_render_us > 0.0 && t.inference_us > 0.0 && t.learning_us > 0.0);
    }
}

#[test]
fn share_ratio_holds_for_every_constructed_batch() {
    let mut spec = tiny_spec(8, 4, 1);
    spec.batch.scenes = 1;
    spec.batch.share_cap = 4;
    assert!(spec.problems().iter().any(|p| p.contains("share cap")));
    spec.batch.share_cap = 8;
    let t = Trainer::new(spec, scene_set(small_scenes(3, 0))).unwrap();
    for (_, refs) in t.store().snapshot().residents {
        assert!(refs <= 8);
    }
}

fn eval_cfg(episodes: usize, task: TaskConfig) -> EvalConfig {
    EvalConfig {
        envs: 4,
        episodes,
        seed: 77,
        batch: BatchConfig {
            envs: 4,
            resolution: 8,
            task,
            ..BatchConfig::default()
        },
    }
}

#[test]
fn oracle_agent_succeeds_with_near_optimal_spl() {
    let assets: Vec<_> = small_scenes(2, 100).into_iter().map(Arc::new).collect();
    let r = evaluate(Agent::Oracle, &assets, &eval_cfg(24, TaskConfig::default())).unwrap();
    assert_eq!(r.episodes, 24);
    assert_eq!(r.success, 1.0);
    assert!((0.9..=1.0).contains(&r.spl), "spl {}", r.spl);
}

#[test]
fn oracle_agent_on_full_size_scenes() {
    let spec = batchsim::scene::GeneratorSpec::default();
    let assets: Vec<_> = (0..4)
        .map(|s| Arc::new(batchsim::scene::generate_scene(500 + s, &spec).unwrap()))
        .collect();
    let r = evaluate(Agent::Oracle, &assets, &eval_cfg(100, TaskConfig::default())).unwrap();
    assert_eq!(r.episodes, 100);
    assert_eq!(r.success, 1.0);
    assert!((0.9..=1.0).contains(&r.spl), "spl {}", r.spl);
}

#[test]
fn random_agent_rarely_reaches_distant_goals() {
    let spec = batchsim::scene::GeneratorSpec {
        cells_x: 10,
        cells_z: 10,
        ..Default::default()
    };
    let assets: Vec<_> = (0..2)
        .map(|s| Arc::new(batchsim::scene::generate_scene(900 + s, &spec).unwrap()))
        .collect();
    let task = TaskConfig {
        min_goal_geodesic: 10.0,
        max_steps: 200,
        ..TaskConfig::default()
    };
    let r = evaluate(Agent::Random(4), &assets, &eval_cfg(100, task)).unwrap();
    assert_eq!(r.episodes, 100);
    assert!(r.success <= 0.02, "success {}", r.success);
}

#[test]
fn stopping_agent_scores_zero() {
    let assets: Vec<_> = small_scenes(2, 100).into_iter().map(Arc::new).collect();
    let r = evaluate(Agent::Stop, &assets, &eval_cfg(8, TaskConfig::default())).unwrap();
    assert_eq!((r.success, r.spl), (0.0, 0.0));
}

#[test]
fn greedy_policy_evaluation_is_deterministic() {
    let assets: Vec<_> = small_scenes(2, 100).into_iter().map(Arc::new).collect();
    let policy = Policy::new(&tiny_policy_config(), 1).unwrap();
    let task = TaskConfig {
        max_steps: 15,
        ..TaskConfig::default()
    };
    let a = evaluate(Agent::Greedy(&policy), &assets, &eval_cfg(8, task.clone())).unwrap();
    let b = evaluate(Agent::Greedy(&policy), &assets, &eval_cfg(8, task)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.episodes, 8);
}

#[test]
fn flee_reports_score_instead_of_success() {
    let assets: Vec<_> = small_scenes(1, 100).into_iter().map(Arc::new).collect();
    let task = TaskConfig {
        task: Task::Flee,
        max_steps: 10,
        ..TaskConfig::default()
    };
    let r = evaluate(Agent::Random(3), &assets, &eval_cfg(4, task)).unwrap();
    assert_eq!(r.success, 0.0);
    assert!(r.score >= 0.0);
    let store = AssetStore::new(1, 1, Arc::new(GeneratedSource::new(small_scenes(1, 0))));
    assert_eq!(store.capacity(), 1);
}
