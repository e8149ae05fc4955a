//! Train a small depth policy for a few iterations on in-memory scenes,
//! checkpoint it, and evaluate it greedily on held-out scenes.

use std::sync::Arc;

use batchsim::nn::PolicyConfig;
use batchsim::rollout::{
    evaluate, load_checkpoint_policy, Agent, BatchConfig, EvalConfig, SceneSet, TrainSpec, Trainer,
};
use batchsim::scene::{generate_scene, GeneratedSource, GeneratorSpec, SceneSource};
use batchsim::train::TrainConfig;

fn main() {
    let gen = GeneratorSpec {
        cells_x: 4,
        cells_z: 4,
        ..GeneratorSpec::default()
    };
    let source = GeneratedSource::new((0..8).map(|s| generate_scene(s, &gen).expect("scene")));
    let scenes = SceneSet {
        ids: source.ids(),
        source: Arc::new(source) as Arc<dyn SceneSource>,
    };

    let mut spec = TrainSpec {
        batch: BatchConfig {
            envs: 16,
            scenes: 4,
            rollout_len: 16,
            resolution: 16,
            ..BatchConfig::default()
        },
        policy: PolicyConfig {
            resolution: 16,
            stages: vec![16, 32],
            embed: 32,
            hidden: 32,
            ..PolicyConfig::default()
        },
        train: TrainConfig {
            minibatches: 2,
            ..TrainConfig::default()
        },
        seed: 3,
        ..TrainSpec::default()
    };
    spec.batch.task.max_goal_geodesic = 5.0;
    spec.total_frames = 20 * spec.batch.frames_per_rollout();

    let mut trainer = Trainer::new(spec.clone(), scenes).expect("trainer");
    while !trainer.finished() {
        let m = trainer.step().expect("iteration");
        println!(
            "iter {:>2}  frames {:>5}  loss {:>8.4}  entropy {:.3}  lr {:.2e}  episodes {:>3}  reward {:>7.3}",
            m.iteration, m.frames, m.loss, m.entropy, m.lr, m.episodes, m.mean_reward
        );
    }

    let dir = std::env::temp_dir().join("bps_example_checkpoint");
    trainer.save_checkpoint(&dir).expect("checkpoint");
    let (policy, _) = load_checkpoint_policy(&dir).expect("reload");

    let held_out: Vec<_> = (100..102)
        .map(|s| Arc::new(generate_scene(s, &gen).expect("scene")))
        .collect();
    let eval = EvalConfig {
        envs: 4,
        episodes: 8,
        batch: spec.batch.clone(),
        ..EvalConfig::default()
    };
    let r = evaluate(Agent::Greedy(&policy), &held_out, &eval).expect("evaluate");
    println!(
        "held out: Success {:.3}  SPL {:.3}  mean steps {:.1}",
        r.success, r.spl, r.mean_steps
    );
}
