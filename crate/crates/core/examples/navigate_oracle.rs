//! Score scripted agents on held-out scenes: the geodesic oracle, a uniformly
//! random agent and one that stops immediately.

use std::sync::Arc;

use batchsim::rollout::{evaluate, Agent, EvalConfig};
use batchsim::scene::{generate_scene, GeneratorSpec};

fn main() {
    let assets: Vec<_> = (500..504)
        .map(|s| Arc::new(generate_scene(s, &GeneratorSpec::default()).expect("scene")))
        .collect();
    let cfg = EvalConfig {
        envs: 8,
        episodes: 32,
        ..EvalConfig::default()
    };
    for (name, agent) in [
        ("oracle", Agent::Oracle),
        ("random", Agent::Random(9)),
        ("stop", Agent::Stop),
    ] {
        let r = evaluate(agent, &assets, &cfg).expect("evaluate");
        println!(
            "{name:>7}: {} episodes  Success {:.3}  SPL {:.3}  mean steps {:.1}",
            r.episodes, r.success, r.spl, r.mean_steps
        );
    }
}
