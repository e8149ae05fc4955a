//! Render depth observations for a batch of agents and run one policy step
//! on them. A freshly initialized network ignores its residual branches, so
//! the ablated forward pass matches exactly.

use std::collections::HashMap;
use std::sync::Arc;

use batchsim::navsim::{reset_episode, EnvState, TaskConfig};
use batchsim::nn::{encode_compass, Policy, PolicyConfig, RecurrentState, Tensor, COMPASS_WIDTH};
use batchsim::render::{render_batch, CameraView, RenderConfig, DEFAULT_EYE_HEIGHT};
use batchsim::scene::{generate_scene, GeneratorSpec};

fn main() {
    let asset = Arc::new(generate_scene(21, &GeneratorSpec::default()).expect("scene"));
    let task = TaskConfig::default();
    let n = 4;
    let envs: Vec<EnvState> = (0..n)
        .map(|i| {
            let mut env = EnvState::new(Arc::clone(&asset), i as u64);
            reset_episode(&mut env, &task).expect("episode");
            env
        })
        .collect();

    let cfg = PolicyConfig::default();
    let render = RenderConfig {
        tile_width: cfg.resolution,
        tile_height: cfg.resolution,
        ..RenderConfig::default()
    };
    let views: Vec<_> = envs
        .iter()
        .map(|e| CameraView::for_agent(e.scene_id(), e.position, e.heading, DEFAULT_EYE_HEIGHT))
        .collect();
    let resolver: HashMap<_, _> = [(asset.id(), Arc::clone(&asset))].into_iter().collect();
    let frame = render_batch(&views, &resolver, &render).expect("render");

    let per = cfg.obs_len();
    let mut obs = Tensor::<f32>::zeros(&[n, 1, cfg.resolution, cfg.resolution]);
    let mut compass = Tensor::<f32>::zeros(&[n, COMPASS_WIDTH]);
    for (i, env) in envs.iter().enumerate() {
        frame.write_depth_observation(i, &mut obs.data_mut()[i * per..(i + 1) * per]);
        let (d, b) = env.compass();
        for (k, v) in encode_compass(d, b).into_iter().enumerate() {
            compass.data_mut()[i * COMPASS_WIDTH + k] = v as f32;
        }
    }

    let policy = Policy::<f32>::new(&cfg, 1).expect("policy");
    let state = RecurrentState::zeros(n, cfg.hidden);
    let starts = vec![true; n];
    let out = policy.forward(&obs, &compass, &state, &starts).expect("forward");
    let ablated = policy
        .forward_ablated(&obs, &compass, &state, &starts)
        .expect("forward");
    assert_eq!(out.logits.data(), ablated.logits.data());

    println!("{} parameters", policy.params().element_count());
    for i in 0..n {
        let row = &out.logits.data()[i * cfg.actions..(i + 1) * cfg.actions];
        println!(
            "env {i}: goal {:>5.2} m  logits {row:>8.4?}  value {:>8.4}",
            envs[i].compass().0,
            out.value[i]
        );
    }
}
