#![allow(dead_code)]

use batchsim::nn::{log_softmax_rows, Policy, PolicyConfig, RecurrentState, SequenceInput, Tape, Tensor};
use batchsim::train::{ppo_loss, PpoBatch};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_policy_config() -> PolicyConfig {
    PolicyConfig {
        resolution: 8,
        stages: vec![16, 32],
        embed: 8,
        hidden: 6,
        ..PolicyConfig::default()
    }
}

/// A random recurrent PPO problem over `envs × steps` frames.
pub struct Problem {
    pub obs: Tensor<f64>,
    pub compass: Tensor<f64>,
    pub starts: Vec<bool>,
    pub initial: RecurrentState<f64>,
    pub steps: usize,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

pub fn random_problem(policy: &Policy<f64>, envs: usize, steps: usize, seed: u64) -> Problem {
    let cfg = policy.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = envs * steps;
    let obs = Tensor::from_vec(
        &[frames, cfg.in_channels, cfg.resolution, cfg.resolution],
        (0..frames * cfg.obs_len()).map(|_| rng.gen::<f64>()).collect(),
    )
    .unwrap();
    let compass = Tensor::from_vec(
        &[frames, 3],
        (0..frames * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let starts = (0..frames).map(|_| rng.gen_bool(0.2)).collect();
    let h = cfg.hidden;
    let initial = RecurrentState {
        h: Tensor::from_vec(&[envs, h], (0..envs * h).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap(),
        c: Tensor::from_vec(&[envs, h], (0..envs * h).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap(),
    };
    let actions = (0..frames).map(|_| rng.gen_range(0..cfg.actions)).collect();
    let advantages = (0..frames).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let returns = (0..frames).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut p = Problem {
        obs,
        compass,
        starts,
        initial,
        steps,
        actions,
        old_log_probs: Vec::new(),
        advantages,
        returns,
    };
    // old policy close to the current one so every ratio stays inside the clip range
    let logits = forward_logits(policy, &p).0;
    let lp = log_softmax_rows(&logits, cfg.actions);
    p.old_log_probs = (0..frames)
        .map(|i| lp[i * cfg.actions + p.actions[i]] + rng.gen_range(-0.05..0.05))
        .collect();
    p
}

fn input(p: &Problem) -> SequenceInput<'_, f64> {
    SequenceInput {
        obs: &p.obs,
        compass: &p.compass,
        starts: &p.starts,
        initial: &p.initial,
        steps: p.steps,
    }
}

pub fn forward_logits(policy: &Policy<f64>, p: &Problem) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new(policy.params());
    let r = policy.record(&mut tape, &input(p), false).unwrap();
    (
        tape.value(r.logits).data().to_vec(),
        tape.value(r.values).data().to_vec(),
    )
}

pub fn loss_value(policy: &Policy<f64>, p: &Problem) -> f64 {
    let (logits, values) = forward_logits(policy, p);
    ppo_loss(&batch(policy, p, &logits, &values), 0.2, 0.5, 0.01)
        .unwrap()
        .loss
}

fn batch<'a>(policy: &Policy<f64>, p: &'a Problem, logits: &'a [f64], values: &'a [f64]) -> PpoBatch<'a, f64> {
    PpoBatch {
        logits,
        values,
        actions: &p.actions,
        old_log_probs: &p.old_log_probs,
        advantages: &p.advantages,
        returns: &p.returns,
        action_count: policy.config().actions,
    }
}

pub fn loss_gradient(policy: &Policy<f64>, p: &Problem) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new(policy.params());
    let r = policy.record(&mut tape, &input(p), false).unwrap();
    let (logits, values) = (
        tape.value(r.logits).data().to_vec(),
        tape.value(r.values).data().to_vec(),
    );
    let l = ppo_loss(&batch(policy, p, &logits, &values), 0.2, 0.5, 0.01).unwrap();
    let frames = p.actions.len();
    let dl = Tensor::from_vec(&[frames, policy.config().actions], l.dlogits).unwrap();
    let dv = Tensor::from_vec(&[frames, 1], l.dvalues).unwrap();
    let loss = tape.scalar_fn(&[r.logits, r.values], l.loss, vec![dl, dv]).unwrap();
    tape.backward(loss).unwrap()
}

/// Layer type of a parameter name.
pub fn layer_type(name: &str) -> &'static str {
    match name {
        n if n.starts_with("stem.weight") => "stem conv",
        n if n.ends_with("conv1.weight") => "residual conv1",
        n if n.ends_with("conv2.weight") => "residual conv2",
        n if n.ends_with("proj.weight") => "projection conv",
        n if n.contains(".se.") && n.ends_with("weight") => "squeeze-excite linear",
        n if n.contains(".se.") => "squeeze-excite bias",
        n if n.ends_with(".scale") => "fixup multiplier",
        n if n.starts_with("block") || n.starts_with("stem") => "fixup scalar bias",
        "embed.weight" | "embed.bias" => "embedding",
        "lstm.weight" => "lstm weight",
        "lstm.bias" => "lstm bias",
        _ => "heads",
    }
}

/// Moves the fresh network away from its Fixup initialization so every
/// parameter influences the loss.
pub fn perturb(policy: &mut Policy<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for p in policy.params_mut().iter_mut() {
        let scalar = p.tensor.len() == 1 || p.name.contains("bias");
        for x in p.tensor.data_mut() {
            if scalar {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
        if p.name.ends_with("se.fc1.bias") || p.name == "embed.bias" {
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = rng.gen_range(0.5..1.0));
        }
        if p.name.ends_with(".scale") {
            p.tensor.data_mut()[0] = rng.gen_range(0.3..0.8);
        }
    }
}

pub struct GradCheck {
    pub layer: &'static str,
    pub samples: usize,
    /// Parameters of this layer type.
    pub available: usize,
    pub max_rel_error: f64,
    pub max_abs_gradient: f64,
}

/// Largest relative error between analytic and central-difference gradients
/// over `per_type` entries of every layer type, drawn without replacement.
/// Near a kink the step shrinks; entries that stay non-smooth are redrawn.
pub fn gradient_check(seed: u64, per_type: usize) -> Vec<GradCheck> {
    let mut policy = Policy::<f64>::new(&tiny_policy_config(), seed).unwrap();
    perturb(&mut policy, seed);
    let problem = random_problem(&policy, 2, 3, seed);
    let grads = loss_gradient(&policy, &problem);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    let mut by_type: std::collections::BTreeMap<&'static str, Vec<(usize, usize)>> = Default::default();
    for (i, p) in policy.params().iter().enumerate() {
        for k in 0..p.tensor.len() {
            by_type.entry(layer_type(&p.name)).or_default().push((i, k));
        }
    }
    let h = 1e-6;
    let mut central = |i: usize, k: usize, step: f64| {
        let orig = policy.params().tensor(i).data()[k];
        policy.params_mut().tensor_mut(i).data_mut()[k] = orig + step;
        let up = loss_value(&policy, &problem);
        policy.params_mut().tensor_mut(i).data_mut()[k] = orig - step;
        let down = loss_value(&policy, &problem);
        policy.params_mut().tensor_mut(i).data_mut()[k] = orig;
        (up - down) / (2.0 * step)
    };
    let mut out = Vec::new();
    for (ty, mut entries) in by_type {
        let mut worst: f64 = 0.0;
        let mut biggest: f64 = 0.0;
        let mut n = 0;
        let available = entries.len();
        entries.shuffle(&mut rng);
        for (i, k) in entries {
            if n == per_type {
                break;
            }
            // an activation kink inside [-h, h] breaks the O(h^2) agreement
            let smooth = [h, h / 10.0, h / 100.0].into_iter().find_map(|step| {
                let numeric = central(i, k, step);
                let tol = 1e-7 * (h / step) + 1e-5 * numeric.abs();
                ((numeric - central(i, k, step / 2.0)).abs() <= tol).then_some(numeric)
            });
            let Some(numeric) = smooth else { continue };
            let analytic = grads[i].data()[k];
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / scale);
            biggest = biggest.max(analytic.abs());
            n += 1;
        }
        out.push(GradCheck {
            layer: ty,
            samples: n,
            available,
            max_rel_error: worst,
            max_abs_gradient: biggest,
        });
    }
    out
}

pub fn small_scenes(count: u64, first_seed: u64) -> Vec<batchsim::scene::SceneAsset> {
    let spec = batchsim::scene::GeneratorSpec {
        cells_x: 3,
        cells_z: 3,
        ..Default::default()
    };
    (first_seed..first_seed + count)
        .map(|s| batchsim::scene::generate_scene(s, &spec).unwrap())
        .collect()
}

pub fn scene_set(assets: Vec<batchsim::scene::SceneAsset>) -> batchsim::rollout::SceneSet {
    let source = batchsim::scene::GeneratedSource::new(assets);
    let ids = source.ids();
    batchsim::rollout::SceneSet {
        source: std::sync::Arc::new(source),
        ids,
    }
}

/// A training run small enough for unit-test time budgets.
pub fn tiny_spec(envs: usize, steps: usize, iterations: u64) -> batchsim::rollout::TrainSpec {
    use batchsim::rollout::{BatchConfig, TrainSpec};
    use batchsim::train::TrainConfig;
    let batch = BatchConfig {
        envs,
        scenes: 2,
        rollout_len: steps,
        resolution: 8,
        task: batchsim::navsim::TaskConfig {
            max_steps: 20,
            max_goal_geodesic: 6.0,
            ..Default::default()
        },
        ..BatchConfig::default()
    };
    TrainSpec {
        total_frames: iterations * (envs * steps) as u64,
        checkpoint_every: 1,
        seed: 5,
        train: TrainConfig {
            minibatches: 2,
            chunk_envs: 2,
            ..TrainConfig::default()
        },
        policy: tiny_policy_config(),
        batch,
    }
}
