//! Property tests for the invariants each component promises.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use glam::DVec3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use batchsim::navsim::{
    geodesic_distance, reset_episode, task_step, Action, EnvState, SimBatch, Task, TaskConfig, ACTION_COUNT,
};
use batchsim::nn::{
    argmax_rows, ParamGroup, ParamSet, Policy, PolicyConfig, RecurrentState, SequenceInput, Tape, Tensor,
};
use batchsim::render::{
    render_batch, render_batch_into, CameraView, Megaframe, RenderConfig, Sensor, DEFAULT_EYE_HEIGHT,
};
use batchsim::scene::{
    generate_scene, AssetHandle, AssetStore, GeneratedSource, GeneratorSpec, NavMesh, SceneAsset, SceneError, SceneId,
    SceneSource,
};
use batchsim::train::{clip_grad_norm, lamb_step, LambConfig, OptimizerState};

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(cases)
    }
}

fn small_spec() -> GeneratorSpec {
    GeneratorSpec {
        cells_x: 3,
        cells_z: 3,
        ..GeneratorSpec::default()
    }
}

fn small_scenes(seeds: std::ops::Range<u64>) -> Vec<Arc<SceneAsset>> {
    seeds
        .map(|s| Arc::new(generate_scene(s, &small_spec()).unwrap()))
        .collect()
}

fn resolver(assets: &[Arc<SceneAsset>]) -> HashMap<SceneId, Arc<SceneAsset>> {
    assets.iter().map(|a| (a.id(), Arc::clone(a))).collect()
}

fn random_views(assets: &[Arc<SceneAsset>], n: usize, rng: &mut ChaCha8Rng) -> Vec<CameraView> {
    (0..n)
        .map(|_| {
            let a = &assets[rng.gen_range(0..assets.len())];
            let p = a.navmesh().sample_point(rng.gen(), rng.gen(), rng.gen());
            CameraView::for_agent(a.id(), p, rng.gen_range(-3.2..3.2), DEFAULT_EYE_HEIGHT)
        })
        .collect()
}

// ---------------------------------------------------------------- scene

#[derive(Debug, Clone)]
enum StoreOp {
    AcquireNext,
    Acquire(usize),
    Release(usize),
    Rotate(usize, usize),
    Sync,
}

fn store_op() -> impl Strategy<Value = StoreOp> {
    prop_oneof![
        4 => Just(StoreOp::AcquireNext),
        2 => (0usize..6).prop_map(StoreOp::Acquire),
        4 => any::<usize>().prop_map(StoreOp::Release),
        1 => (0usize..6, 1usize..4).prop_map(|(s, l)| StoreOp::Rotate(s, l)),
        1 => Just(StoreOp::Sync),
    ]
}

fn check_store(store: &AssetStore, handles: &[AssetHandle]) -> Result<(), TestCaseError> {
    let snap = store.snapshot();
    prop_assert!(snap.residents.len() <= store.capacity());
    for (id, refs) in &snap.residents {
        prop_assert!(*refs <= store.share_cap());
        prop_assert_eq!(*refs, handles.iter().filter(|h| h.id() == *id).count());
    }
    for h in handles {
        prop_assert!(
            snap.residents.iter().any(|(id, _)| *id == h.id()),
            "live handle to evicted scene"
        );
    }
    Ok(())
}

proptest! {
    #![proptest_config(cfg(48))]

    #[test]
    fn store_bounds_hold_under_random_schedules(
        capacity in 1usize..4,
        share_cap in 1usize..4,
        deterministic in any::<bool>(),
        ops in proptest::collection::vec(store_op(), 1..80),
    ) {
        let assets = small_scenes(0..6);
        let ids: Vec<SceneId> = assets.iter().map(|a| a.id()).collect();
        let source = Arc::new(GeneratedSource::new(assets.iter().map(|a| SceneAsset::clone(a))));
        let store = if deterministic {
            AssetStore::deterministic(capacity, share_cap, source)
        } else {
            AssetStore::new(capacity, share_cap, source)
        };
        let mut handles: Vec<AssetHandle> = Vec::new();
        for op in ops {
            match op {
                StoreOp::AcquireNext => match store.acquire_next() {
                    Ok(h) => handles.push(h),
                    Err(e) => prop_assert!(matches!(e, SceneError::Saturated(_))),
                },
                StoreOp::Acquire(i) => match store.acquire(ids[i]) {
                    Ok(h) => handles.push(h),
                    Err(e) => prop_assert!(matches!(e, SceneError::Saturated(_))),
                },
                StoreOp::Release(k) => {
                    if !handles.is_empty() {
                        let h = handles.swap_remove(k % handles.len());
                        store.release(h);
                    }
                }
                StoreOp::Rotate(s, l) => {
                    let next: Vec<SceneId> = (0..l).map(|j| ids[(s + j) % ids.len()]).collect();
                    store.rotate(&next);
                }
                StoreOp::Sync => store.sync(),
            }
            check_store(&store, &handles)?;
        }
    }

    #[test]
    fn scene_generation_is_a_pure_function(seed in 0u64..1_000, cells in 2u32..5) {
        let spec = GeneratorSpec { cells_x: cells, cells_z: cells + 1, ..GeneratorSpec::default() };
        let a = generate_scene(seed, &spec).unwrap();
        let b = generate_scene(seed, &spec).unwrap();
        prop_assert_eq!(a.id(), b.id());
        prop_assert!(a == b);
    }
}

struct SlowSource {
    inner: GeneratedSource,
    delay: Duration,
}

impl SceneSource for SlowSource {
    fn load(&self, id: SceneId) -> Result<SceneAsset, SceneError> {
        std::thread::sleep(self.delay);
        self.inner.load(id)
    }
}

#[test]
fn rotation_does_not_wait_for_loads() {
    let assets = small_scenes(10..14);
    let ids: Vec<SceneId> = assets.iter().map(|a| a.id()).collect();
    let source = Arc::new(SlowSource {
        inner: GeneratedSource::new(assets.iter().map(|a| SceneAsset::clone(a))),
        delay: Duration::from_millis(300),
    });
    let store = AssetStore::new(2, 4, source);
    let first = store.acquire(ids[0]).unwrap();
    let t0 = Instant::now();
    store.rotate(&ids[1..3]);
    // current residents keep serving while the loads are in flight
    let again = store.acquire_next().unwrap();
    assert!(
        t0.elapsed() < Duration::from_millis(150),
        "rotate blocked for {:?}",
        t0.elapsed()
    );
    assert_eq!(again.id(), ids[0]);
    assert!(!store.snapshot().in_flight.is_empty());
    drop((first, again));
    store.sync();
    assert!(store.snapshot().in_flight.is_empty());
}

#[test]
fn environments_change_scene_only_at_episode_boundaries() {
    let assets = small_scenes(20..26);
    let ids: Vec<SceneId> = assets.iter().map(|a| a.id()).collect();
    let source = Arc::new(GeneratedSource::new(assets.iter().map(|a| SceneAsset::clone(a))));
    let store = AssetStore::deterministic(2, 12, source);
    store.rotate(&ids[..2]);
    store.sync();
    let task = TaskConfig {
        max_steps: 12,
        ..TaskConfig::default()
    };
    let mut sim = SimBatch::with_store(store.clone(), 12, 3, task, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut swaps = 0;
    for step in 0..120 {
        if step % 10 == 0 {
            let k = (step / 10) % 3;
            store.rotate(&ids[2 * k..2 * k + 2]);
            store.sync();
        }
        let before: Vec<SceneId> = sim.envs().iter().map(|e| e.scene_id()).collect();
        let actions: Vec<Action> = (0..12).map(|_| Action::ALL[rng.gen_range(0..ACTION_COUNT)]).collect();
        let results = sim.simulate_batch(&actions).unwrap().to_vec();
        for (i, env) in sim.envs().iter().enumerate() {
            if env.scene_id() != before[i] {
                assert!(results[i].done, "env {i} switched scenes mid-episode");
                swaps += 1;
            }
        }
    }
    assert!(swaps > 0);
}

// ---------------------------------------------------------------- navsim

fn random_actions(rng: &mut ChaCha8Rng, n: usize, stop_weight: f64) -> Vec<Action> {
    (0..n)
        .map(|_| {
            if rng.gen_bool(stop_weight) {
                Action::Stop
            } else {
                [Action::Forward, Action::TurnLeft, Action::TurnRight][rng.gen_range(0..3)]
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(cfg(24))]

    #[test]
    fn batched_stepping_matches_sequential_stepping(
        n in 1usize..40,
        seed in any::<u64>(),
        workers in 2usize..5,
        steps in 1usize..40,
    ) {
        let assets = small_scenes(30..33);
        let task = TaskConfig { max_steps: 15, ..TaskConfig::default() };
        let mut one = SimBatch::from_assets(&assets, n, seed, task.clone(), 1).unwrap();
        let mut many = SimBatch::from_assets(&assets, n, seed, task.clone(), workers).unwrap();
        let mut seq: Vec<EnvState> = one.envs().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..steps {
            let actions = random_actions(&mut rng, n, 0.05);
            let a = one.simulate_batch(&actions).unwrap().to_vec();
            let b = many.simulate_batch(&actions).unwrap().to_vec();
            prop_assert_eq!(&a, &b);
            for (i, env) in seq.iter_mut().enumerate() {
                let mut r = task_step(env, actions[i], &task).unwrap();
                if r.done {
                    reset_episode(env, &task).unwrap();
                    r.position = env.position;
                    r.heading = env.heading;
                    r.compass = env.compass();
                }
                prop_assert_eq!(r, a[i]);
            }
        }
        let snaps: Vec<_> = seq.iter().map(EnvState::snapshot).collect();
        prop_assert_eq!(one.snapshot(), snaps.clone());
        prop_assert_eq!(many.snapshot(), snaps);
    }

    #[test]
    fn geodesic_distance_is_a_metric(seed in 0u64..40, u in proptest::collection::vec(0.0f64..1.0, 9)) {
        let asset = generate_scene(seed, &small_spec()).unwrap();
        let mesh = asset.navmesh();
        let a = mesh.sample_point(u[0], u[1], u[2]);
        let b = mesh.sample_point(u[3], u[4], u[5]);
        let c = mesh.sample_point(u[6], u[7], u[8]);
        let (ab, ba) = (geodesic_distance(mesh, a, b), geodesic_distance(mesh, b, a));
        let (bc, ac) = (geodesic_distance(mesh, b, c), geodesic_distance(mesh, a, c));
        prop_assert_eq!(geodesic_distance(mesh, a, a), 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9, "asymmetric: {} vs {}", ab, ba);
        prop_assert!(ab >= (b - a).length() - 1e-9);
        prop_assert!(ac <= ab + bc + 1e-6);
    }

    #[test]
    fn shaping_rewards_telescope(seed in any::<u64>(), scene in 40u64..46) {
        let asset = Arc::new(generate_scene(scene, &small_spec()).unwrap());
        let task = TaskConfig { max_steps: 60, ..TaskConfig::default() };
        let mut env = EnvState::new(asset, seed);
        reset_episode(&mut env, &task).unwrap();
        let start = env.start_geodesic;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shaping = 0.0;
        loop {
            let a = random_actions(&mut rng, 1, 0.02)[0];
            let r = task_step(&mut env, a, &task).unwrap();
            shaping += r.reward + task.slack_reward - if r.success { task.success_reward } else { 0.0 };
            if r.done {
                break;
            }
        }
        let last = env.field().unwrap().distance_from(env.navmesh(), env.position);
        prop_assert!((shaping - (start - last)).abs() < 1e-6, "{} vs {}", shaping, start - last);
    }
}

#[test]
fn agents_stay_on_the_navmesh() {
    let assets = small_scenes(50..54);
    let task = TaskConfig {
        task: Task::Explore,
        max_steps: 400,
        ..TaskConfig::default()
    };
    let mut sim = SimBatch::from_assets(&assets, 50, 8, task, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..2_000 {
        let actions = random_actions(&mut rng, 50, 0.0);
        sim.simulate_batch(&actions).unwrap();
        for env in sim.envs() {
            let d = env.navmesh().distance_to(env.position);
            assert!(d < 1e-6, "agent {d} m off the navmesh at {:?}", env.position);
        }
    }
    assert_eq!(sim.counters().env_steps, 100_000);
}

// ---------------------------------------------------------------- render

proptest! {
    #![proptest_config(cfg(16))]

    #[test]
    fn culling_never_changes_pixels(seed in any::<u64>(), n in 1usize..12, rgb in any::<bool>()) {
        let assets = small_scenes(60..63);
        let res = resolver(&assets);
        let views = random_views(&assets, n, &mut ChaCha8Rng::seed_from_u64(seed));
        let sensor = if rgb { Sensor::Rgb } else { Sensor::Depth };
        let on = RenderConfig { tile_width: 24, tile_height: 24, sensor, ..RenderConfig::default() };
        let off = RenderConfig { culling: false, ..on };
        let a = render_batch(&views, &res, &on).unwrap();
        let b = render_batch(&views, &res, &off).unwrap();
        prop_assert_eq!(&a.depth, &b.depth);
        prop_assert_eq!(&a.color, &b.color);
    }

    #[test]
    fn views_write_only_their_own_tile(seed in any::<u64>(), n in 1usize..11) {
        let assets = small_scenes(60..63);
        let res = resolver(&assets);
        let views = random_views(&assets, n, &mut ChaCha8Rng::seed_from_u64(seed));
        let cfg = RenderConfig { tile_width: 16, tile_height: 12, ..RenderConfig::default() };
        let sentinel = -7.5;
        let mut frame = Megaframe::new(n, 16, 12, false, sentinel);
        render_batch_into(&views, &res, &cfg, &mut frame).unwrap();
        let mut owned = vec![false; frame.depth.len()];
        for (i, v) in views.iter().enumerate() {
            let alone = render_batch(std::slice::from_ref(v), &res, &cfg).unwrap();
            prop_assert_eq!(frame.tile_depth(i), alone.tile_depth(0));
            for y in 0..12 {
                for x in 0..16 {
                    owned[frame.pixel_index(i, x, y)] = true;
                }
            }
        }
        for (k, d) in frame.depth.iter().enumerate() {
            if !owned[k] {
                prop_assert_eq!(*d, sentinel);
            }
        }
    }

    #[test]
    fn frames_do_not_depend_on_scheduling(seed in any::<u64>(), n in 1usize..20, workers in 2usize..5) {
        let assets = small_scenes(60..63);
        let res = resolver(&assets);
        let views = random_views(&assets, n, &mut ChaCha8Rng::seed_from_u64(seed));
        let base = RenderConfig { tile_width: 20, tile_height: 20, sensor: Sensor::Rgb, pipelined: false, ..RenderConfig::default() };
        let reference = render_batch(&views, &res, &base).unwrap();
        for cfg in [
            RenderConfig { pipelined: true, workers: 1, ..base },
            RenderConfig { pipelined: true, workers, ..base },
        ] {
            let f = render_batch(&views, &res, &cfg).unwrap();
            prop_assert_eq!(&f.depth, &reference.depth);
            prop_assert_eq!(&f.color, &reference.color);
        }
    }
}

/// A scene holding a single render triangle given in eye coordinates of a
/// camera at the origin facing −z.
fn triangle_scene(eye: [DVec3; 3]) -> SceneAsset {
    let world = |p: DVec3| DVec3::new(p.x, p.y, -p.z);
    let mut vertices: Vec<DVec3> = eye.iter().map(|&p| world(p)).collect();
    vertices.push(DVec3::new(-30.0, -30.0, -30.0));
    vertices.push(DVec3::new(30.0, 30.0, 30.0));
    let nav = NavMesh::new(
        vec![
            DVec3::new(-1.0, 0.0, -1.0),
            DVec3::new(1.0, 0.0, -1.0),
            DVec3::new(0.0, 0.0, 1.0),
        ],
        vec![[0, 1, 2]],
    )
    .unwrap();
    SceneAsset::new(vertices, vec![[0, 1, 2]], None, nav).unwrap()
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn depth_matches_ray_plane_intersection(
        zs in proptest::collection::vec(1.0f64..10.0, 3),
        us in proptest::collection::vec(-1.3f64..1.3, 6),
    ) {
        let size = 48usize;
        let tan = (45f64).to_radians().tan();
        let eye: Vec<DVec3> = (0..3).map(|k| DVec3::new(us[2 * k] * tan * zs[k], us[2 * k + 1] * tan * zs[k], zs[k])).collect();
        let focal = size as f64 / 2.0 / tan;
        let screen: Vec<(f64, f64)> = eye
            .iter()
            .map(|p| (size as f64 / 2.0 + focal * p.x / p.z, size as f64 / 2.0 - focal * p.y / p.z))
            .collect();
        let area2 = (screen[1].0 - screen[0].0) * (screen[2].1 - screen[0].1) - (screen[2].0 - screen[0].0) * (screen[1].1 - screen[0].1);
        prop_assume!(area2.abs() > 8.0);

        let asset = Arc::new(triangle_scene([eye[0], eye[1], eye[2]]));
        let res = resolver(std::slice::from_ref(&asset));
        let view = CameraView::new(asset.id(), DVec3::ZERO, 0.0);
        let cfg = RenderConfig { tile_width: size, tile_height: size, backface_culling: false, ..RenderConfig::default() };
        let frame = render_batch(&[view], &res, &cfg).unwrap();
        let depth = frame.tile_depth(0);

        let normal = (eye[1] - eye[0]).cross(eye[2] - eye[0]);
        // signed distance in pixels from screen point to each edge, positive inside
        let edge_dist = |x: f64, y: f64| -> f64 {
            (0..3)
                .map(|k| {
                    let (a, b) = (screen[k], screen[(k + 1) % 3]);
                    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
                    area2.signum() * ((b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)) / len
                })
                .fold(f64::INFINITY, f64::min)
        };
        let mut checked = 0;
        for j in 0..size {
            for i in 0..size {
                let (x, y) = (i as f64 + 0.5, j as f64 + 0.5);
                let d = edge_dist(x, y);
                let got = f64::from(depth[j * size + i]);
                if d > 1.0 {
                    let ray = DVec3::new((x - size as f64 / 2.0) / focal, (size as f64 / 2.0 - y) / focal, 1.0);
                    let z = normal.dot(eye[0]) / normal.dot(ray);
                    prop_assert!((got - z).abs() < 1e-3, "pixel ({}, {}): {} vs {}", i, j, got, z);
                    checked += 1;
                } else if d < -1.0 {
                    prop_assert_eq!(got, view.far);
                }
            }
        }
        prop_assume!(checked > 0);
    }
}

// ---------------------------------------------------------------- nn

fn tiny_policy() -> PolicyConfig {
    PolicyConfig {
        resolution: 8,
        stages: vec![16, 32],
        embed: 8,
        hidden: 6,
        ..PolicyConfig::default()
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi) as f32).collect()).unwrap()
}

proptest! {
    #![proptest_config(cfg(12))]

    #[test]
    fn fresh_networks_ignore_their_residual_branches(seed in any::<u64>(), n in 1usize..4) {
        let cfg = tiny_policy();
        let policy = Policy::<f32>::new(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = random_tensor(&[n, 1, 8, 8], &mut rng, 0.0, 1.0);
        let compass = random_tensor(&[n, 3], &mut rng, -1.0, 1.0);
        let state = RecurrentState {
            h: random_tensor(&[n, cfg.hidden], &mut rng, -0.5, 0.5),
            c: random_tensor(&[n, cfg.hidden], &mut rng, -0.5, 0.5),
        };
        let starts: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let full = policy.forward(&obs, &compass, &state, &starts).unwrap();
        let ablated = policy.forward_ablated(&obs, &compass, &state, &starts).unwrap();
        prop_assert_eq!(full.logits.data(), ablated.logits.data());
        prop_assert_eq!(full.value, ablated.value);
        prop_assert_eq!(full.state.h.data(), ablated.state.h.data());
    }

    #[test]
    fn squeeze_excite_gates_lie_strictly_inside_the_unit_interval(seed in any::<u64>(), spread in 0.0f64..0.5) {
        let mut policy = Policy::<f64>::new(&tiny_policy(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in policy.params_mut().iter_mut() {
            for x in p.tensor.data_mut() {
                *x += rng.gen_range(-spread..=spread);
            }
        }
        let obs = Tensor::from_vec(&[2, 1, 8, 8], (0..128).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        for g in policy.se_gates(&obs).unwrap() {
            prop_assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn stepping_matches_the_unrolled_sequence(seed in any::<u64>(), n in 1usize..4) {
        let cfg = tiny_policy();
        let mut policy = Policy::<f32>::new(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in policy.params_mut().iter_mut() {
            for x in p.tensor.data_mut() {
                *x += rng.gen_range(-0.1..0.1);
            }
        }
        let t = 8;
        let obs = random_tensor(&[t * n, 1, 8, 8], &mut rng, 0.0, 1.0);
        let compass = random_tensor(&[t * n, 3], &mut rng, -1.0, 1.0);
        let starts: Vec<bool> = (0..t * n).map(|_| rng.gen_bool(0.2)).collect();
        let initial = RecurrentState {
            h: random_tensor(&[n, cfg.hidden], &mut rng, -0.5, 0.5),
            c: random_tensor(&[n, cfg.hidden], &mut rng, -0.5, 0.5),
        };

        let mut tape = Tape::new(policy.params());
        let input = SequenceInput { obs: &obs, compass: &compass, starts: &starts, initial: &initial, steps: t };
        let r = policy.record(&mut tape, &input, false).unwrap();
        let unrolled = tape.value(r.logits).data().to_vec();
        let unrolled_values = tape.value(r.values).data().to_vec();

        let mut state = initial.clone();
        for step in 0..t {
            let out = policy
                .forward(&obs.rows(step * n, n), &compass.rows(step * n, n), &state, &starts[step * n..(step + 1) * n])
                .unwrap();
            let a = cfg.actions;
            for (k, (x, y)) in out.logits.data().iter().zip(&unrolled[step * n * a..(step + 1) * n * a]).enumerate() {
                prop_assert!((x - y).abs() < 1e-5, "step {} logit {}: {} vs {}", step, k, x, y);
            }
            for (x, y) in out.value.iter().zip(&unrolled_values[step * n..(step + 1) * n]) {
                prop_assert!((x - y).abs() < 1e-5);
            }
            state = out.state;
        }
        prop_assert_eq!(state.h.shape(), &[n, cfg.hidden][..]);
    }
}

#[test]
fn network_has_no_normalization_layers() {
    let policy = Policy::<f32>::new(&PolicyConfig::default(), 0).unwrap();
    for kind in policy.layer_kinds() {
        assert!(!kind.contains("norm"), "normalization layer {kind}");
    }
    for p in policy.params().iter() {
        let name = p.name.to_lowercase();
        assert!(!name.contains("norm") && !name.contains("running"), "parameter {name}");
    }
}

// ---------------------------------------------------------------- train

fn param_set(shapes: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> ParamSet<f64> {
    let mut ps = ParamSet::default();
    for (k, &n) in shapes.iter().enumerate() {
        let group = if k % 3 == 2 {
            ParamGroup::NoTrust
        } else {
            ParamGroup::Default
        };
        let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        ps.push(format!("p{k}"), Tensor::from_vec(&[n], data).unwrap(), group);
    }
    ps
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn trust_ratios_stay_within_the_clip_range(
        seed in any::<u64>(),
        shapes in proptest::collection::vec(1usize..20, 1..6),
        rho in 0.001f64..1.0,
        param_scale in 1e-4f64..50.0,
        grad_scale in 1e-6f64..1e3,
        steps in 1usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = param_set(&shapes, &mut rng, param_scale);
        let mut state = OptimizerState::new(&params);
        let cfg = LambConfig { rho, ..LambConfig::default() };
        for _ in 0..steps {
            let grads: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|&n| Tensor::from_vec(&[n], (0..n).map(|_| rng.gen_range(-grad_scale..grad_scale)).collect()).unwrap())
                .collect();
            let stats = lamb_step(&mut params, &grads, &mut state, 1e-3, &cfg);
            for (r, p) in stats.trust_ratios.iter().zip(params.iter()) {
                if p.group == ParamGroup::Default {
                    prop_assert!(*r >= rho * (1.0 - 1e-12) && *r <= (1.0 + 1e-12) / rho, "ratio {} outside [{}, {}]", r, rho, 1.0 / rho);
                } else {
                    prop_assert_eq!(*r, 1.0);
                }
            }
        }
    }

    #[test]
    fn clipped_gradients_respect_the_norm_bound(
        seed in any::<u64>(),
        shapes in proptest::collection::vec(1usize..30, 1..5),
        scale in 1e-4f64..1e4,
        max_norm in 0.01f64..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grads: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|&n| Tensor::from_vec(&[n], (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap())
            .collect();
        let before = clip_grad_norm(&mut grads, max_norm);
        let after = grads.iter().flat_map(|g| g.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(after <= max_norm + 1e-6);
        if before <= max_norm {
            prop_assert!((after - before).abs() <= 1e-12 * before.max(1.0));
        }
    }

    #[test]
    fn greedy_actions_ignore_temperature(
        logits in proptest::collection::vec(-20.0f32..20.0, 4..64),
        temperature in 0.01f32..100.0,
    ) {
        let rows = logits.len() / 4;
        let t = Tensor::from_vec(&[rows, 4], logits[..rows * 4].to_vec()).unwrap();
        let scaled = Tensor::from_vec(&[rows, 4], t.data().iter().map(|x| x / temperature).collect()).unwrap();
        let (a, b) = (argmax_rows(&t), argmax_rows(&scaled));
        for r in 0..rows {
            // scaling can only merge near-ties through rounding
            let row = &t.data()[r * 4..r * 4 + 4];
            prop_assert!(a[r] == b[r] || (row[a[r]] - row[b[r]]).abs() <= 1e-5 * row[a[r]].abs().max(1.0));
        }
    }
}
