//! Acceptance report: one line per criterion.
//!
//! Runs as a plain binary (`harness = false`). The process fails when a
//! deterministic criterion fails. Throughput criterion 9 is reported with its
//! measured value but does not fail the run, and criterion 10 only runs with
//! `BPS_ACCEPT_LONG=1`.

mod common;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;
use std::time::Instant;

use glam::DVec2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use batchsim::navsim::{geodesic_distance, Action, SimBatch, TaskConfig, ACTION_COUNT};
use batchsim::nn::{ParamGroup, ParamSet, Policy, PolicyConfig, RecurrentState, Tensor};
use batchsim::render::{
    camera_trace, render_batch, render_bench, BenchOptions, CameraView, RenderConfig, Sensor, DEFAULT_EYE_HEIGHT,
};
use batchsim::rollout::{
    evaluate, fps_benchmark, train_run, Agent, BatchConfig, EvalConfig, FpsOptions, SceneSet, TrainSpec,
};
use batchsim::scene::{generate_scene, AssetStore, GeneratedSource, GeneratorSpec, NavMesh, SceneAsset, SceneId};
use batchsim::train::{gae, lamb_step, lr_schedule, scale_lr, LambConfig, OptimizerState, TrainConfig};

enum Outcome {
    Pass(String),
    Fail(String),
    Skipped(String),
}

use Outcome::{Fail, Pass, Skipped};

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

// ---------------------------------------------------------------- 1, 2

/// Scalar Lamb update of one tensor, written from the update rule.
struct RefTensor {
    theta: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    trust: bool,
}

#[derive(Default)]
struct Branches {
    capped: usize,
    clipped_low: usize,
    clipped_high: usize,
}

fn reference_lamb(t: &mut RefTensor, g: &[f64], step: u64, lr: f64, cfg: &LambConfig, hits: &mut Branches) {
    let bias1 = 1.0 - cfg.beta1.powf(step as f64);
    let bias2 = 1.0 - cfg.beta2.powf(step as f64);
    let mut u = vec![0.0; g.len()];
    for i in 0..g.len() {
        t.m[i] = cfg.beta1 * t.m[i] + (1.0 - cfg.beta1) * g[i];
        t.v[i] = cfg.beta2 * t.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let s = (t.m[i] / bias1) / ((t.v[i] / bias2).sqrt() + cfg.eps);
        u[i] = if t.trust { s + cfg.weight_decay * t.theta[i] } else { s };
    }
    let r = if t.trust {
        let norm_theta = t.theta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm_u = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let phi = if norm_theta > cfg.phi_cap {
            hits.capped += 1;
            cfg.phi_cap
        } else {
            norm_theta
        };
        if norm_u == 0.0 {
            1.0
        } else {
            let raw = phi / norm_u;
            if raw < cfg.rho {
                hits.clipped_low += 1;
                cfg.rho
            } else if raw > 1.0 / cfg.rho {
                hits.clipped_high += 1;
                1.0 / cfg.rho
            } else {
                raw
            }
        }
    } else {
        1.0
    };
    for i in 0..g.len() {
        t.theta[i] -= lr * r * u[i];
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn log_scale(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    10f64.powf(rng.gen_range(lo..hi))
}

fn lamb_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut hits = Branches::default();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let cfg = LambConfig {
            weight_decay: [0.0, 1e-2, 0.1][rng.gen_range(0..3)],
            rho: log_scale(&mut rng, -3.0, -0.5),
            ..LambConfig::default()
        };
        let count = rng.gen_range(1..5);
        let mut params = ParamSet::default();
        let mut refs = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut grads = Vec::new();
        for k in 0..count {
            let n = rng.gen_range(1..24);
            let trust = rng.gen_bool(0.8);
            let theta = {
                let scale = log_scale(&mut rng, -4.0, 2.0);
                random_vec(&mut rng, n, scale)
            };
            let mk = {
                let scale = log_scale(&mut rng, -4.0, 1.0);
                random_vec(&mut rng, n, scale)
            };
            let vk: Vec<f64> = (0..n).map(|_| log_scale(&mut rng, -10.0, 1.0)).collect();
            grads.push({
                let scale = log_scale(&mut rng, -5.0, 2.0);
                random_vec(&mut rng, n, scale)
            });
            let group = if trust {
                ParamGroup::Default
            } else {
                ParamGroup::NoTrust
            };
            params.push(format!("t{k}"), Tensor::from_vec(&[n], theta.clone()).unwrap(), group);
            m.push(Tensor::from_vec(&[n], mk.clone()).unwrap());
            v.push(Tensor::from_vec(&[n], vk.clone()).unwrap());
            refs.push(RefTensor {
                theta,
                m: mk,
                v: vk,
                trust,
            });
        }
        let step: u64 = rng.gen_range(0..60);
        let lr = log_scale(&mut rng, -5.0, -1.0);
        let mut state = OptimizerState { m, v, step };
        let g: Vec<Tensor<f64>> = grads
            .iter()
            .map(|g| Tensor::from_vec(&[g.len()], g.clone()).unwrap())
            .collect();
        lamb_step(&mut params, &g, &mut state, lr, &cfg);
        for (k, r) in refs.iter_mut().enumerate() {
            reference_lamb(r, &grads[k], step + 1, lr, &cfg, &mut hits);
            let got = params.tensor(k).data();
            for (a, b) in [(got, &r.theta), (state.m[k].data(), &r.m), (state.v[k].data(), &r.v)] {
                for (x, y) in a.iter().zip(b.iter()) {
                    worst = worst.max((x - y).abs() / y.abs().max(1.0));
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "max error {worst:.1e}, phi cap hit {}, rho clip hit {} low / {} high, {secs:.2} s",
        hits.capped, hits.clipped_low, hits.clipped_high
    );
    let clipped = hits.clipped_low + hits.clipped_high;
    verdict(
        worst <= 1e-12
            && hits.capped >= 50
            && clipped >= 50
            && hits.clipped_low >= 1
            && hits.clipped_high >= 1
            && secs < 10.0,
        detail,
    )
}

fn adamw_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = LambConfig {
        rho: 1.0,
        ..LambConfig::default()
    };
    let sizes = [7usize, 1, 33, 4];
    let mut params = ParamSet::default();
    let mut theta = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (k, &n) in sizes.iter().enumerate() {
        let group = if k == 1 {
            ParamGroup::NoTrust
        } else {
            ParamGroup::Default
        };
        let x = random_vec(&mut rng, n, 3.0);
        params.push(format!("p{k}"), Tensor::from_vec(&[n], x.clone()).unwrap(), group);
        theta.push(x);
        m.push(vec![0.0; n]);
        v.push(vec![0.0; n]);
    }
    let mut state = OptimizerState::new(&params);
    let lr = 1e-2;
    let mut worst: f64 = 0.0;
    for step in 1..=1000u64 {
        let grads: Vec<Vec<f64>> = sizes.iter().map(|&n| random_vec(&mut rng, n, 1.0)).collect();
        let g: Vec<Tensor<f64>> = grads
            .iter()
            .map(|g| Tensor::from_vec(&[g.len()], g.clone()).unwrap())
            .collect();
        lamb_step(&mut params, &g, &mut state, lr, &cfg);
        for k in 0..sizes.len() {
            // decoupled weight decay on trust-group tensors only
            let decay = if k == 1 { 0.0 } else { cfg.weight_decay };
            for i in 0..sizes[k] {
                m[k][i] = cfg.beta1 * m[k][i] + (1.0 - cfg.beta1) * grads[k][i];
                v[k][i] = cfg.beta2 * v[k][i] + (1.0 - cfg.beta2) * grads[k][i] * grads[k][i];
                let mh = m[k][i] / (1.0 - cfg.beta1.powf(step as f64));
                let vh = v[k][i] / (1.0 - cfg.beta2.powf(step as f64));
                theta[k][i] -= lr * (mh / (vh.sqrt() + cfg.eps) + decay * theta[k][i]);
                let got = params.tensor(k).data()[i];
                worst = worst.max((got - theta[k][i]).abs() / theta[k][i].abs().max(1.0));
            }
        }
    }
    verdict(worst <= 1e-12, format!("max error {worst:.1e} over 1000 steps"))
}

// ---------------------------------------------------------------- 3

fn gae_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=32);
        let gamma = rng.gen_range(0.5..=1.0);
        let lambda = rng.gen_range(0.0..=1.0);
        let rewards = random_vec(&mut rng, len, 2.0);
        let values = random_vec(&mut rng, len + 1, 5.0);
        let dones: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.15)).collect();
        let (adv, ret) = gae(&rewards, &values, &dones, 1, len, gamma, lambda).unwrap();
        for t in 0..len {
            let mut expected = 0.0;
            let mut weight = 1.0;
            for k in t..len {
                let live = if dones[k] { 0.0 } else { 1.0 };
                let delta = rewards[k] + gamma * values[k + 1] * live - values[k];
                expected += weight * delta;
                if dones[k] {
                    break;
                }
                weight *= gamma * lambda;
            }
            worst = worst
                .max((adv[t] - expected).abs())
                .max((ret[t] - (expected + values[t])).abs());
        }
    }
    verdict(worst <= 1e-10, format!("max error {worst:.1e} over 1000 sequences"))
}

// ---------------------------------------------------------------- 4, 5

fn gradient_checks() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut worst_layer = "";
    let mut min_samples = usize::MAX;
    let mut layers = 0;
    let mut vanished = Vec::new();
    let mut short = Vec::new();
    for seed in 0..10 {
        let checks = common::gradient_check(seed, 10);
        layers = checks.len();
        for c in checks {
            min_samples = min_samples.min(c.samples);
            if c.samples < c.available.min(10) {
                short.push(c.layer);
            }
            if c.max_abs_gradient == 0.0 {
                vanished.push(c.layer);
            }
            if c.max_rel_error > worst {
                worst = c.max_rel_error;
                worst_layer = c.layer;
            }
        }
    }
    verdict(
        worst < 1e-4 && vanished.is_empty() && short.is_empty(),
        format!(
            "{layers} layer types x 10 seeds, 10 entries per type (all of a smaller type, minimum {min_samples}), \
             worst relative error {worst:.1e} ({worst_layer}), under-sampled {short:?}"
        ),
    )
}

fn fixup_identity() -> Outcome {
    let cfg = PolicyConfig::default();
    let mut mismatches = 0;
    for seed in 0..3u64 {
        let policy = Policy::<f32>::new(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3;
        let rand = |rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32| {
            let len = shape.iter().product();
            Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
        };
        let obs = rand(
            &mut rng,
            &[n, cfg.in_channels, cfg.resolution, cfg.resolution],
            0.0,
            1.0,
        );
        let compass = rand(&mut rng, &[n, 3], -1.0, 1.0);
        let state = RecurrentState {
            h: rand(&mut rng, &[n, cfg.hidden], -0.5, 0.5),
            c: rand(&mut rng, &[n, cfg.hidden], -0.5, 0.5),
        };
        let starts = vec![false, true, false];
        let full = policy.forward(&obs, &compass, &state, &starts).unwrap();
        let ablated = policy.forward_ablated(&obs, &compass, &state, &starts).unwrap();
        let same = full.logits.data() == ablated.logits.data()
            && full.value == ablated.value
            && full.state.h.data() == ablated.state.h.data()
            && full.state.c.data() == ablated.state.c.data();
        mismatches += usize::from(!same);
    }
    verdict(
        mismatches == 0,
        format!("default network, 3 seeds, {mismatches} mismatching outputs"),
    )
}

// ---------------------------------------------------------------- 6, 7

fn scene_pool(count: u64, first: u64, spec: &GeneratorSpec) -> Vec<Arc<SceneAsset>> {
    (first..first + count)
        .map(|s| Arc::new(generate_scene(s, spec).unwrap()))
        .collect()
}

fn culling_invariance() -> Outcome {
    let assets = scene_pool(10, 100, &GeneratorSpec::default());
    let resolver: HashMap<SceneId, Arc<SceneAsset>> = assets.iter().map(|a| (a.id(), Arc::clone(a))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut differing = 0;
    for pair in 0..100 {
        let n = rng.gen_range(1..9);
        let views: Vec<CameraView> = (0..n)
            .map(|_| {
                let a = &assets[rng.gen_range(0..assets.len())];
                let p = a.navmesh().sample_point(rng.gen(), rng.gen(), rng.gen());
                CameraView::for_agent(a.id(), p, rng.gen_range(-3.2..3.2), DEFAULT_EYE_HEIGHT)
            })
            .collect();
        let sensor = if pair % 2 == 0 { Sensor::Depth } else { Sensor::Rgb };
        let on = RenderConfig {
            tile_width: 64,
            tile_height: 64,
            sensor,
            ..RenderConfig::default()
        };
        let off = RenderConfig { culling: false, ..on };
        let a = render_batch(&views, &resolver, &on).unwrap();
        let b = render_batch(&views, &resolver, &off).unwrap();
        let same_depth = a.depth.iter().zip(&b.depth).all(|(x, y)| x.to_bits() == y.to_bits());
        differing += usize::from(!(same_depth && a.color == b.color));
    }
    verdict(differing == 0, format!("100 batches at 64x64, {differing} differ"))
}

fn worker_equivalence() -> Outcome {
    let assets = scene_pool(
        6,
        200,
        &GeneratorSpec {
            cells_x: 4,
            cells_z: 4,
            ..GeneratorSpec::default()
        },
    );
    let max_workers = std::thread::available_parallelism().map_or(1, |n| n.get()).max(4);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut differing = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=256);
        let seed = rng.gen();
        let task = TaskConfig {
            max_steps: rng.gen_range(5..40),
            ..TaskConfig::default()
        };
        let mut one = SimBatch::from_assets(&assets, n, seed, task.clone(), 1).unwrap();
        let mut many = SimBatch::from_assets(&assets, n, seed, task, max_workers).unwrap();
        let mut same = one.snapshot() == many.snapshot();
        for _ in 0..10 {
            let actions: Vec<Action> = (0..n).map(|_| Action::ALL[rng.gen_range(0..ACTION_COUNT)]).collect();
            let a = one.simulate_batch(&actions).unwrap().to_vec();
            let b = many.simulate_batch(&actions).unwrap().to_vec();
            same &= a == b;
        }
        same &= one.snapshot() == many.snapshot();
        differing += usize::from(!same);
    }
    verdict(
        differing == 0,
        format!("100 batches, 1 vs {max_workers} workers, {differing} differ"),
    )
}

// ---------------------------------------------------------------- 8

const GRID: f64 = 0.02;

/// Free nodes of a lattice over the mesh bounds.
struct Lattice {
    origin: DVec2,
    nx: usize,
    nz: usize,
    free: Vec<bool>,
}

impl Lattice {
    fn new(mesh: &NavMesh) -> Self {
        let b = mesh.bounds();
        let origin = DVec2::new(b.min.x, b.min.z);
        let nx = ((b.max.x - b.min.x) / GRID).ceil() as usize + 1;
        let nz = ((b.max.z - b.min.z) / GRID).ceil() as usize + 1;
        let mut free = vec![false; nx * nz];
        for j in 0..nz {
            for i in 0..nx {
                free[j * nx + i] = mesh.contains(origin + DVec2::new(i as f64, j as f64) * GRID);
            }
        }
        Self { origin, nx, nz, free }
    }

    fn point(&self, k: usize) -> DVec2 {
        self.origin + DVec2::new((k % self.nx) as f64, (k / self.nx) as f64) * GRID
    }

    fn cell(&self, p: DVec2) -> (isize, isize) {
        let q = (p - self.origin) / GRID;
        (q.x.round() as isize, q.y.round() as isize)
    }

    fn index(&self, i: isize, j: isize) -> Option<usize> {
        (i >= 0 && j >= 0 && (i as usize) < self.nx && (j as usize) < self.nz)
            .then(|| j as usize * self.nx + i as usize)
    }

    fn free_at(&self, i: isize, j: isize) -> bool {
        self.index(i, j).is_some_and(|k| self.free[k])
    }

    /// Free nodes within `radius` cells of `p` that `p` sees directly.
    fn links(&self, mesh: &NavMesh, p: DVec2, radius: isize) -> Vec<(usize, f64)> {
        let (ci, cj) = self.cell(p);
        let mut out = Vec::new();
        for dj in -radius..=radius {
            for di in -radius..=radius {
                if let Some(k) = self.index(ci + di, cj + dj) {
                    let q = self.point(k);
                    if self.free[k] && mesh.visible(p, q) {
                        out.push((k, (q - p).length()));
                    }
                }
            }
        }
        out
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

fn gcd(a: isize, b: isize) -> isize {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Single-source lattice Dijkstra over a 32-direction stencil.
fn lattice_distances(lattice: &Lattice, seeds: &[(usize, f64)]) -> Vec<f64> {
    let stencil: Vec<(isize, isize, f64)> = (-3isize..=3)
        .flat_map(|dj| (-3isize..=3).map(move |di| (di, dj)))
        .filter(|&(di, dj)| (di, dj) != (0, 0) && gcd(di, dj) == 1)
        .map(|(di, dj)| (di, dj, GRID * ((di * di + dj * dj) as f64).sqrt()))
        .collect();
    let mut dist = vec![f64::INFINITY; lattice.free.len()];
    let mut heap = BinaryHeap::new();
    for &(k, d) in seeds {
        if d < dist[k] {
            dist[k] = d;
            heap.push(Entry(d, k));
        }
    }
    while let Some(Entry(d, k)) = heap.pop() {
        if d > dist[k] {
            continue;
        }
        let (i, j) = ((k % lattice.nx) as isize, (k / lattice.nx) as isize);
        for &(di, dj, w) in &stencil {
            let (ti, tj) = (i + di, j + dj);
            let Some(t) = lattice.index(ti, tj) else { continue };
            if !lattice.free[t] || d + w >= dist[t] {
                continue;
            }
            let steps = di.abs().max(dj.abs());
            let clear = (1..steps).all(|s| {
                let f = s as f64 / steps as f64;
                lattice.free_at(
                    i + (di as f64 * f).round() as isize,
                    j + (dj as f64 * f).round() as isize,
                )
            });
            if clear {
                dist[t] = d + w;
                heap.push(Entry(d + w, t));
            }
        }
    }
    dist
}

fn geodesic_accuracy() -> Outcome {
    let spec = GeneratorSpec {
        cells_x: 4,
        cells_z: 4,
        ..GeneratorSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    let mut metric_violations = 0;
    for scene in 0..10u64 {
        let asset = generate_scene(300 + scene, &spec).unwrap();
        let mesh = asset.navmesh();
        let lattice = Lattice::new(mesh);
        let sample = |rng: &mut ChaCha8Rng| mesh.sample_point(rng.gen(), rng.gen(), rng.gen());
        for _ in 0..10 {
            let a = sample(&mut rng);
            let a2 = DVec2::new(a.x, a.z);
            let dist = lattice_distances(&lattice, &lattice.links(mesh, a2, 3));
            for _ in 0..20 {
                let b = sample(&mut rng);
                let b2 = DVec2::new(b.x, b.z);
                let mut oracle = lattice
                    .links(mesh, b2, 3)
                    .iter()
                    .map(|&(k, d)| dist[k] + d)
                    .fold(f64::INFINITY, f64::min);
                if mesh.visible(a2, b2) {
                    oracle = oracle.min((b2 - a2).length());
                }
                let g = geodesic_distance(mesh, a, b);
                worst = worst.max((g - oracle).abs() / oracle.max(1e-9));
                pairs += 1;

                let c = sample(&mut rng);
                let (ab, ba) = (g, geodesic_distance(mesh, b, a));
                let (bc, ac) = (geodesic_distance(mesh, b, c), geodesic_distance(mesh, a, c));
                if (ab - ba).abs() > 1e-6 || ac > ab + bc + 1e-6 {
                    metric_violations += 1;
                }
            }
        }
    }
    verdict(
        worst <= 0.03 && metric_violations == 0,
        format!(
            "{pairs} pairs over 10 scenes, worst deviation {:.2}%, {metric_violations} metric violations",
            worst * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 9

fn render_batching() -> Outcome {
    let t0 = Instant::now();
    let asset = Arc::new(generate_scene(11, &GeneratorSpec::default()).unwrap());
    let trace = camera_trace(&asset, 1024, 3);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let opts = BenchOptions {
        min_frames: 1024,
        warmup_frames: 64,
        repetitions: 3,
        render: RenderConfig {
            workers: cores,
            ..RenderConfig::default()
        },
    };
    let rows = render_bench(asset, &trace, &[1, 256], &[64], &opts).unwrap();
    let (one, many) = (rows[0].fps_median, rows[1].fps_median);
    let ratio = many / one;
    verdict(
        ratio >= 2.0,
        format!(
            "64x64, {cores} core(s): {one:.0} fps at N=1, {many:.0} fps at N=256, ratio {ratio:.2} (median of 3, {:.0} s)",
            t0.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn desk_scale_learning() -> Outcome {
    if std::env::var("BPS_ACCEPT_LONG").as_deref() != Ok("1") {
        return Skipped("set BPS_ACCEPT_LONG=1 to run three 2M-frame training runs".into());
    }
    let spec = GeneratorSpec::default();
    let train: Vec<SceneAsset> = (0..16).map(|s| generate_scene(5000 + s, &spec).unwrap()).collect();
    let held_out = scene_pool(4, 6000, &spec);
    let task = TaskConfig {
        max_goal_geodesic: 8.0,
        ..TaskConfig::default()
    };
    let batch = BatchConfig {
        envs: 64,
        scenes: 4,
        rollout_len: 32,
        task,
        ..BatchConfig::default()
    };
    let mut passing = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let run = TrainSpec {
            batch: batch.clone(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            total_frames: 2_000_000,
            checkpoint_every: 0,
            seed,
        };
        let source = GeneratedSource::new(train.iter().cloned());
        let scenes = SceneSet {
            ids: source.ids(),
            source: Arc::new(source),
        };
        let dir = tempfile::tempdir().unwrap();
        let summary = train_run(&run, scenes, Some(dir.path()), false, |_| {}).unwrap();
        let (policy, _) = batchsim::rollout::load_checkpoint_policy(summary.checkpoint.as_deref().unwrap()).unwrap();
        let eval = EvalConfig {
            envs: 16,
            episodes: 256,
            seed: 77,
            batch: BatchConfig {
                envs: 16,
                ..batch.clone()
            },
        };
        let report = evaluate(Agent::Greedy(&policy), &held_out, &eval).unwrap();
        let ok = report.success >= 0.9 && report.spl >= 0.6;
        passing += usize::from(ok);
        lines.push(format!(
            "seed {seed}: Success {:.3} SPL {:.3}",
            report.success, report.spl
        ));
    }
    verdict(passing >= 2, lines.join(", "))
}

// ---------------------------------------------------------------- 11

fn lr_arithmetic() -> Outcome {
    let (envs, len, minibatches) = (1024usize, 32usize, 2usize);
    let b = envs * len / minibatches;
    let factor = scale_lr(1.0, b, 256);
    let depth = scale_lr(5e-4, b, 256);
    let endpoints = [
        lr_schedule(depth, 5e-4, 0.0) == depth,
        lr_schedule(depth, 5e-4, 0.5) == 5e-4,
        lr_schedule(depth, 5e-4, 1.0) == 5e-4,
        (lr_schedule(depth, 5e-4, 0.25) - (5e-4 + (depth - 5e-4) / 2.0)).abs() < 1e-15,
        scale_lr(5e-4, 256, 256) == 5e-4,
        scale_lr(1.0, 1024, 256) == 2.0,
    ];
    verdict(
        b == 16384 && factor == 8.0 && depth == 4e-3 && endpoints.iter().all(|&x| x),
        format!(
            "B={b}, factor {factor}, depth lr {depth:e}, schedule endpoints exact: {}",
            endpoints.iter().all(|&x| x)
        ),
    )
}

// ---------------------------------------------------------------- 12

fn residency_stress() -> Outcome {
    let assets = scene_pool(
        12,
        400,
        &GeneratorSpec {
            cells_x: 3,
            cells_z: 3,
            ..GeneratorSpec::default()
        },
    );
    let ids: Vec<SceneId> = assets.iter().map(|a| a.id()).collect();
    let source = Arc::new(GeneratedSource::new(assets.iter().map(|a| SceneAsset::clone(a))));
    let (k, cap) = (4usize, 32usize);
    let store = AssetStore::new(k, cap, source);
    let task = TaskConfig {
        max_steps: 6,
        ..TaskConfig::default()
    };
    store.rotate(&ids[..k]);
    store.sync();
    let n = 96;
    let mut sim = SimBatch::with_store(store.clone(), n, 12, task, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut episodes, mut steps, mut violations) = (0usize, 0usize, 0usize);
    let (mut max_residents, mut max_refs) = (0usize, 0usize);
    let mut scenes_seen = std::collections::BTreeSet::new();
    while episodes < 10_000 {
        if rng.gen_bool(0.1) {
            let start = rng.gen_range(0..ids.len());
            let window: Vec<SceneId> = (0..k).map(|j| ids[(start + j) % ids.len()]).collect();
            store.rotate(&window);
        }
        if rng.gen_bool(0.05) {
            store.sync();
        }
        let actions: Vec<Action> = (0..n).map(|_| Action::ALL[rng.gen_range(0..ACTION_COUNT)]).collect();
        episodes += sim.simulate_batch(&actions).unwrap().iter().filter(|r| r.done).count();
        steps += 1;
        let snap = store.snapshot();
        let refs = snap.residents.iter().map(|r| r.1).max().unwrap_or(0);
        max_residents = max_residents.max(snap.residents.len());
        max_refs = max_refs.max(refs);
        violations += usize::from(snap.residents.len() > k || refs > cap);
        scenes_seen.extend(sim.envs().iter().map(|e| e.scene_id()));
    }
    verdict(
        violations == 0,
        format!(
            "{episodes} episodes in {steps} steps over {} scenes, max residents {max_residents}/{k}, max refcount {max_refs}/{cap}",
            scenes_seen.len()
        ),
    )
}

// ---------------------------------------------------------------- 13

fn breakdown_accounting() -> Outcome {
    let mut spec = common::tiny_spec(16, 8, 4);
    spec.batch.resolution = 32;
    spec.policy.resolution = 32;
    let scenes = common::scene_set(common::small_scenes(4, 500));
    let opts = FpsOptions {
        inference_batches: 24,
        warmup_iterations: 1,
    };
    let report = fps_benchmark(&spec, scenes, &opts).unwrap();
    let json = serde_json::to_value(&report).unwrap();
    let categories = ["sim_render_us", "inference_us", "learning_us"];
    let present = categories
        .iter()
        .all(|c| json["breakdown"][c].as_f64().is_some_and(|v| v > 0.0));
    verdict(
        report.accounted >= 0.9 && present,
        format!(
            "{:.0} fps, stages cover {:.1}% of wall clock, categories sim+render / inference / learning present: {present}",
            report.fps,
            report.accounted * 100.0
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, bool, fn() -> Outcome); 13] = [
        (1, "lamb matches scalar reference", true, lamb_oracle),
        (2, "rho = 1 reduces to AdamW", true, adamw_reduction),
        (3, "GAE matches brute-force sums", true, gae_oracle),
        (4, "policy gradients match finite differences", true, gradient_checks),
        (5, "fixup identity at initialization", true, fixup_identity),
        (6, "culling invariance", true, culling_invariance),
        (7, "batched simulation independent of workers", true, worker_equivalence),
        (8, "geodesic accuracy and metric properties", true, geodesic_accuracy),
        (9, "renderer batching speedup", false, render_batching),
        (10, "desk-scale learning", true, desk_scale_learning),
        (11, "learning-rate arithmetic", true, lr_arithmetic),
        (12, "residency and share-ratio bounds", true, residency_stress),
        (13, "stage breakdown accounting", true, breakdown_accounting),
    ];
    let mut gating_failures = Vec::new();
    for (id, name, gating, check) in criteria {
        let t0 = Instant::now();
        let outcome = check();
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => ("FAIL", d),
            Skipped(d) => ("SKIPPED", d),
        };
        let note = if !gating && matches!(outcome, Fail(_)) {
            " (throughput, not gating)"
        } else {
            ""
        };
        println!("criterion {id:>2}  {tag:<7}  {name}: {detail}{note}  [{secs:.1} s]");
        if gating && matches!(outcome, Fail(_)) {
            gating_failures.push(id);
        }
    }
    if !gating_failures.is_empty() {
        eprintln!("failing criteria: {gating_failures:?}");
        std::process::exit(1);
    }
}
