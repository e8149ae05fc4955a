use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_batch, CameraView, RenderConfig, RenderError, DEFAULT_EYE_HEIGHT};
use crate::scene::{SceneAsset, SceneId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    /// Frames rendered per measurement after warm-up.
    pub min_frames: usize,
    pub warmup_frames: usize,
    pub repetitions: usize,
    pub render: RenderConfig,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            min_frames: 1000,
            warmup_frames: 64,
            repetitions: 3,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub batch: usize,
    pub resolution: usize,
    pub frames: usize,
    pub fps_runs: Vec<f64>,
    pub fps_median: f64,
}

/// Random agent poses on the scene's navmesh.
pub fn camera_trace(asset: &SceneAsset, count: usize, seed: u64) -> Vec<CameraView> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mesh = asset.navmesh();
    (0..count)
        .map(|_| {
            let p = mesh.sample_point(rng.gen(), rng.gen(), rng.gen());
            let h = rng.gen::<f64>() * std::f64::consts::TAU;
            CameraView::for_agent(asset.id(), p, h, DEFAULT_EYE_HEIGHT)
        })
        .collect()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Frames per second for each (batch size, square resolution), each
/// measured over at least `min_frames` frames, median of the repetitions.
pub fn render_bench(
    scene: Arc<SceneAsset>,
    trace: &[CameraView],
    batch_sizes: &[usize],
    resolutions: &[usize],
    opts: &BenchOptions,
) -> Result<Vec<BenchRow>, RenderError> {
    if trace.is_empty() {
        return Err(RenderError::InvalidConfig("camera trace is empty".into()));
    }
    let resolver: HashMap<SceneId, Arc<SceneAsset>> = [(scene.id(), Arc::clone(&scene))].into();
    let mut rows = Vec::new();
    for &res in resolutions {
        for &n in batch_sizes {
            if n == 0 {
                return Err(RenderError::InvalidConfig("batch size must be positive".into()));
            }
            let cfg = RenderConfig {
                tile_width: res,
                tile_height: res,
                ..opts.render
            };
            let mut cursor = 0usize;
            let next_views = |cursor: &mut usize| -> Vec<CameraView> {
                let v = (0..n).map(|k| trace[(*cursor + k) % trace.len()]).collect();
                *cursor = (*cursor + n) % trace.len();
                v
            };
            let mut warm = 0;
            while warm < opts.warmup_frames.max(1) {
                render_batch(&next_views(&mut cursor), &resolver, &cfg)?;
                warm += n;
            }
            let requests = opts.min_frames.max(1).div_ceil(n);
            let batches: Vec<Vec<CameraView>> = (0..requests).map(|_| next_views(&mut cursor)).collect();
            let mut runs = Vec::with_capacity(opts.repetitions.max(1));
            for _ in 0..opts.repetitions.max(1) {
                let t0 = Instant::now();
                for views in &batches {
                    let frame = render_batch(views, &resolver, &cfg)?;
                    std::hint::black_box(&frame);
                }
                let secs = t0.elapsed().as_secs_f64().max(1e-12);
                runs.push((requests * n) as f64 / secs);
            }
            let mut sorted = runs.clone();
            rows.push(BenchRow {
                batch: n,
                resolution: res,
                frames: requests * n,
                fps_median: median(&mut sorted),
                fps_runs: runs,
            });
        }
    }
    Ok(rows)
}
