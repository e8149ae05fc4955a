use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{RolloutError, SceneSet, StageTimings, TrainSpec, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpsOptions {
    /// Inference batches to time; rounded up to whole rollouts.
    pub inference_batches: usize,
    /// Untimed iterations before measuring.
    pub warmup_iterations: usize,
}

impl Default for FpsOptions {
    fn default() -> Self {
        Self {
            inference_batches: 256,
            warmup_iterations: 1,
        }
    }
}

/// End-to-end throughput with its per-frame stage breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub envs: usize,
    pub iterations: usize,
    pub frames: u64,
    pub wall_seconds: f64,
    pub fps: f64,
    /// Mean per-frame cost of each stage over the timed iterations.
    pub breakdown: StageTimings,
    /// Breakdown total over measured wall time per frame.
    pub accounted: f64,
}

/// Measures frames per second of full training iterations (collection and
/// learning) with the stage breakdown.
pub fn fps_benchmark(spec: &TrainSpec, scenes: SceneSet, opts: &FpsOptions) -> Result<FpsReport, RolloutError> {
    let mut spec = spec.clone();
    let l = spec.batch.rollout_len;
    let iterations = opts.inference_batches.div_ceil(l).max(1);
    let total = (iterations + opts.warmup_iterations) as u64 * spec.batch.frames_per_rollout();
    spec.total_frames = spec.total_frames.max(total);
    let mut trainer = Trainer::new(spec.clone(), scenes)?;
    for _ in 0..opts.warmup_iterations {
        trainer.step()?;
    }
    let mut sum = StageTimings::default();
    let start = Instant::now();
    for _ in 0..iterations {
        trainer.step()?;
        let raw = trainer.last_sample();
        sum.sim_render_us += raw.sim_render_us;
        sum.inference_us += raw.inference_us;
        sum.learning_us += raw.learning_us;
    }
    let wall = start.elapsed().as_secs_f64();
    let frames = iterations as u64 * spec.batch.frames_per_rollout();
    let n = iterations as f64;
    let breakdown = StageTimings {
        sim_render_us: sum.sim_render_us / n,
        inference_us: sum.inference_us / n,
        learning_us: sum.learning_us / n,
    };
    let wall_per_frame_us = wall * 1e6 / frames as f64;
    Ok(FpsReport {
        envs: spec.batch.envs,
        iterations,
        frames,
        wall_seconds: wall,
        fps: frames as f64 / wall,
        accounted: breakdown.total_us() / wall_per_frame_us,
        breakdown,
    })
}
