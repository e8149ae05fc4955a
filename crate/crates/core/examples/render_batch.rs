//! Render a batch of agent views from one generated scene and report the
//! renderer's throughput at a few batch sizes.

use std::sync::Arc;

use batchsim::render::{camera_trace, render_bench, BenchOptions};
use batchsim::scene::{generate_scene, GeneratorSpec};

fn main() {
    let asset = Arc::new(generate_scene(11, &GeneratorSpec::default()).expect("scene"));
    let trace = camera_trace(&asset, 512, 3);
    let opts = BenchOptions {
        min_frames: 1000,
        ..BenchOptions::default()
    };
    let rows = render_bench(asset, &trace, &[1, 4, 16, 64, 256], &[64], &opts).expect("bench");
    println!("{:>6} {:>6} {:>12}", "batch", "res", "fps");
    for r in rows {
        println!("{:>6} {:>6} {:>12.1}", r.batch, r.resolution, r.fps_median);
    }
}
