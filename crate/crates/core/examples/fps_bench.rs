//! End-to-end training throughput with the per-frame cost of each stage.

use std::sync::Arc;

use batchsim::rollout::{fps_benchmark, FpsOptions, SceneSet, TrainSpec};
use batchsim::scene::{generate_scene, GeneratedSource, GeneratorSpec, SceneSource};

fn main() {
    let source = GeneratedSource::new((0..4).map(|s| generate_scene(s, &GeneratorSpec::default()).expect("scene")));
    let scenes = SceneSet {
        ids: source.ids(),
        source: Arc::new(source) as Arc<dyn SceneSource>,
    };
    let mut spec = TrainSpec::default();
    spec.batch.envs = 32;
    spec.batch.rollout_len = 16;
    spec.train.minibatches = 2;
    let r = fps_benchmark(&spec, scenes, &FpsOptions::default()).expect("benchmark");
    let b = r.breakdown;
    println!(
        "{} envs, {} frames in {:.2} s: {:.0} FPS",
        r.envs, r.frames, r.wall_seconds, r.fps
    );
    for (name, us) in [
        ("sim+render", b.sim_render_us),
        ("inference", b.inference_us),
        ("learning", b.learning_us),
    ] {
        println!("{name:>11}: {us:>8.1} us/frame  {:>5.1}%", 100.0 * us / b.total_us());
    }
    println!("stages account for {:.1}% of wall clock", 100.0 * r.accounted);
}
