//! Generate a small scene set on disk, then reload one scene and check it
//! decodes to the same content hash.
//!
//! `cargo run --example gen_scenes -- [out_dir]`

use std::path::PathBuf;

use batchsim::cli::{gen_scenes, GenScenesOptions};
use batchsim::scene::{load_scene, GeneratorSpec};

fn main() {
    let out_dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("bps_example_scenes"));
    let manifest = gen_scenes(&GenScenesOptions {
        count: 6,
        seed: 100,
        spec: GeneratorSpec::default(),
        val_count: 2,
        out_dir: out_dir.clone(),
    })
    .expect("generate scenes");

    for e in &manifest.scenes {
        let asset = load_scene(out_dir.join(&e.file)).expect("load scene");
        assert_eq!(asset.id(), e.id);
        println!(
            "{}  seed {:>3}  {:>5} triangles  navmesh {:>6.1} m^2  id {}",
            e.file,
            e.seed,
            asset.triangles().len(),
            asset.navmesh().area(),
            &e.id.to_hex()[..12]
        );
    }
    println!("manifests written to {}", out_dir.display());
}
