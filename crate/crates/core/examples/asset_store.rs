//! Keep K scenes resident while many environments share them, rotating the
//! resident set between iterations.

use std::sync::Arc;

use batchsim::scene::{generate_scene, AssetStore, GeneratedSource, GeneratorSpec, SceneSource};

fn main() {
    let spec = GeneratorSpec {
        cells_x: 3,
        cells_z: 3,
        ..GeneratorSpec::default()
    };
    let source = Arc::new(GeneratedSource::new(
        (0..8).map(|s| generate_scene(s, &spec).expect("scene")),
    ));
    let ids = source.ids();
    let store = AssetStore::deterministic(2, 4, source as Arc<dyn SceneSource>);
    store.rotate(&ids[..2]);
    store.sync();

    for round in 0..3 {
        let handles: Vec<_> = (0..8).map(|_| store.acquire_next().expect("capacity")).collect();
        let snap = store.snapshot();
        println!(
            "round {round}: {} residents, {} handles out",
            store.resident_count(),
            handles.len()
        );
        println!("  {snap:?}");
        for h in handles {
            store.release(h);
        }
        let next = 2 * (round + 1) % ids.len();
        store.rotate(&ids[next..next + 2]);
        store.sync();
    }
}
