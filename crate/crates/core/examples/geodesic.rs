//! Shortest paths on a generated maze: compare geodesic and straight-line
//! distances between random navigable points.

use batchsim::navsim::{geodesic_distance, shortest_path};
use batchsim::scene::{generate_scene, GeneratorSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let asset = generate_scene(3, &GeneratorSpec::default()).expect("scene");
    let mesh = asset.navmesh();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut point = || mesh.sample_point(rng.gen(), rng.gen(), rng.gen());

    println!("{:>9} {:>9} {:>7} {:>9}", "euclid", "geodesic", "ratio", "corners");
    for _ in 0..8 {
        let (a, b) = (point(), point());
        let d = geodesic_distance(mesh, a, b);
        let path = shortest_path(mesh, a, b).expect("connected maze");
        let length: f64 = path.windows(2).map(|w| (w[1] - w[0]).length()).sum();
        assert!((length - d).abs() < 1e-6);
        let straight = (b - a).length();
        println!(
            "{straight:>9.3} {d:>9.3} {:>7.2} {:>9}",
            d / straight.max(1e-9),
            path.len().saturating_sub(2)
        );
    }
}
