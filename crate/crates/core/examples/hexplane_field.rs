//! Query a randomly initialised HexPlane field.
use lieflow::aabb::Aabb;
use lieflow::ad::ParamStore;
use lieflow::hexplane::{HexPlane, HexPlaneConfig};
use lieflow::liegroup::Vec3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut store = ParamStore::new();
    let cfg = HexPlaneConfig {
        resolution: 16,
        features: 4,
        ..Default::default()
    };
    let field = HexPlane::new(
        &mut store,
        cfg,
        Aabb::cube(1.0),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    println!("{} parameters", store.num_scalars());
    for t in [0.0, 0.5, 1.0] {
        let s = field
            .query_point(&store, &Vec3::new(0.2, -0.1, 0.4), t, &Vec3::z())
            .unwrap();
        println!("t = {t}: sigma {:.4}, rgb {:.3?}", s.sigma, s.rgb);
    }
}
