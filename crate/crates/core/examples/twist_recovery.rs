//! Recover frame-to-frame twists from point tracks of the desk scene.
use lieflow::pipeline::fit_twist_cmd;
use lieflow::scenegen::{SceneSpec, TrackSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let spec = SceneSpec::desk();
    let tracks = TrackSet::from_scene(&spec, 0, 50, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let report = fit_twist_cmd(&tracks.to_text(true).unwrap()).unwrap();
    let first = &report.pairs[0];
    println!("frame 0 -> 1: {:.6?}", first.twist);
    println!(
        "max error over {} pairs: {:.2e}",
        report.pairs.len(),
        report.max_error.unwrap()
    );
}
