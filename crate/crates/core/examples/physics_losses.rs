//! Divergence and momentum terms on analytic fields.
use lieflow::aabb::Aabb;
use lieflow::ad::{ParamStore, Tape, Tensor};
use lieflow::liegroup::{Twist, Vec3};
use lieflow::physics_losses::{divergence_loss, momentum_loss, DivergenceTarget, RegularizerBatch};
use lieflow::se3field::AnalyticTwistField;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let store = ParamStore::new();
    let batch =
        RegularizerBatch::sample(&Aabb::cube(1.0), 64, 4, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
    let rigid = AnalyticTwistField(|_: &Vec3, _: f64| {
        Twist::new(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.2, 0.0, 0.0))
    });
    let expanding = AnalyticTwistField(|p: &Vec3, _: f64| Twist::new(Vec3::zeros(), *p));
    let accelerating = AnalyticTwistField(|_: &Vec3, t: f64| {
        Twist::new(Vec3::zeros(), Vec3::new(0.0, 0.0, 9.81 * t))
    });

    let mut tape = Tape::new(&store);
    for (name, f) in [
        ("rigid", &rigid as &dyn lieflow::se3field::TwistModel),
        ("v = p", &expanding),
    ] {
        let d = divergence_loss(&mut tape, f, &batch, DivergenceTarget::VOnly).unwrap();
        println!("{name}: divergence {:.3e}", tape.value(d).item());
    }
    let a = tape.constant(Tensor::from_rows(&[[0.0, 0.0, 9.81]]));
    let m = momentum_loss(&mut tape, &accelerating, &batch, a).unwrap();
    println!(
        "uniform acceleration: momentum residual {:.3e}",
        tape.value(m).item()
    );
}
