//! Integrate an analytic twist field and compare the two quadratures.
use lieflow::ad::ParamStore;
use lieflow::liegroup::{Twist, Vec3};
use lieflow::se3field::{integrate_transform, AnalyticTwistField, Integration};

fn main() {
    // Angular speed oscillating in time about the z axis.
    let field = AnalyticTwistField(|p: &Vec3, t: f64| {
        Twist::new(
            Vec3::new(0.0, 0.4, 1.0 + (3.0 * t).sin()),
            Vec3::new(0.1 * p.z, 0.0, 0.2 * t * t),
        )
    });
    let store = ParamStore::new();
    let p = Vec3::new(0.5, 0.0, 0.1);
    let fine = |m| integrate_transform(&field, &store, &p, 0.0, 1.0, 4096, m).unwrap();
    let (tr_ref, pe_ref) = (
        fine(Integration::Trapezoid),
        fine(Integration::ProductOfExponentials),
    );
    for steps in [1, 2, 4, 8, 16] {
        let tr = integrate_transform(&field, &store, &p, 0.0, 1.0, steps, Integration::Trapezoid)
            .unwrap();
        let pe = integrate_transform(
            &field,
            &store,
            &p,
            0.0,
            1.0,
            steps,
            Integration::ProductOfExponentials,
        )
        .unwrap();
        println!(
            "steps {steps:>2}: trapezoid error {:.3e}, product-of-exponentials error {:.3e}",
            tr.max_abs_diff(&tr_ref),
            pe.max_abs_diff(&pe_ref)
        );
    }
}
