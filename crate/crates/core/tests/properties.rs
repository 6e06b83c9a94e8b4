use lieflow::aabb::Aabb;
use lieflow::liegroup::{
    apply_point, compose, exp_se3, exp_so3, log_se3, log_so3, RigidTransform, Twist, Vec3,
};
use lieflow::pipeline::RngState;
use lieflow::render::render_weights;
use lieflow::scenegen::{fit_twist, kabsch};
use lieflow::se3field::{posenc, posenc_width, ReferenceSchedule};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PI_MARGIN: f64 = std::f64::consts::PI - 1e-3;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-r..r).prop_map(|a| Vec3::new(a[0], a[1], a[2]))
}

/// Rotation vectors with norm at most π − 1e-3.
fn rotvec() -> impl Strategy<Value = Vec3> {
    (vec3(1.0), 0.0..PI_MARGIN).prop_map(|(d, n)| {
        if d.norm() < 1e-9 {
            Vec3::zeros()
        } else {
            d.normalize() * n
        }
    })
}

fn twist() -> impl Strategy<Value = Twist> {
    (rotvec(), vec3(3.0)).prop_map(|(w, v)| Twist::new(w, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn so3_log_inverts_exp(w in rotvec()) {
        let back = log_so3(&exp_so3(&w)).unwrap();
        prop_assert!((back - w).abs().max() < 1e-9);
    }

    #[test]
    fn se3_log_inverts_exp(xi in twist()) {
        let back = log_se3(&exp_se3(&xi)).unwrap();
        prop_assert!(back.max_abs_diff(&xi) < 1e-9);
    }

    #[test]
    fn exp_is_a_rigid_transform(xi in twist()) {
        let g = exp_se3(&xi);
        prop_assert!(g.orthonormality_error() < 1e-12);
        prop_assert!((g.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_parameter_subgroup(xi in twist(), s in -0.5..0.5f64, t in -0.5..0.5f64) {
        let lhs = compose(&exp_se3(&xi.scaled(s)), &exp_se3(&xi.scaled(t)));
        prop_assert!(lhs.max_abs_diff(&exp_se3(&xi.scaled(s + t))) < 1e-10);
    }

    #[test]
    fn inverse_composes_to_identity(xi in twist(), p in vec3(2.0)) {
        let g = exp_se3(&xi);
        let id = compose(&g, &g.inverse());
        prop_assert!(id.max_abs_diff(&RigidTransform::identity()) < 1e-12);
        prop_assert!((apply_point(&g.inverse(), &apply_point(&g, &p)) - p).abs().max() < 1e-12);
    }

    #[test]
    fn kabsch_recovers_rigid_motion(xi in twist(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Vec3> = (0..12).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let g = exp_se3(&xi);
        let b: Vec<Vec3> = a.iter().map(|p| apply_point(&g, p)).collect();
        prop_assert!(kabsch(&a, &b).unwrap().max_abs_diff(&g) < 1e-9);
        prop_assert!(fit_twist(&a, &b, 1.0).unwrap().max_abs_diff(&xi) < 1e-8);
    }

    #[test]
    fn compositing_weights_partition_unity(
        sig in prop::collection::vec(0.0..50.0f64, 1..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let deltas: Vec<f64> = sig.iter().map(|_| rng.random_range(0.0..0.3)).collect();
        let (w, trans) = render_weights(&sig, &deltas);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() + trans - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aabb_intersection_lies_inside(o in vec3(4.0), d in vec3(1.0), s in 0.0..1.0f64) {
        prop_assume!(d.norm() > 1e-3);
        let b = Aabb::cube(1.0);
        if let Some((t0, t1)) = b.intersect(&o, &d) {
            prop_assert!(t0 <= t1);
            let p = o + d * (t0 + s * (t1 - t0));
            prop_assert!(b.shrunk(-1e-9).contains(&p));
        }
    }

    #[test]
    fn nearest_reference_is_close(frames in 1usize..60, stride in 1usize..9, f in 0usize..60) {
        let sched = ReferenceSchedule::uniform(frames, frames, stride).unwrap();
        let f = f % frames;
        let r = sched.nearest_ref(sched.timestamps[f]).unwrap();
        prop_assert!(sched.is_reference_frame(r.frame));
        prop_assert_eq!(r.frame % stride, 0);
        // Past the last reference the distance can exceed half a stride.
        let last = (frames - 1) / stride * stride;
        if f <= last {
            prop_assert!(r.frame.abs_diff(f) <= stride.div_ceil(2));
        } else {
            prop_assert_eq!(r.frame, last);
        }
        if sched.is_reference_frame(f) {
            prop_assert_eq!(r.frame, f);
        }
    }

    #[test]
    fn posenc_has_declared_width(p in vec3(1.0), t in 0.0..1.0f64, lp in 0usize..8, lt in 0usize..6) {
        let e = posenc(&p, t, lp, lt);
        prop_assert_eq!(e.len(), posenc_width(lp, lt));
        prop_assert!(e.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn rng_state_round_trip(seed in any::<u64>(), stream in any::<u64>(), skip in 0usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        for _ in 0..skip {
            let _: u32 = rng.random();
        }
        let mut back = RngState::capture(&rng).restore().unwrap();
        prop_assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }
}
