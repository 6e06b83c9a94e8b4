//! Exponential and logarithm maps on SE(3).
use lieflow::liegroup::{compose, exp_se3, log_se3, Twist, Vec3};

fn main() {
    let xi = Twist::new(Vec3::new(0.0, 0.0, 1.2), Vec3::new(0.3, 0.0, 0.1));
    let g = exp_se3(&xi);
    println!("R =\n{}t = {}", g.rotation, g.translation.transpose());
    let back = log_se3(&g).expect("rotation angle below pi");
    println!("log(exp(xi)) - xi = {:.2e}", back.max_abs_diff(&xi));

    let half = exp_se3(&xi.scaled(0.5));
    println!(
        "exp(xi/2)^2 vs exp(xi): {:.2e}",
        compose(&half, &half).max_abs_diff(&g)
    );
}
