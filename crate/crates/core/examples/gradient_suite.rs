//! Finite-difference audit of every loss term.
use lieflow::pipeline::{check_grad, GradSuiteConfig};

fn main() {
    let report = check_grad(&GradSuiteConfig::default()).unwrap();
    for t in &report.terms {
        println!(
            "{:<12} draws {} checked {:>4} max rel err {:.2e} ({})",
            t.term, t.draws, t.checked, t.max_rel_err, t.worst_param
        );
    }
    println!("passed: {}", report.passed);
}
