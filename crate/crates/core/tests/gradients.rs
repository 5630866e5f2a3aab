mod common;

use common::{gradient_suite, GRAD_TOLERANCE};

#[test]
fn analytic_gradients_match_central_differences() {
    let results = gradient_suite();
    for (name, err) in &results {
        println!("{name:<24} max relative error {err:.3e}");
    }
    let bad: Vec<_> = results.iter().filter(|(_, e)| e.is_nan() || *e >= GRAD_TOLERANCE).collect();
    assert!(bad.is_empty(), "gradient mismatches: {bad:?}");
}
