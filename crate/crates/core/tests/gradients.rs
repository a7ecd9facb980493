mod common;

use common::{gradient_suite, GRAD_TOLERANCE};

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut failures = Vec::new();
    for (name, rep) in gradient_suite() {
        if rep.max_relative_error >= GRAD_TOLERANCE {
            failures.push(format!("{name}: {rep:?}"));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn nt_xent_gradient_is_tight() {
    let suite = gradient_suite();
    let (_, rep) = suite.iter().find(|(n, _)| n == "nt-xent").unwrap();
    assert!(rep.max_relative_error < 1e-6, "{rep:?}");
    for (_, rep) in suite.iter().filter(|(n, _)| n.starts_with("sl-bce")) {
        assert!(rep.max_relative_error < 1e-6, "{rep:?}");
    }
}
