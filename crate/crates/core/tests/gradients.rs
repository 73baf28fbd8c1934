//! Finite-difference checks of every tape op and of end-to-end losses.

mod support;

use support::grad;

#[test]
fn every_op_matches_central_differences() {
    let failures = grad::op_failures();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn two_layer_mlp_gradients() {
    let r = grad::mlp_report();
    assert!(r.passes(1e-6), "{r:?}");
    assert_eq!(r.coordinates, 24 + 6 + 18 + 3);
}

#[test]
fn end_to_end_strategy_losses() {
    let failures = grad::strategy_failures();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn backbone_weights_under_prompts() {
    let failures = grad::backbone_failures();
    assert!(failures.is_empty(), "{failures:#?}");
}
