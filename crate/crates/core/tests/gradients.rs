mod common;

use common::*;
use dereverb_core::trainer::loss_and_gradients;

fn run(h: f64, tol: f64, seed: u64) {
    let s = toy_sample(seed);
    let report = check_gradients(&generic_weights(seed, &s), &s, &full_loss(), h);
    for c in &report {
        eprintln!("{:<18} rel {:.2e} refined {}", c.name, c.rel_error, c.refined);
    }
    assert_eq!(report.len(), 30);
    for c in &report {
        assert!(c.rel_error < tol, "{}: {:.3e}", c.name, c.rel_error);
    }
}

#[test]
fn every_tensor_within_1e3_at_step_1e3() {
    run(1e-3, 1e-3, 1);
}

#[test]
fn every_tensor_within_1e5_in_double_precision() {
    // A larger step keeps rounding noise below the tolerance for the
    // attention projections, whose gradients are ~1e-6 of the loss.
    run(1e-2, 1e-5, 4);
}

#[test]
fn key_bias_gradient_vanishes() {
    let s = toy_sample(2);
    let w = generic_weights(2, &s);
    let (_, g) = loss_and_gradients(&w, &s, &full_loss(), 1).unwrap();
    let total: f64 = g
        .params()
        .iter()
        .flat_map(|p| p.values())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let kb = g
        .param("attn.key_bias")
        .values()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(kb <= 1e-12 * total, "key bias gradient {kb:e}");
}
