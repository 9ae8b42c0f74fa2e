//! End-to-end finite-difference validation of the full differentiable
//! pipeline: deformation field + head → rasterizer → photometric, D-SSIM,
//! and feature-distillation losses.

mod common;

use common::gradcheck::{build_setup, eval_loss, full_gradient_sweep};
use dynsplat::train::loss_and_grads;

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    let (nontrivial, failures) = full_gradient_sweep(2024);
    assert!(
        failures.is_empty(),
        "{} gradient mismatches:\n{}",
        failures.len(),
        failures.join("\n")
    );
    assert!(nontrivial > 150, "only {} nontrivial gradients", nontrivial);
}

#[test]
fn loss_report_total_is_consistent() {
    let s = build_setup(31);
    let grads = loss_and_grads(
        &s.scene,
        &s.field,
        &s.head,
        &s.dcfg,
        &s.cam,
        &s.image,
        s.t,
        s.lambda,
        Some((&s.codec, &s.supervision)),
        false,
    )
    .unwrap();
    let recomputed = (1.0 - s.lambda) * grads.l1_rgb + s.lambda * grads.dssim + grads.feature_l1;
    assert!((grads.total - recomputed).abs() <= 1e-9);

    let direct = eval_loss(&s);
    assert!((grads.total - direct).abs() <= 1e-12);
}
