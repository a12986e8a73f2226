mod common;

use common::*;

fn check(name: &str) {
    let worst = gradient_case(name).unwrap();
    assert!(worst <= FD_TOL, "{name}: {worst}");
}

#[test]
fn ctr_loss_gradient() {
    check("ctr");
}

#[test]
fn rank_loss_gradient_difference_form() {
    check("rank_difference");
}

#[test]
fn rank_loss_gradient_ratio_form() {
    check("rank_ratio");
}

#[test]
fn rank_loss_gradient_uniform_weights() {
    check("rank_uniform");
}

#[test]
fn reg_loss_gradient_above_and_below_one() {
    check("reg_above_one");
    check("reg_below_one");
}

#[test]
fn full_copr_objective_gradient() {
    check("copr_full");
}

#[test]
fn distill_loss_gradient() {
    check("distill");
}

#[test]
fn rankflow_loss_gradient() {
    check("rankflow");
}

#[test]
fn every_case_is_named() {
    for name in GRADIENT_CASES {
        assert!(gradient_case(name).is_ok(), "{name}");
    }
    assert!(gradient_case("nonesuch").is_err());
}

#[test]
fn micro_models_stay_small() {
    assert!(micro_model(1, Some(1.2)).n_params() <= 500);
}
