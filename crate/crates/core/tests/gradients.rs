mod common;

use common::grad::{self, TOL};

#[test]
fn focal_gradient() {
    let e = grad::focal();
    assert!(e < TOL, "{e}");
}

#[test]
fn smooth_l1_gradient() {
    let e = grad::smooth_l1_check();
    assert!(e < TOL, "{e}");
}

#[test]
fn sr_l1_gradient() {
    let e = grad::sr_l1_check();
    assert!(e < TOL, "{e}");
}

#[test]
fn sr_branch_gradient_end_to_end() {
    let e = grad::sr_branch();
    assert!(e < TOL, "{e}");
}
