mod common;

use std::time::Instant;

use seenflow::tensor::grad_check;

const TOL: f64 = 1e-5;
const STEP: f64 = 1e-4;

#[test]
fn every_op_over_many_seeds() {
    let start = Instant::now();
    for seed in 0..100 {
        for case in common::op_cases(seed) {
            let err = grad_check(&case.f, &case.inputs, STEP).unwrap();
            assert!(err <= TOL, "{} seed {seed}: relative error {err:e}", case.name);
        }
    }
    eprintln!("op suite took {:?}", start.elapsed());
}

// Model graphs hold thousands of parameters, some with gradients near the
// central-difference noise floor; they are checked along random directions.

#[test]
fn vae_loss_graph() {
    for seed in 0..100 {
        let case = common::vae_loss_case(seed);
        let err = common::directional_error(&case, STEP, seed);
        assert!(err <= TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn fm_loss_graph() {
    for seed in 0..100 {
        for control in [false, true] {
            let case = common::fm_loss_case(seed, control);
            let err = common::directional_error(&case, STEP, seed);
            assert!(err <= TOL, "{} seed {seed}: relative error {err:e}", case.name);
        }
    }
}
