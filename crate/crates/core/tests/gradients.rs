mod common;

use common::grad_suite::{self, Check, LOSSES, OPS};
use common::GRAD_TOL;

fn check_all(checks: &[(&'static str, Check)]) {
    let mut failed = Vec::new();
    for (name, worst) in grad_suite::run(checks) {
        if !(worst < GRAD_TOL) {
            failed.push(format!("{name}: {worst:e}"));
        }
    }
    assert!(failed.is_empty(), "gradient mismatches: {failed:?}");
}

#[test]
fn every_operation_matches_central_differences() {
    check_all(OPS);
}

#[test]
fn batch_losses_match_central_differences() {
    check_all(LOSSES);
}

#[test]
fn a_wrong_gradient_is_detected() {
    use seqpool::tensorcore::RngStream;
    // tanh scaled after the fact, so the tape records a different function
    // from the one the oracle evaluates.
    let mut rng = RngStream::new(1);
    let x = common::random_tensor(&[4], &mut rng);
    let calls = std::cell::Cell::new(0);
    let err = common::gradient_check(&[x], |g, ids| {
        calls.set(calls.get() + 1);
        let y = g.tanh(ids[0]);
        let y = if calls.get() == 1 { g.scale(y, 2.0) } else { y };
        let s = g.sum(&[y]).unwrap();
        let n = g.value(s).len();
        let flat = g.reshape(s, &[n]).unwrap();
        let ones = g.leaf(seqpool::tensorcore::Tensor::new(vec![1, n], vec![1.0; n]).unwrap());
        let r = g.affine(flat, ones, None).unwrap();
        g.reshape(r, &[]).unwrap()
    });
    assert!(err > 0.1, "oracle missed a factor-2 gradient error: {err}");
}
