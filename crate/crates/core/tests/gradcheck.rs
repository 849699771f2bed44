#[path = "common/oracle.rs"]
mod oracle;

use qlr_core::layers::LayerKind;
use qlr_core::rng::Rng;

use oracle::{check, random_case, KINDS};

const INSTANCES: usize = 20;
const TOL: f64 = 1e-3;

fn run(kind: LayerKind) {
    let mut rng = Rng::derive(17, kind as u64);
    for i in 0..INSTANCES {
        let inst = random_case(kind, &mut rng);
        let c = check(&inst);
        assert!(
            c.forward < 1e-5,
            "{kind:?} #{i} forward {c:?} {:?}",
            inst.spec
        );
        assert!(
            c.worst() <= TOL,
            "{kind:?} #{i} {c:?} {:?} {:?}",
            inst.spec,
            inst.shape
        );
        assert_eq!(c.weight_grad.is_some(), kind.has_params());
    }
}

#[test]
fn conv_matches_finite_differences() {
    run(LayerKind::Conv);
}

#[test]
fn pointwise_matches_finite_differences() {
    run(LayerKind::Pointwise);
}

#[test]
fn depthwise_matches_finite_differences() {
    run(LayerKind::Depthwise);
}

#[test]
fn linear_matches_finite_differences() {
    run(LayerKind::Linear);
}

#[test]
fn relu_matches_finite_differences() {
    run(LayerKind::Relu);
}

#[test]
fn relative_error_is_sensitive() {
    assert!(oracle::rel_err(&[1.0, 2.0], &[1.0, 2.1]) > TOL);
    assert_eq!(oracle::rel_err(&[0.0], &[0.0]), 0.0);
    assert_eq!(KINDS.len(), 5);
}
