mod common;

use common::tiny;
use equidp_core::groups::GroupElement;
use equidp_core::layers::build_eq_resnet9;
use equidp_harness::audit::{audit, inject_kernel_fault, AUDIT_TOLERANCE};
use equidp_harness::HarnessError;

fn model(overrides: &[&str]) -> equidp_core::layers::Model {
    let cfg = tiny(overrides);
    build_eq_resnet9(&cfg.resnet(cfg.input_side()).unwrap()).unwrap()
}

#[test]
fn fresh_dihedral_and_cyclic_models_pass() {
    for o in [&[][..], &["group.kind=cyclic"][..]] {
        let mut m = model(o);
        let r = audit(&mut m, 2, 1).unwrap();
        assert_eq!(r.elements.len(), if o.is_empty() { 8 } else { 4 });
        assert!(r.passed(), "{:?}", r.lines());
        assert!(r.max_layer_error() < 1e-9);
        // the restricted head sees only the subgroup; its elements are checked
        assert!(r.logits.iter().filter(|l| l.is_some()).count() >= 2);
        // padding is restored afterwards
        assert_eq!(m.padding, equidp_core::autodiff::Padding::Zero(1));
    }
}

#[test]
fn corrupted_kernel_is_flagged_at_its_layer() {
    let mut m = model(&[]);
    let name = inject_kernel_fault(&mut m, 3, 1.0, 9).unwrap();
    let r = audit(&mut m, 2, 1).unwrap();
    assert!(!r.passed());
    let layer = r.layers.iter().find(|l| l.name == name).unwrap();
    assert!(layer.error.unwrap() > AUDIT_TOLERANCE, "{name}: {:?}", layer.error);
    // layers before the fault are untouched
    let pos = r.layers.iter().position(|l| l.name == name).unwrap();
    assert!(r.layers[..pos].iter().all(|l| l.error.is_none_or(|e| e < 1e-9)));
    assert!(matches!(r.into_result(), Err(HarnessError::AuditFailed(_))));
    assert!(inject_kernel_fault(&mut m, 999, 1.0, 0).is_err());
}

#[test]
fn trivial_group_passes_vacuously() {
    let mut m = model(&["group.kind=trivial"]);
    let r = audit(&mut m, 2, 1).unwrap();
    assert_eq!(r.elements, vec![GroupElement::IDENTITY]);
    assert_eq!(r.max_layer_error(), 0.0);
    assert!(r.passed());
}
