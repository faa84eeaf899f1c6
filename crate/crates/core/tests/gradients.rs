use salvit::gradsuite;

#[test]
fn every_component_matches_finite_differences() {
    for r in gradsuite::run_all(7, 3).unwrap() {
        assert!(r.passed(), "{}: relative error {:.3e}", r.name, r.max_rel_error);
        assert!(r.coordinates > 0);
    }
}
