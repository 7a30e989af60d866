use adsm::gradsuite::{run, TOLERANCE};

#[test]
fn every_component_passes_the_64_bit_gradient_check() {
    let cases = run(0).unwrap();
    assert_eq!(cases.len(), 6);
    for c in &cases {
        println!("{:<52} {:.3e} ({} coords, worst {} {:?})", c.name, c.max_rel_err, c.coords, c.worst, c.worst_pair);
    }
    for c in &cases {
        assert!(c.max_rel_err < TOLERANCE, "{}: {} at {}", c.name, c.max_rel_err, c.worst);
    }
}
