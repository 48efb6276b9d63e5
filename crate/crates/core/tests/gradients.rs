use textrl::gradsuite::{run_suite, OpReport};

#[test]
fn every_op_passes_the_difference_oracle() {
    let reports = run_suite(20).unwrap();
    for OpReport { op, max_rel_error, .. } in &reports {
        println!("{op:24} {max_rel_error:.3e}");
    }
    let bad: Vec<_> = reports.iter().filter(|r| r.max_rel_error > 2e-3).collect();
    assert!(bad.is_empty(), "{bad:?}");
}
