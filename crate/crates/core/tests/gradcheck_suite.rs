use vtn_core::gradcheck::{run_gradcheck, GradcheckOptions};

#[test]
fn every_op_matches_finite_differences() {
    let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
    for r in &report.results {
        println!("{:<24} cases={:<4} max_rel_err={:.3e}", r.name, r.cases, r.max_rel_err);
    }
    let failed: Vec<_> = report.results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
