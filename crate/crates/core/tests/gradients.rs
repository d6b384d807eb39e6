mod common;

use common::gradcheck::{cases, INSTANCES, REL_TOL};

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for case in cases() {
        let worst = case.worst();
        println!("{:<40} worst {worst:.2e} over {INSTANCES} instances", case.name);
        if worst > REL_TOL {
            failures.push(format!("{} ({worst:.3e})", case.name));
        }
    }
    assert!(failures.is_empty(), "outside {REL_TOL}: {failures:?}");
}
