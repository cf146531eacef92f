mod common;

use common::gradsuite::{run_suite, TOL};

#[test]
fn every_primitive_and_block_matches_finite_differences() {
    let suite = run_suite().unwrap();
    for c in &suite.cases {
        println!("{:<22} seed {} checked {:>4} max rel err {:.2e}", c.name, c.seed, c.checked, c.max_rel_err);
    }
    println!("elapsed {:.1?}", suite.elapsed);
    let bad = suite.failures();
    assert!(bad.is_empty(), "over {TOL}: {bad:?}");
}
