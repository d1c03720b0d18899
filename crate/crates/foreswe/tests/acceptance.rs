//! Acceptance gate: one test per release criterion, each printing a PASS
//! line with its measured value. Criteria land here as their subsystems
//! come online.

#[test]
fn criterion_placeholder_suite_builds() {
    // Replaced by the full criterion list once the pipeline is assembled.
    println!("acceptance: suite scaffold compiles");
}
