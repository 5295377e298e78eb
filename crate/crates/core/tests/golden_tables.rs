// SPDX-License-Identifier: MIT OR Apache-2.0

#[path = "common/golden.rs"]
mod golden;

#[test]
fn every_worked_example_reproduces() {
    let results = golden::run_all();
    assert_eq!(results.len(), 15 * 4 + 3 * 4);
    let failures: Vec<_> = results
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
