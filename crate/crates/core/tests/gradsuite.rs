use lstd::gradsuite::{case_names, run_suite, TOLERANCE};

#[test]
fn every_case_matches_finite_differences() {
    let entries = run_suite(20, 0).unwrap();
    assert_eq!(entries.len(), case_names().len());
    for e in &entries {
        println!(
            "{:<32} coords {:>6} skipped {:>4} max rel {:.3e}",
            e.name, e.coordinates, e.kinks_skipped, e.max_rel_error
        );
    }
    let failing: Vec<_> = entries.iter().filter(|e| !e.passes()).map(|e| e.name.clone()).collect();
    assert!(failing.is_empty(), "above {TOLERANCE}: {failing:?}");
}
