mod common;

use demosel::evaluation::{classification_metrics, normalize_answer, pct};

#[test]
fn hand_table_has_forty_cases_and_matches() {
    assert_eq!(common::metric_table::cases().len(), 40);
    let bad = common::metric_table::check();
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn worked_weighted_f1_prints_as_76_67() {
    let m = classification_metrics(&["A", "A", "B", "B"], &["A", "B", "B", "B"], &["A", "B"]);
    assert_eq!(pct(m.weighted_f1), "76.6667");
}

#[test]
fn normalizer_agrees_with_reference_script() {
    let cases = common::normalize_fuzz();
    assert_eq!(cases.len(), 50);
    for (input, want) in cases {
        assert_eq!(normalize_answer(&input), want, "input {input:?}");
    }
}
