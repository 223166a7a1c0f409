mod common;

use common::oracle::trial;

#[test]
fn every_retriever_matches_a_full_sort() {
    for seed in 0..300 {
        if let Err(e) = trial(seed).check() {
            panic!("seed {seed}: {e}");
        }
    }
}

#[test]
fn trials_exercise_ties_and_self_exclusion() {
    let mut tied = 0;
    let mut member = 0;
    for seed in 0..100 {
        let t = trial(seed);
        member += usize::from(t.ids.contains(&t.query.id));
        let mut scores: Vec<f64> = t
            .image
            .iter()
            .map(|v| v.iter().zip(&t.query.image).map(|(a, b)| *a as f64 * *b as f64).sum())
            .collect();
        scores.sort_by(f64::total_cmp);
        tied += usize::from(scores.windows(2).any(|w| w[0] == w[1]));
    }
    assert!(tied > 50, "{tied}");
    assert!(member > 20, "{member}");
}
