use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Lowercase, delete ASCII punctuation, drop the articles a/an/the,
/// collapse whitespace. This is the usual SQuAD/VQA-style canonical form.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> u8 {
    u8::from(normalize_answer(pred) == normalize_answer(gold))
}

/// Token-multiset F1 between normalized strings. Two empty strings agree
/// perfectly; one empty string scores zero.
pub fn word_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() && gt.is_empty() {
        return 1.0;
    }
    if pt.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub weighted_f1: f64,
}

/// Accuracy and support-weighted F1 over `label_set`.
///
/// Labels compare after [`normalize_answer`]. A prediction outside the
/// label set is wrong for every class.
pub fn classification_metrics<P, G, L>(preds: &[P], golds: &[G], label_set: &[L]) -> ClassificationMetrics
where
    P: AsRef<str>,
    G: AsRef<str>,
    L: AsRef<str>,
{
    assert_eq!(preds.len(), golds.len(), "prediction and gold counts differ");
    let n = preds.len();
    if n == 0 {
        return ClassificationMetrics {
            accuracy: 0.0,
            weighted_f1: 0.0,
        };
    }
    let p: Vec<String> = preds.iter().map(|x| normalize_answer(x.as_ref())).collect();
    let g: Vec<String> = golds.iter().map(|x| normalize_answer(x.as_ref())).collect();
    let mut labels: Vec<String> = label_set.iter().map(|x| normalize_answer(x.as_ref())).collect();
    labels.sort();
    labels.dedup();

    let accuracy = p.iter().zip(&g).filter(|(a, b)| a == b).count() as f64 / n as f64;
    let mut weighted = 0.0;
    for c in &labels {
        let support = g.iter().filter(|x| *x == c).count();
        if support == 0 {
            continue;
        }
        let tp = p.iter().zip(&g).filter(|(a, b)| *a == c && *b == c).count() as f64;
        let predicted = p.iter().filter(|x| *x == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = tp / support as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        weighted += support as f64 / n as f64 * f1;
    }
    ClassificationMetrics {
        accuracy,
        weighted_f1: weighted,
    }
}
