#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use demosel::prompting::{
    assemble, assemble_attr_only, attribute_prompt, caption_prompt, CausalBlock, DemonstrationContext, PromptBundle,
};
use demosel::{Corpus, Example, Provenance, RetrievalSet, ScoredCandidate, TaskKind};

pub fn set(provenance: Provenance, entries: &[(&str, f64)]) -> RetrievalSet {
    RetrievalSet {
        provenance,
        entries: entries
            .iter()
            .map(|(id, s)| ScoredCandidate {
                example_id: id.to_string(),
                score: *s,
                components: BTreeMap::new(),
            })
            .collect(),
    }
}

fn block(attribute: &str, caption: &str, entries: &[(&str, f64)]) -> CausalBlock {
    CausalBlock {
        attribute: attribute.into(),
        caption: caption.into(),
        set: set(Provenance::Causal(attribute.into()), entries),
    }
}

fn vqa() -> (Corpus, Example) {
    let c = Corpus::from_examples(
        vec![
            Example::new("d1", "img/d1.jpg", "What color is the bus?", "red"),
            Example::new("d2", "img/d2.jpg", "How many dogs?", "two"),
            Example::new("d3", "img/d3.jpg", "What sport is this?", "tennis"),
        ],
        TaskKind::OpenVqa,
    )
    .unwrap();
    (c, Example::new("q", "img/q.jpg", "What is on the plate?", "pizza"))
}

const BIRD_Q: &str = "What is the species of the bird in this image?";

fn birds() -> (Corpus, Example, Option<Vec<String>>) {
    let c = Corpus::from_examples(
        vec![
            Example::new("b1", "birds/b1.jpg", BIRD_Q, "blue jay"),
            Example::new("b2", "birds/b2.jpg", BIRD_Q, "cardinal"),
            Example::new("b3", "birds/b3.jpg", BIRD_Q, "sparrow"),
        ],
        TaskKind::Classification,
    )
    .unwrap();
    let options = Some(c.label_set());
    (c, Example::new("q", "birds/q.jpg", BIRD_Q, "cardinal"), options)
}

/// Every rendered prompt with a hand-written golden file, by file stem.
pub fn golden_cases() -> Vec<(&'static str, PromptBundle)> {
    let (vc, vq) = vqa();
    let (bc, bq, opts) = birds();
    let vqa_t = TaskKind::OpenVqa.task_type();
    let cls_t = TaskKind::Classification.task_type();
    let icl_v = DemonstrationContext::icl(set(Provenance::Corr, &[("d2", 0.8), ("d1", 0.9)]), None);
    let circ_v = DemonstrationContext::circles(
        set(Provenance::Corr, &[("d1", 0.9)]),
        vec![block("color", "a blue plate with pizza", &[("d2", 0.5), ("d3", 0.7)])],
        None,
    );
    let icl_b = DemonstrationContext::icl(set(Provenance::Corr, &[("b1", 0.8), ("b2", 0.9)]), opts.clone());
    let circ_b = DemonstrationContext::circles(
        set(Provenance::Corr, &[("b2", 0.9)]),
        vec![
            block("crown color", "a small bird with a red crown", &[("b3", 0.6)]),
            block("wing pattern", "a small bird with plain wings", &[("b1", 0.4)]),
        ],
        opts.clone(),
    );
    let cir_only = DemonstrationContext::circles(
        RetrievalSet::empty(Provenance::Corr),
        vec![block("crown color", "a small bird with a red crown", &[("b3", 0.6)])],
        opts.clone(),
    );
    let attrs = vec!["color".to_string(), "food type".to_string()];
    vec![
        (
            "none_vqa",
            assemble(&DemonstrationContext::none(None), &vq, &vc, vqa_t).unwrap(),
        ),
        ("icl_vqa", assemble(&icl_v, &vq, &vc, vqa_t).unwrap()),
        ("circles_vqa", assemble(&circ_v, &vq, &vc, vqa_t).unwrap()),
        (
            "icl_plus_attr_vqa",
            assemble_attr_only(&icl_v, &vq, &vc, &attrs, vqa_t).unwrap(),
        ),
        (
            "none_cls",
            assemble(&DemonstrationContext::none(opts.clone()), &bq, &bc, cls_t).unwrap(),
        ),
        ("icl_cls", assemble(&icl_b, &bq, &bc, cls_t).unwrap()),
        ("circles_cls", assemble(&circ_b, &bq, &bc, cls_t).unwrap()),
        ("cir_only_cls", assemble(&cir_only, &bq, &bc, cls_t).unwrap()),
        ("attributes", attribute_prompt(&bq, 3)),
        ("caption", caption_prompt(&bq, "crown color")),
    ]
}

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{name}.txt"))
}

pub mod oracle {
    //! Brute-force retrieval: score everything, sort everything.

    use demosel::causal::{AttributeIntervention, CounterfactualRetriever};
    use demosel::embedstore::normalize;
    use demosel::retrieval::{top_k, IrScorer};
    use demosel::{EmbeddingKind, EmbeddingRecord, EmbeddingStore, QueryEmbedding, RetrievalSet, Retriever};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        loop {
            // coarse values make exact score ties common
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-2i32..=2) as f32).collect();
            if let Ok(u) = normalize(&v) {
                return u;
            }
        }
    }

    fn naive_dot(a: &[f32], b: &[f32]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += a[i] as f64 * b[i] as f64;
        }
        s
    }

    /// (id, score) sorted by score descending, then id ascending.
    fn full_sort(mut v: Vec<(String, f64)>) -> Vec<(String, f64)> {
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        v
    }

    fn pairs(s: &RetrievalSet) -> Vec<(String, f64)> {
        s.entries.iter().map(|c| (c.example_id.clone(), c.score)).collect()
    }

    pub struct Trial {
        pub ids: Vec<String>,
        pub image: Vec<Vec<f32>>,
        pub question: Vec<Vec<f32>>,
        pub store: EmbeddingStore,
        pub query: QueryEmbedding,
        pub caption: Vec<f32>,
        pub k: usize,
        pub pool: usize,
    }

    pub fn trial(seed: u64) -> Trial {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=256);
        let dim = rng.gen_range(2..=32);
        let protos: Vec<Vec<f32>> = (0..rng.gen_range(1..=n.min(16))).map(|_| unit(&mut rng, dim)).collect();
        let pick = |rng: &mut ChaCha8Rng| {
            if rng.gen_bool(0.5) {
                protos.choose(rng).unwrap().clone()
            } else {
                unit(rng, dim)
            }
        };
        let mut ids: Vec<String> = (0..n).map(|i| format!("c{i:03}")).collect();
        ids.shuffle(&mut rng);
        let image: Vec<Vec<f32>> = (0..n).map(|_| pick(&mut rng)).collect();
        let question: Vec<Vec<f32>> = (0..n).map(|_| pick(&mut rng)).collect();
        let mut store = EmbeddingStore::new();
        for i in 0..n {
            for (kind, v) in [
                (EmbeddingKind::Image, &image[i]),
                (EmbeddingKind::Question, &question[i]),
            ] {
                store
                    .insert(EmbeddingRecord {
                        id: ids[i].clone(),
                        kind,
                        vector: v.clone(),
                    })
                    .unwrap();
            }
        }
        // half the time the query is a corpus member
        let query = if rng.gen_bool(0.5) {
            let i = rng.gen_range(0..n);
            QueryEmbedding {
                id: ids[i].clone(),
                image: image[i].clone(),
                question: question[i].clone(),
            }
        } else {
            QueryEmbedding {
                id: "query".into(),
                image: pick(&mut rng),
                question: pick(&mut rng),
            }
        };
        let k = rng.gen_range(1..=n + 2);
        let pool = rng.gen_range(k..=n + 4);
        Trial {
            ids,
            image,
            question,
            store,
            caption: pick(&mut rng),
            query,
            k,
            pool,
        }
    }

    /// (id, score) in rank order.
    type Ranked = Vec<(String, f64)>;

    impl Trial {
        fn scored(&self, f: impl Fn(usize) -> f64, skip_self: bool) -> Vec<(String, f64)> {
            (0..self.ids.len())
                .filter(|&i| !(skip_self && self.ids[i] == self.query.id))
                .map(|i| (self.ids[i].clone(), f(i)))
                .collect()
        }

        fn top(&self, f: impl Fn(usize) -> f64, skip_self: bool) -> Vec<(String, f64)> {
            let mut v = full_sort(self.scored(f, skip_self));
            v.truncate(self.k);
            v
        }

        /// Every retrieval op against its oracle; the first mismatch is
        /// returned as an error message.
        pub fn check(&self) -> Result<(), String> {
            let q = &self.query;
            let ii = |i: usize| naive_dot(&q.image, &self.image[i]);
            let it = |i: usize| naive_dot(&q.image, &self.question[i]);
            let tt = |i: usize| naive_dot(&q.question, &self.question[i]);
            let cap = |i: usize| naive_dot(&self.caption, &self.image[i]);
            let r = Retriever::new(&self.store);
            let err = |e: demosel::Error| e.to_string();
            let mut cases: Vec<(&str, Ranked, Ranked)> = vec![
                (
                    "top_k",
                    pairs(&top_k(&q.image, &self.store, EmbeddingKind::Image, self.k).map_err(err)?),
                    self.top(ii, false),
                ),
                ("rices", pairs(&r.rices(q, self.k).map_err(err)?), self.top(ii, true)),
                (
                    "muier",
                    pairs(&r.muier(q, self.k).map_err(err)?),
                    self.top(|i| ii(i) + it(i), true),
                ),
                (
                    "scorer_variant",
                    pairs(&r.scorer_variant(q, self.k, IrScorer::ImgImgTxtTxt).map_err(err)?),
                    self.top(|i| ii(i) + tt(i), true),
                ),
            ];

            let mut stage1 = full_sort(self.scored(ii, true));
            stage1.truncate(self.pool);
            let mut stage2: Vec<(String, f64)> = stage1
                .iter()
                .map(|(id, _)| {
                    let i = self.ids.iter().position(|x| x == id).unwrap();
                    (id.clone(), naive_dot(&q.question, &self.image[i]))
                })
                .collect();
            stage2 = full_sort(stage2);
            stage2.truncate(self.k);
            cases.push(("mmices", pairs(&r.mmices(q, self.k, self.pool).map_err(err)?), stage2));

            let iv = AttributeIntervention {
                attribute: "a".into(),
                caption: "c".into(),
                caption_vec: self.caption.clone().into(),
            };
            let mut cf = CounterfactualRetriever::new(&self.store);
            cases.push((
                "retrieve_counterfactual",
                pairs(&cf.retrieve(&iv, q, self.k).map_err(err)?),
                self.top(|i| cap(i) + tt(i), true),
            ));
            cf.use_text = false;
            cases.push((
                "retrieve_counterfactual_no_text",
                pairs(&cf.retrieve(&iv, q, self.k).map_err(err)?),
                self.top(cap, true),
            ));

            for (name, got, want) in cases {
                if got != want {
                    return Err(format!("{name}: got {got:?}, want {want:?}"));
                }
            }
            Ok(())
        }
    }
}

pub mod metric_table {
    //! Hand-computed metric values. Fractions are written out so each entry
    //! can be checked by hand.

    pub enum Case {
        Em(&'static str, &'static str, u8),
        F1(&'static str, &'static str, f64),
        Cls {
            preds: &'static [&'static str],
            golds: &'static [&'static str],
            labels: &'static [&'static str],
            accuracy: f64,
            weighted_f1: f64,
        },
    }

    pub const TOLERANCE: f64 = 1e-12;

    pub fn cases() -> Vec<Case> {
        use Case::*;
        vec![
            Em("blue jay", "Blue Jay", 1),
            Em("sparrow", "blue jay", 0),
            Em("The cat.", "cat", 1),
            Em("a dog", "dog", 1),
            Em("dogs", "dog", 0),
            Em("  two ", "two", 1),
            Em("2", "two", 0),
            Em("New York!", "new york", 1),
            Em("newyork", "new york", 0),
            Em("an apple", "the apple", 1),
            Em("yes", "Yes.", 1),
            Em("no", "yes", 0),
            Em("", "", 1),
            Em("the", "", 1),
            Em("red, white", "red white", 1),
            Em("red-white", "red white", 0),
            Em("theater", "the ater", 0),
            Em("Mr. Smith", "mr smith", 1),
            Em("a", "an", 1),
            Em("cardinal", "northern cardinal", 0),
            F1("blue bird", "blue bird", 1.0),
            // p = 2/3, r = 1
            F1("small blue bird", "blue bird", 0.8),
            F1("red", "blue bird", 0.0),
            F1("the blue bird", "blue bird", 1.0),
            // p = 1/2, r = 1
            F1("bird bird", "bird", 2.0 / 3.0),
            // p = 1, r = 1/2
            F1("bird", "bird bird", 2.0 / 3.0),
            // p = 2/4, r = 1
            F1("w x y z", "w x", 2.0 / 3.0),
            F1("", "bird", 0.0),
            F1("bird", "", 0.0),
            F1("", "the", 1.0),
            F1("x y", "y x", 1.0),
            // p = r = 2/3
            F1("one two three", "two three four", 2.0 / 3.0),
            // p = 1/3, r = 1/2
            F1("big red bus", "red car", 0.4),
            F1("Blue, bird!", "blue bird", 1.0),
            // A: p 1/2 r 1 f 2/3 (support 1); B: p 1 r 2/3 f 4/5 (support 3)
            Cls {
                preds: &["A", "A", "B", "B"],
                golds: &["A", "B", "B", "B"],
                labels: &["A", "B"],
                accuracy: 0.75,
                weighted_f1: 0.25 * (2.0 / 3.0) + 0.75 * 0.8,
            },
            Cls {
                preds: &["A", "B", "C"],
                golds: &["A", "B", "C"],
                labels: &["A", "B", "C"],
                accuracy: 1.0,
                weighted_f1: 1.0,
            },
            // out-of-set prediction; C has no support
            Cls {
                preds: &["x", "B"],
                golds: &["A", "B"],
                labels: &["A", "B", "C"],
                accuracy: 0.5,
                weighted_f1: 0.5,
            },
            Cls {
                preds: &["B", "A"],
                golds: &["A", "B"],
                labels: &["A", "B"],
                accuracy: 0.0,
                weighted_f1: 0.0,
            },
            // A: p 2/4 r 1 f 2/3 at weight 1/2; B, C score 0
            Cls {
                preds: &["A", "A", "A", "A"],
                golds: &["A", "A", "B", "C"],
                labels: &["A", "B", "C"],
                accuracy: 0.5,
                weighted_f1: 1.0 / 3.0,
            },
            Cls {
                preds: &["Blue Jay", "cardinal"],
                golds: &["blue jay", "Cardinal"],
                labels: &["blue jay", "cardinal"],
                accuracy: 1.0,
                weighted_f1: 1.0,
            },
        ]
    }

    /// Mismatches against the implementation, as messages.
    pub fn check() -> Vec<String> {
        use demosel::evaluation::{classification_metrics, exact_match, word_f1};
        let mut bad = Vec::new();
        for (i, c) in cases().into_iter().enumerate() {
            match c {
                Case::Em(p, g, want) => {
                    let got = exact_match(p, g);
                    if got != want {
                        bad.push(format!("case {i}: em({p:?}, {g:?}) = {got}, want {want}"));
                    }
                }
                Case::F1(p, g, want) => {
                    let got = word_f1(p, g);
                    if (got - want).abs() > TOLERANCE {
                        bad.push(format!("case {i}: f1({p:?}, {g:?}) = {got}, want {want}"));
                    }
                }
                Case::Cls {
                    preds,
                    golds,
                    labels,
                    accuracy,
                    weighted_f1,
                } => {
                    let m = classification_metrics(preds, golds, labels);
                    if (m.accuracy - accuracy).abs() > TOLERANCE || (m.weighted_f1 - weighted_f1).abs() > TOLERANCE {
                        bad.push(format!("case {i}: got {m:?}, want ({accuracy}, {weighted_f1})"));
                    }
                }
            }
        }
        bad
    }
}

pub fn normalize_fuzz() -> Vec<(String, String)> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/normalize_fuzz.json");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_array()
        .unwrap()
        .iter()
        .map(|c| {
            (
                c["input"].as_str().unwrap().to_string(),
                c["expected"].as_str().unwrap().to_string(),
            )
        })
        .collect()
}
