//! Exact similarity retrieval and the correlational baselines.
//!
//! Every retriever scores the whole store with f64-accumulated dot products
//! and selects with a partial sort. Ordering is by descending score, then
//! ascending example id, so results are total and reproducible.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedstore::{dot, EmbeddingKind, EmbeddingStore};
use crate::error::{Error, Result};

pub const IMG_IMG: &str = "img_img";
pub const IMG_TXT: &str = "img_txt";
pub const TXT_TXT: &str = "txt_txt";
pub const TXT_IMG: &str = "txt_img";
pub const IMG_CAPTION: &str = "img_caption";

/// Default candidate pool for the two-stage multimodal selector.
pub const DEFAULT_MMICES_POOL: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub example_id: String,
    pub score: f64,
    pub components: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Corr,
    Causal(String),
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub provenance: Provenance,
    pub entries: Vec<ScoredCandidate>,
}

impl RetrievalSet {
    pub fn empty(provenance: Provenance) -> Self {
        RetrievalSet {
            provenance,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.example_id.as_str())
    }
}

/// Query-side image and question vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    pub id: String,
    pub image: Vec<f32>,
    pub question: Vec<f32>,
}

impl QueryEmbedding {
    pub fn from_store(store: &EmbeddingStore, id: &str) -> Result<Self> {
        Ok(QueryEmbedding {
            id: id.to_string(),
            image: store.require(id, EmbeddingKind::Image)?.to_vec(),
            question: store.require(id, EmbeddingKind::Question)?.to_vec(),
        })
    }
}

/// Which similarities make up the correlational score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrScorer {
    #[default]
    ImgImg,
    ImgImgImgTxt,
    ImgImgTxtTxt,
}

impl std::str::FromStr for IrScorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "img_img" => Ok(IrScorer::ImgImg),
            "img_img+img_txt" | "img_img_img_txt" => Ok(IrScorer::ImgImgImgTxt),
            "img_img+txt_txt" | "img_img_txt_txt" => Ok(IrScorer::ImgImgTxtTxt),
            other => Err(Error::invalid(format!(
                "unknown scorer `{other}` (expected img_img, img_img+img_txt, img_img+txt_txt)"
            ))),
        }
    }
}

/// Component weights for summed scores. All 1.0 unless configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreWeights {
    pub img_img: f64,
    pub img_txt: f64,
    pub txt_txt: f64,
    pub img_caption: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            img_img: 1.0,
            img_txt: 1.0,
            txt_txt: 1.0,
            img_caption: 1.0,
        }
    }
}

/// One additive term: `weight * <query_vec, candidate[kind]>`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Term<'q> {
    pub name: &'static str,
    pub weight: f64,
    pub query: &'q [f32],
    pub kind: EmbeddingKind,
}

/// Descending score order in which `0.0` and `-0.0` tie.
#[inline]
pub fn score_desc(a: f64, b: f64) -> Ordering {
    if a == b {
        Ordering::Equal
    } else {
        b.total_cmp(&a)
    }
}

/// Orders candidate indices: higher score first, then smaller id.
#[inline]
fn rank_cmp(scores: &[f64], ids: &[String], a: usize, b: usize) -> Ordering {
    score_desc(scores[a], scores[b]).then_with(|| ids[a].cmp(&ids[b]))
}

/// Indices of the `k` best candidates, fully ordered. `skip` is excluded.
pub(crate) fn select_top(scores: &[f64], ids: &[String], k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| Some(i) != skip).collect();
    let cmp = |a: &usize, b: &usize| rank_cmp(scores, ids, *a, *b);
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

fn check_query(v: &[f32], store: &EmbeddingStore) -> Result<()> {
    match store.dim() {
        Some(d) if d != v.len() => Err(Error::DimensionMismatch {
            expected: d,
            got: v.len(),
        }),
        _ => Ok(()),
    }
}

/// Scores every candidate in the `universe` table under `terms`.
/// Returns per-term columns aligned to the universe ordering.
pub(crate) fn score_columns(
    store: &EmbeddingStore,
    universe: EmbeddingKind,
    terms: &[Term<'_>],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let ids = store.ids(universe);
    if ids.is_empty() {
        return Err(Error::invalid(format!("store has no {universe} embeddings")));
    }
    let mut columns = Vec::with_capacity(terms.len());
    for t in terms {
        check_query(t.query, store)?;
        let col: Vec<f64> = if t.kind == universe {
            (0..ids.len())
                .map(|i| t.weight * dot(t.query, store.row(t.kind, i)))
                .collect()
        } else {
            ids.iter()
                .map(|id| {
                    let j = store.index_of(id, t.kind).ok_or_else(|| Error::MissingEmbedding {
                        id: id.clone(),
                        kind: t.kind,
                    })?;
                    Ok(t.weight * dot(t.query, store.row(t.kind, j)))
                })
                .collect::<Result<_>>()?
        };
        columns.push(col);
    }
    let totals = (0..ids.len())
        .map(|i| columns.iter().fold(0.0, |acc, c| acc + c[i]))
        .collect();
    Ok((totals, columns))
}

/// Ranks the universe by the summed terms and materializes the top `k`.
pub(crate) fn rank_terms(
    store: &EmbeddingStore,
    universe: EmbeddingKind,
    terms: &[Term<'_>],
    k: usize,
    exclude: Option<&str>,
    provenance: Provenance,
) -> Result<RetrievalSet> {
    let (totals, columns) = score_columns(store, universe, terms)?;
    let ids = store.ids(universe);
    let skip = exclude.and_then(|id| store.index_of(id, universe));
    let entries = select_top(&totals, ids, k, skip)
        .into_iter()
        .map(|i| ScoredCandidate {
            example_id: ids[i].clone(),
            score: totals[i],
            components: terms
                .iter()
                .zip(&columns)
                .map(|(t, c)| (t.name.to_string(), c[i]))
                .collect(),
        })
        .collect();
    Ok(RetrievalSet { provenance, entries })
}

/// Exact top-`k` by dot product against one embedding kind.
pub fn top_k(query_vec: &[f32], store: &EmbeddingStore, kind: EmbeddingKind, k: usize) -> Result<RetrievalSet> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let name = match kind {
        EmbeddingKind::Image => IMG_IMG,
        EmbeddingKind::Question => TXT_TXT,
        EmbeddingKind::Caption => IMG_CAPTION,
    };
    let term = Term {
        name,
        weight: 1.0,
        query: query_vec,
        kind,
    };
    rank_terms(store, kind, &[term], k, None, Provenance::Corr)
}

/// Correlational retrievers over one corpus store.
#[derive(Debug, Clone, Copy)]
pub struct Retriever<'s> {
    pub store: &'s EmbeddingStore,
    /// Drop the query's own id from candidates.
    pub exclude_self: bool,
    pub weights: ScoreWeights,
}

impl<'s> Retriever<'s> {
    pub fn new(store: &'s EmbeddingStore) -> Self {
        Retriever {
            store,
            exclude_self: true,
            weights: ScoreWeights::default(),
        }
    }

    pub fn with_exclude_self(mut self, exclude: bool) -> Self {
        self.exclude_self = exclude;
        self
    }

    pub fn with_weights(mut self, w: ScoreWeights) -> Self {
        self.weights = w;
        self
    }

    fn exclude<'q>(&self, q: &'q QueryEmbedding) -> Option<&'q str> {
        self.exclude_self.then_some(q.id.as_str())
    }

    fn run(&self, q: &QueryEmbedding, terms: &[Term<'_>], k: usize) -> Result<RetrievalSet> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        rank_terms(
            self.store,
            EmbeddingKind::Image,
            terms,
            k,
            self.exclude(q),
            Provenance::Corr,
        )
    }

    fn img_img<'q>(&self, q: &'q QueryEmbedding) -> Term<'q> {
        Term {
            name: IMG_IMG,
            weight: self.weights.img_img,
            query: &q.image,
            kind: EmbeddingKind::Image,
        }
    }

    /// Image-image nearest neighbours.
    pub fn rices(&self, q: &QueryEmbedding, k: usize) -> Result<RetrievalSet> {
        self.run(q, &[self.img_img(q)], k)
    }

    /// Image-image plus query-image vs candidate-question similarity.
    pub fn muier(&self, q: &QueryEmbedding, k: usize) -> Result<RetrievalSet> {
        self.scorer_variant(q, k, IrScorer::ImgImgImgTxt)
    }

    pub fn scorer_variant(&self, q: &QueryEmbedding, k: usize, variant: IrScorer) -> Result<RetrievalSet> {
        let mut terms = vec![self.img_img(q)];
        match variant {
            IrScorer::ImgImg => {}
            IrScorer::ImgImgImgTxt => terms.push(Term {
                name: IMG_TXT,
                weight: self.weights.img_txt,
                query: &q.image,
                kind: EmbeddingKind::Question,
            }),
            IrScorer::ImgImgTxtTxt => terms.push(Term {
                name: TXT_TXT,
                weight: self.weights.txt_txt,
                query: &q.question,
                kind: EmbeddingKind::Question,
            }),
        }
        self.run(q, &terms, k)
    }

    /// Two stages: top `pool_size` by image-image, then re-rank that pool by
    /// query-question vs candidate-image similarity.
    pub fn mmices(&self, q: &QueryEmbedding, k: usize, pool_size: usize) -> Result<RetrievalSet> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if pool_size < k {
            return Err(Error::invalid(format!(
                "MMICES pool size {pool_size} is smaller than k = {k}"
            )));
        }
        let store = self.store;
        let ids = store.ids(EmbeddingKind::Image);
        check_query(&q.image, store)?;
        check_query(&q.question, store)?;
        let skip = self.exclude(q).and_then(|id| store.index_of(id, EmbeddingKind::Image));
        let stage1: Vec<f64> = (0..ids.len())
            .map(|i| dot(&q.image, store.row(EmbeddingKind::Image, i)))
            .collect();
        let pool = select_top(&stage1, ids, pool_size, skip);

        let stage2: Vec<f64> = pool
            .iter()
            .map(|&i| dot(&q.question, store.row(EmbeddingKind::Image, i)))
            .collect();
        let pool_ids: Vec<String> = pool.iter().map(|&i| ids[i].clone()).collect();
        let entries = select_top(&stage2, &pool_ids, k, None)
            .into_iter()
            .map(|j| ScoredCandidate {
                example_id: pool_ids[j].clone(),
                score: stage2[j],
                components: BTreeMap::from([(TXT_IMG.to_string(), stage2[j])]),
            })
            .collect();
        Ok(RetrievalSet {
            provenance: Provenance::Corr,
            entries,
        })
    }
}

/// Uniform sample of `k` ids without replacement; scores are all zero.
pub fn random_select<'a>(
    ids: impl IntoIterator<Item = &'a str>,
    k: usize,
    seed: u64,
    exclude: Option<&str>,
) -> Result<RetrievalSet> {
    let pool: Vec<&str> = ids.into_iter().filter(|id| Some(*id) != exclude).collect();
    if k > pool.len() {
        return Err(Error::invalid(format!("cannot draw {k} examples from {}", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<&str> = rand::seq::index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    // all scores tie at zero, so id order is the canonical order
    picked.sort_unstable();
    Ok(RetrievalSet {
        provenance: Provenance::Random,
        entries: picked
            .into_iter()
            .map(|id| ScoredCandidate {
                example_id: id.to_string(),
                score: 0.0,
                components: BTreeMap::new(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::{normalize, EmbeddingRecord};

    fn store(items: &[(&str, [f32; 3], [f32; 3])]) -> EmbeddingStore {
        let mut s = EmbeddingStore::new();
        for (id, img, q) in items {
            for (kind, v) in [(EmbeddingKind::Image, img), (EmbeddingKind::Question, q)] {
                s.insert(EmbeddingRecord {
                    id: id.to_string(),
                    kind,
                    vector: normalize(v).unwrap(),
                })
                .unwrap();
            }
        }
        s
    }

    fn query(s: &EmbeddingStore, id: &str) -> QueryEmbedding {
        QueryEmbedding::from_store(s, id).unwrap()
    }

    fn demo() -> EmbeddingStore {
        store(&[
            ("a", [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
            ("b", [0.9, 0.1, 0.0], [0.0, 1.0, 0.0]),
            ("c", [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
            ("d", [0.5, 0.5, 0.0], [1.0, 1.0, 0.0]),
            ("e", [0.0, 0.0, 1.0], [0.0, 1.0, 1.0]),
        ])
    }

    #[test]
    fn self_similarity_ranks_first() {
        let s = demo();
        let v = s.get("c", EmbeddingKind::Image).unwrap().to_vec();
        let r = top_k(&v, &s, EmbeddingKind::Image, 2).unwrap();
        assert_eq!(r.entries[0].example_id, "c");
        assert!((r.entries[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn oversized_k_returns_everything_sorted() {
        let s = demo();
        let v = normalize(&[1.0, 1.0, 1.0]).unwrap();
        let r = top_k(&v, &s, EmbeddingKind::Image, 10).unwrap();
        assert_eq!(r.len(), 5);
        assert!(r.entries.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let s = store(&[
            ("z", [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
            ("m", [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
            ("a", [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
        ]);
        let r = top_k(&[1.0, 0.0, 0.0], &s, EmbeddingKind::Image, 2).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), ["a", "m"]);
    }

    #[test]
    fn rices_puts_member_first_without_exclusion() {
        let s = demo();
        let r = Retriever::new(&s)
            .with_exclude_self(false)
            .rices(&query(&s, "b"), 3)
            .unwrap();
        assert_eq!(r.entries[0].example_id, "b");
        assert_eq!(r.provenance, Provenance::Corr);
        let r = Retriever::new(&s).rices(&query(&s, "b"), 3).unwrap();
        assert!(r.ids().all(|id| id != "b"));
    }

    #[test]
    fn muier_hand_enumerated() {
        let s = demo();
        let q = query(&s, "a");
        let r = Retriever::new(&s).with_exclude_self(false).muier(&q, 5).unwrap();
        // score = <zI_q, zI_j> + <zI_q, zQ_j>, zI_q = e1
        let n = |v: [f32; 3]| normalize(&v).unwrap();
        let e1 = [1.0f32, 0.0, 0.0];
        let expect = |img: [f32; 3], qq: [f32; 3]| dot(&e1, &n(img)) + dot(&e1, &n(qq));
        let mut want = [
            ("a", expect([1.0, 0.0, 0.0], [1.0, 0.0, 0.0])),
            ("b", expect([0.9, 0.1, 0.0], [0.0, 1.0, 0.0])),
            ("c", expect([0.0, 1.0, 0.0], [0.0, 0.0, 1.0])),
            ("d", expect([0.5, 0.5, 0.0], [1.0, 1.0, 0.0])),
            ("e", expect([0.0, 0.0, 1.0], [0.0, 1.0, 1.0])),
        ];
        want.sort_by(|x, y| score_desc(x.1, y.1).then(x.0.cmp(y.0)));
        let got: Vec<_> = r.ids().collect();
        assert_eq!(got, want.iter().map(|w| w.0).collect::<Vec<_>>());
        for e in &r.entries {
            assert_eq!(e.components.keys().collect::<Vec<_>>(), [IMG_IMG, IMG_TXT]);
            assert!((e.score - e.components.values().sum::<f64>()).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_questions_make_text_terms_a_constant_offset() {
        let same = [0.3, 0.3, 0.9];
        let s = store(&[
            ("a", [1.0, 0.0, 0.0], same),
            ("b", [0.7, 0.7, 0.0], same),
            ("c", [0.0, 1.0, 0.2], same),
            ("d", [0.2, 0.1, 1.0], same),
        ]);
        let q = QueryEmbedding {
            id: "q".into(),
            image: normalize(&[0.8, 0.3, 0.1]).unwrap(),
            question: normalize(&same).unwrap(),
        };
        let r = Retriever::new(&s);
        let base: Vec<_> = r.rices(&q, 4).unwrap().ids().map(String::from).collect();
        let tt: Vec<_> = r
            .scorer_variant(&q, 4, IrScorer::ImgImgTxtTxt)
            .unwrap()
            .ids()
            .map(String::from)
            .collect();
        let mu: Vec<_> = r.muier(&q, 4).unwrap().ids().map(String::from).collect();
        let mu_base: Vec<_> = r
            .rices(&QueryEmbedding { ..q.clone() }, 4)
            .unwrap()
            .ids()
            .map(String::from)
            .collect();
        assert_eq!(base, tt);
        // muier adds <zI_q, zQ_j>, also constant here
        assert_eq!(mu, mu_base);
        assert_eq!(
            r.scorer_variant(&q, 4, IrScorer::ImgImg).unwrap(),
            r.rices(&q, 4).unwrap()
        );
    }

    #[test]
    fn mmices_two_stage_by_hand() {
        // 8 items; pool 4 by image-image, then re-rank by <zQ_q, zI_j>.
        let mut s = EmbeddingStore::new();
        let imgs: [[f32; 2]; 8] = [
            [1.0, 0.0],
            [0.95, 0.3],
            [0.9, 0.45],
            [0.8, 0.6],
            [0.6, 0.8],
            [0.3, 0.95],
            [0.1, 1.0],
            [0.0, 1.0],
        ];
        for (i, v) in imgs.iter().enumerate() {
            for kind in [EmbeddingKind::Image, EmbeddingKind::Question] {
                s.insert(EmbeddingRecord {
                    id: format!("x{i}"),
                    kind,
                    vector: normalize(v).unwrap(),
                })
                .unwrap();
            }
        }
        let q = QueryEmbedding {
            id: "q".into(),
            image: vec![1.0, 0.0],
            question: vec![0.0, 1.0],
        };
        // stage 1 pool = x0..x3 ; stage 2 favours the largest y component: x3, x2
        let r = Retriever::new(&s).mmices(&q, 2, 4).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), ["x3", "x2"]);
        assert_eq!(r.entries[0].components.keys().collect::<Vec<_>>(), [TXT_IMG]);

        // pool larger than corpus: same as ranking everything by stage 2
        let r = Retriever::new(&s).mmices(&q, 3, 1024).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), ["x7", "x6", "x5"]);

        assert!(Retriever::new(&s).mmices(&q, 5, 4).is_err());
    }

    #[test]
    fn random_select_is_seeded_permutation() {
        let ids: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
        let a = random_select(ids.iter().map(String::as_str), 10, 1, None).unwrap();
        let mut got: Vec<_> = a.ids().collect();
        got.sort();
        assert_eq!(got, ids.iter().map(String::as_str).collect::<Vec<_>>());
        let x = random_select(ids.iter().map(String::as_str), 4, 9, None).unwrap();
        let y = random_select(ids.iter().map(String::as_str), 4, 9, None).unwrap();
        assert_eq!(x, y);
        assert!(x.entries.iter().all(|e| e.score == 0.0));
        assert_eq!(x.provenance, Provenance::Random);
        assert!(random_select(ids.iter().map(String::as_str), 11, 0, None).is_err());
    }

    #[test]
    fn random_select_is_uniform() {
        let ids: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
        let mut counts = BTreeMap::new();
        for seed in 0..10_000u64 {
            let r = random_select(ids.iter().map(String::as_str), 1, seed, None).unwrap();
            *counts.entry(r.entries[0].example_id.clone()).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 10);
        for (id, c) in counts {
            assert!((900..=1100).contains(&c), "{id}: {c}");
        }
    }

    #[test]
    fn zero_k_rejected() {
        let s = demo();
        assert!(top_k(&[1.0, 0.0, 0.0], &s, EmbeddingKind::Image, 0).is_err());
    }
}
