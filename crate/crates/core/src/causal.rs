//! The causal branch: ask the model which attributes decide the answer,
//! rewrite the query description with each attribute changed, and retrieve
//! examples that look like each rewrite.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::embedstore::{EmbeddingKind, EmbeddingStore, TextEmbeddings};
use crate::endpoint::RetryPolicy;
use crate::error::{Error, Result};
use crate::inference::{chat, ChatModel, Usage};
use crate::prompting::{attribute_prompt, caption_prompt, CausalBlock};
use crate::retrieval::{
    rank_terms, score_desc, Provenance, QueryEmbedding, RetrievalSet, ScoreWeights, ScoredCandidate, Term, IMG_CAPTION,
    TXT_TXT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSource {
    Vlm,
    Dataset,
}

/// Attribute names, most important first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSet {
    pub attributes: Vec<String>,
    pub source: AttributeSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeIntervention {
    pub attribute: String,
    pub caption: String,
    #[serde(skip)]
    pub caption_vec: Arc<[f32]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub k_corr: usize,
    pub k_causal: usize,
    pub num_attributes: usize,
    pub per_attribute_k: usize,
}

impl BudgetConfig {
    pub fn total(&self) -> usize {
        self.k_corr + self.k_causal
    }

    /// Independent breadth and depth: `num_attributes` interventions of
    /// `per_attribute_k` examples each on top of `k_corr`.
    pub fn grid(k_corr: usize, num_attributes: usize, per_attribute_k: usize) -> Result<Self> {
        if num_attributes == 0 || per_attribute_k == 0 {
            return Err(Error::invalid("num_attributes and per_attribute_k must be positive"));
        }
        Ok(BudgetConfig {
            k_corr,
            k_causal: num_attributes * per_attribute_k,
            num_attributes,
            per_attribute_k,
        })
    }

    /// Everything to the correlational branch; used when extraction fails.
    pub fn degraded(&self) -> Self {
        BudgetConfig {
            k_corr: self.total(),
            k_causal: 0,
            ..*self
        }
    }
}

/// Splits `total` into correlational and causal parts.
pub fn allocate_budget(total: usize, num_attributes: usize, k_corr: usize) -> Result<BudgetConfig> {
    if total == 0 {
        return Err(Error::invalid("budget must be positive"));
    }
    if num_attributes == 0 {
        return Err(Error::invalid("num_attributes must be positive"));
    }
    if k_corr > total {
        return Err(Error::invalid(format!("k_corr {k_corr} exceeds budget {total}")));
    }
    let k_causal = total - k_corr;
    Ok(BudgetConfig {
        k_corr,
        k_causal,
        num_attributes,
        per_attribute_k: k_causal.div_ceil(num_attributes).max(1),
    })
}

fn clean_attribute_line(line: &str) -> Option<String> {
    let mut s = line.trim();
    // list markers: "-", "*", "•", "1.", "2)", ...
    s = s.trim_start_matches(['-', '*', '•', '+']).trim_start();
    let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 && s[digits..].starts_with(['.', ')', ':']) {
        s = s[digits + 1..].trim_start();
    }
    let mut s = s.replace("**", "").replace('`', "");
    // "wing color: red" names the attribute "wing color"
    if let Some(i) = s.find(':') {
        s.truncate(i);
    }
    let s = s
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c == ',')
        .trim()
        .to_string();
    (!s.is_empty()).then_some(s)
}

/// Reads the `### Attributes` section of a response.
///
/// Any markdown heading level is accepted. The section ends at the next
/// heading or the end of text. `None` when no such heading exists or it
/// lists nothing.
pub fn parse_attributes(text: &str, max: usize) -> Option<Vec<String>> {
    let mut lines = text.lines();
    lines.by_ref().find(|l| {
        let t = l.trim();
        t.starts_with('#')
            && t.trim_start_matches('#')
                .trim()
                .trim_end_matches(':')
                .eq_ignore_ascii_case("attributes")
    })?;
    let mut out: Vec<String> = Vec::new();
    for l in lines {
        if l.trim_start().starts_with('#') {
            break;
        }
        if let Some(a) = clean_attribute_line(l) {
            if !out.iter().any(|x| x.eq_ignore_ascii_case(&a)) {
                out.push(a);
            }
        }
    }
    out.truncate(max);
    (!out.is_empty()).then_some(out)
}

/// Asks for up to `max_attrs` attributes; one retry if the section is missing.
/// Usage of every call is added to `usage`, failed attempts included.
pub fn extract_attributes(
    vlm: &dyn ChatModel,
    query: &Example,
    max_attrs: usize,
    max_tokens: u32,
    retry: &RetryPolicy,
    usage: &mut Usage,
) -> Result<AttributeSet> {
    if max_attrs == 0 {
        return Err(Error::invalid("max_attrs must be positive"));
    }
    let prompt = attribute_prompt(query, max_attrs);
    for _ in 0..2 {
        let r = chat(vlm, &prompt, 0.0, max_tokens, retry)?;
        usage.add(Usage::of(&r));
        if let Some(attributes) = parse_attributes(&r.text, max_attrs) {
            return Ok(AttributeSet {
                attributes,
                source: AttributeSource::Vlm,
            });
        }
    }
    Err(Error::AttributeExtractionFailed)
}

/// Caption text: whatever follows the last `Edited Description:` marker,
/// or the whole trimmed response when there is none.
pub fn parse_caption(text: &str) -> Option<String> {
    const MARK: &str = "edited description:";
    let lower = text.to_ascii_lowercase();
    let body = match lower.rfind(MARK) {
        Some(i) => &text[i + MARK.len()..],
        None => text,
    };
    let c = body
        .trim()
        .trim_matches(|c: char| c == '"' || c == '*')
        .trim()
        .to_string();
    (!c.is_empty()).then_some(c)
}

pub fn generate_cf_caption(
    vlm: &dyn ChatModel,
    embeddings: &TextEmbeddings<'_>,
    query: &Example,
    attribute: &str,
    max_tokens: u32,
    retry: &RetryPolicy,
    usage: &mut Usage,
) -> Result<AttributeIntervention> {
    let r = chat(vlm, &caption_prompt(query, attribute), 0.0, max_tokens, retry)?;
    usage.add(Usage::of(&r));
    let caption = parse_caption(&r.text).ok_or_else(|| Error::EmptyCaption {
        attribute: attribute.to_string(),
    })?;
    let caption_vec = embeddings.embed_text(&caption)?;
    Ok(AttributeIntervention {
        attribute: attribute.to_string(),
        caption,
        caption_vec,
    })
}

/// Composed retrieval: candidate image against the counterfactual caption,
/// plus (optionally) query question against candidate question.
#[derive(Debug, Clone, Copy)]
pub struct CounterfactualRetriever<'s> {
    pub store: &'s EmbeddingStore,
    pub weights: ScoreWeights,
    /// Include the question-question term.
    pub use_text: bool,
    pub exclude_self: bool,
}

impl<'s> CounterfactualRetriever<'s> {
    pub fn new(store: &'s EmbeddingStore) -> Self {
        CounterfactualRetriever {
            store,
            weights: ScoreWeights::default(),
            use_text: true,
            exclude_self: true,
        }
    }

    fn terms<'q>(&self, caption_vec: &'q [f32], query_question: &'q [f32]) -> Vec<Term<'q>> {
        let mut t = vec![Term {
            name: IMG_CAPTION,
            weight: self.weights.img_caption,
            query: caption_vec,
            kind: EmbeddingKind::Image,
        }];
        if self.use_text {
            t.push(Term {
                name: TXT_TXT,
                weight: self.weights.txt_txt,
                query: query_question,
                kind: EmbeddingKind::Question,
            });
        }
        t
    }

    /// Top `k` for one intervention; `k >= corpus size` gives the full ranking.
    pub fn retrieve(
        &self,
        intervention: &AttributeIntervention,
        query: &QueryEmbedding,
        k: usize,
    ) -> Result<RetrievalSet> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        rank_terms(
            self.store,
            EmbeddingKind::Image,
            &self.terms(&intervention.caption_vec, &query.question),
            k,
            self.exclude_self.then_some(query.id.as_str()),
            Provenance::Causal(intervention.attribute.clone()),
        )
    }

    pub fn full_ranking(&self, intervention: &AttributeIntervention, query: &QueryEmbedding) -> Result<RetrievalSet> {
        self.retrieve(intervention, query, self.store.len(EmbeddingKind::Image).max(1))
    }
}

fn component_score(store: &EmbeddingStore, id: &str, kind: EmbeddingKind, v: &[f32]) -> Result<f64> {
    let row = store.require(id, kind)?;
    if row.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: row.len(),
            got: v.len(),
        });
    }
    Ok(crate::embedstore::dot(row, v))
}

/// Candidate image against the caption plus query question against candidate
/// question, for a single candidate.
pub fn cir_score(
    caption_vec: &[f32],
    query_question_vec: &[f32],
    candidate_id: &str,
    store: &EmbeddingStore,
) -> Result<ScoredCandidate> {
    let img = component_score(store, candidate_id, EmbeddingKind::Image, caption_vec)?;
    let txt = component_score(store, candidate_id, EmbeddingKind::Question, query_question_vec)?;
    Ok(ScoredCandidate {
        example_id: candidate_id.to_string(),
        score: img + txt,
        components: BTreeMap::from([(IMG_CAPTION.to_string(), img), (TXT_TXT.to_string(), txt)]),
    })
}

/// Caption term only.
pub fn cir_score_no_text(caption_vec: &[f32], candidate_id: &str, store: &EmbeddingStore) -> Result<ScoredCandidate> {
    let img = component_score(store, candidate_id, EmbeddingKind::Image, caption_vec)?;
    Ok(ScoredCandidate {
        example_id: candidate_id.to_string(),
        score: img,
        components: BTreeMap::from([(IMG_CAPTION.to_string(), img)]),
    })
}

/// Merges per-attribute rankings into the causal pool.
///
/// `rankings` are full rankings in attribute-importance order. Ids in
/// `exclude` (normally the correlational block) are never taken. Each
/// attribute starts with its first `per_attribute_k` candidates. An id
/// claimed by several attributes stays with the highest score, earlier
/// attribute on ties; an attribute that lost entries this way refills from
/// its own next-ranked candidates while the pool is short of `k_causal`.
/// A pool that is still too large loses the last entry of its largest block,
/// later attributes first, until it fits.
pub fn build_causal_pool(
    rankings: &[RetrievalSet],
    budget: &BudgetConfig,
    exclude: &HashSet<&str>,
) -> Vec<RetrievalSet> {
    let lists: Vec<Vec<&ScoredCandidate>> = rankings
        .iter()
        .map(|r| {
            r.entries
                .iter()
                .filter(|c| !exclude.contains(c.example_id.as_str()))
                .collect()
        })
        .collect();
    let per_k = budget.per_attribute_k;
    let mut blocks: Vec<Vec<&ScoredCandidate>> =
        lists.iter().map(|l| l.iter().take(per_k).copied().collect()).collect();
    let mut cursors: Vec<usize> = blocks.iter().map(Vec::len).collect();
    let mut dropped = vec![0usize; blocks.len()];

    // winner for every id claimed by an initial window
    let mut owner: HashMap<&str, usize> = HashMap::new();
    for (i, b) in blocks.iter().enumerate() {
        for c in b {
            let id = c.example_id.as_str();
            match owner.get(id) {
                Some(&j) => {
                    let held = blocks[j].iter().find(|x| x.example_id == id).unwrap().score;
                    if c.score > held {
                        owner.insert(id, i);
                    }
                }
                None => {
                    owner.insert(id, i);
                }
            }
        }
    }
    for (i, b) in blocks.iter_mut().enumerate() {
        let before = b.len();
        b.retain(|c| owner[c.example_id.as_str()] == i);
        dropped[i] = before - b.len();
    }

    let size = |blocks: &Vec<Vec<&ScoredCandidate>>| blocks.iter().map(Vec::len).sum::<usize>();
    for i in 0..blocks.len() {
        while dropped[i] > 0 && size(&blocks) < budget.k_causal && cursors[i] < lists[i].len() {
            let c = lists[i][cursors[i]];
            cursors[i] += 1;
            if owner.contains_key(c.example_id.as_str()) {
                continue;
            }
            owner.insert(c.example_id.as_str(), i);
            blocks[i].push(c);
            dropped[i] -= 1;
        }
    }

    while size(&blocks) > budget.k_causal {
        let largest = blocks.iter().map(Vec::len).max().unwrap();
        let i = blocks.iter().rposition(|b| b.len() == largest).unwrap();
        blocks[i].pop();
    }

    rankings
        .iter()
        .zip(blocks)
        .map(|(r, b)| RetrievalSet {
            provenance: r.provenance.clone(),
            entries: b.into_iter().cloned().collect(),
        })
        .collect()
}

/// Dataset-annotation attribute ranking: in-class frequency minus the
/// highest frequency in any other class, keeping only attributes present in
/// the image.
pub fn rank_dataset_attributes(
    freq_table: &BTreeMap<String, BTreeMap<String, f64>>,
    class_label: &str,
    present: &HashSet<&str>,
    max: usize,
) -> Result<AttributeSet> {
    let own = freq_table
        .get(class_label)
        .ok_or_else(|| Error::UnknownClass(class_label.to_string()))?;
    for (class, row) in freq_table {
        if let Some((a, f)) = row.iter().find(|(_, f)| !(0.0..=1.0).contains(*f)) {
            return Err(Error::invalid(format!("frequency {f} for {class}/{a} outside [0, 1]")));
        }
    }
    let mut scored: Vec<(f64, &str)> = own
        .iter()
        .filter(|(a, _)| present.contains(a.as_str()))
        .map(|(a, f)| {
            let rival = freq_table
                .iter()
                .filter(|(c, _)| c.as_str() != class_label)
                .map(|(_, row)| row.get(a).copied().unwrap_or(0.0))
                .fold(0.0, f64::max);
            (f - rival, a.as_str())
        })
        .collect();
    scored.sort_by(|x, y| score_desc(x.0, y.0).then_with(|| x.1.cmp(y.1)));
    let attributes: Vec<String> = scored.into_iter().take(max).map(|(_, a)| a.to_string()).collect();
    if attributes.is_empty() {
        return Err(Error::NoAttributes(class_label.to_string()));
    }
    Ok(AttributeSet {
        attributes,
        source: AttributeSource::Dataset,
    })
}

/// Everything the causal branch produced for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalOutcome {
    pub attributes: Vec<String>,
    pub interventions: Vec<AttributeIntervention>,
    pub blocks: Vec<CausalBlock>,
}

/// Retrieves the causal blocks for given interventions, skipping `exclude`.
pub fn causal_blocks(
    retriever: &CounterfactualRetriever<'_>,
    interventions: &[AttributeIntervention],
    query: &QueryEmbedding,
    budget: &BudgetConfig,
    exclude: &HashSet<&str>,
) -> Result<Vec<CausalBlock>> {
    let rankings = interventions
        .iter()
        .map(|iv| retriever.full_ranking(iv, query))
        .collect::<Result<Vec<_>>>()?;
    Ok(interventions
        .iter()
        .zip(build_causal_pool(&rankings, budget, exclude))
        .map(|(iv, set)| CausalBlock {
            attribute: iv.attribute.clone(),
            caption: iv.caption.clone(),
            set,
        })
        .collect())
}
