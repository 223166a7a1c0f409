//! Prompt templates.
//!
//! A prompt is a flat list of text and image-reference segments. Images are
//! never inlined; the chat client turns references into content parts, and
//! [`PromptBundle::render_text`] shows them as `<image:REF>` lines so a
//! prompt can be logged or diffed as plain text.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Example, TaskKind};
use crate::error::{Error, Result};
use crate::retrieval::{score_desc, RetrievalSet, ScoredCandidate};

/// System prompt for counterfactual caption requests. It asks for a short
/// description of the reference image, then the edit, then one final
/// `Edited Description:` line that [`crate::causal::parse_caption`] reads.
pub const CAPTION_SYSTEM_PROMPT: &str = "You are an assistant that edits image descriptions. \
You receive a reference image and a manipulation text. \
First, briefly describe the reference image, focusing on the content the manipulation refers to. \
Then apply the manipulation to that description: change only what it asks for and keep every other detail. \
Finish with a single line that starts with \"Edited Description:\" followed by the description of the edited image.";

const ANSWER_INSTRUCTION: &str = "Please provide your response by directly outputting the answer.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Text(String),
    Image(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub segments: Vec<Segment>,
    pub task_type: String,
}

impl PromptBundle {
    fn new(task_type: &str) -> Self {
        PromptBundle {
            system: None,
            segments: Vec::new(),
            task_type: task_type.to_string(),
        }
    }

    fn text(&mut self, s: &str) -> &mut Self {
        if let Some(Segment::Text(last)) = self.segments.last_mut() {
            last.push_str(s);
        } else {
            self.segments.push(Segment::Text(s.to_string()));
        }
        self
    }

    fn image(&mut self, r: &str) -> &mut Self {
        self.segments.push(Segment::Image(r.to_string()));
        self
    }

    /// User-turn text with images shown as `<image:REF>`.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            match s {
                Segment::Text(t) => out.push_str(t),
                Segment::Image(r) => {
                    out.push_str("<image:");
                    out.push_str(r);
                    out.push('>');
                }
            }
        }
        out
    }

    pub fn image_refs(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Image(r) => Some(r.as_str()),
            Segment::Text(_) => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    None,
    Icl,
    Circles,
    IclPlusAttr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalBlock {
    pub attribute: String,
    pub caption: String,
    pub set: RetrievalSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemonstrationContext {
    pub mode: PromptMode,
    pub corr_block: Option<RetrievalSet>,
    pub causal_blocks: Vec<CausalBlock>,
    /// Class names offered to the model; required for classification.
    pub options: Option<Vec<String>>,
    /// Least similar first inside each block.
    pub ascending: bool,
}

impl DemonstrationContext {
    pub fn none(options: Option<Vec<String>>) -> Self {
        DemonstrationContext {
            mode: PromptMode::None,
            corr_block: None,
            causal_blocks: Vec::new(),
            options,
            ascending: false,
        }
    }

    pub fn icl(corr: RetrievalSet, options: Option<Vec<String>>) -> Self {
        DemonstrationContext {
            mode: PromptMode::Icl,
            corr_block: Some(corr),
            causal_blocks: Vec::new(),
            options,
            ascending: false,
        }
    }

    pub fn circles(corr: RetrievalSet, causal: Vec<CausalBlock>, options: Option<Vec<String>>) -> Self {
        DemonstrationContext {
            mode: PromptMode::Circles,
            corr_block: Some(corr),
            causal_blocks: causal,
            options,
            ascending: false,
        }
    }

    pub fn demo_count(&self) -> usize {
        self.corr_block.as_ref().map_or(0, RetrievalSet::len)
            + self.causal_blocks.iter().map(|b| b.set.len()).sum::<usize>()
    }
}

fn ordered(set: &RetrievalSet, ascending: bool) -> Vec<&ScoredCandidate> {
    let mut v: Vec<&ScoredCandidate> = set.entries.iter().collect();
    v.sort_by(|a, b| score_desc(a.score, b.score).then_with(|| a.example_id.cmp(&b.example_id)));
    if ascending {
        v.reverse();
    }
    v
}

fn header(
    b: &mut PromptBundle,
    ctx: &DemonstrationContext,
    query: &Example,
    task_type: &str,
    classification: bool,
) -> Result<()> {
    b.text(&format!("Your task is to perform {task_type}."));
    if classification {
        let opts = ctx
            .options
            .as_ref()
            .filter(|o| !o.is_empty())
            .ok_or(Error::MissingOptions)?;
        b.text(&format!(
            " You need to choose one of the following options: {}",
            opts.join(", ")
        ));
    }
    b.text("\n\n").image(&query.image_ref);
    b.text(&format!("\nQuestion: {}\n\n", query.question));
    Ok(())
}

fn demos(b: &mut PromptBundle, set: &RetrievalSet, corpus: &Corpus, ascending: bool) -> Result<()> {
    for c in ordered(set, ascending) {
        let ex = corpus
            .get(&c.example_id)
            .ok_or_else(|| Error::UnknownExample(c.example_id.clone()))?;
        b.image(&ex.image_ref);
        b.text(&format!("\nQuestion: {}\nAnswer: {}\n\n", ex.question, ex.label()));
    }
    Ok(())
}

fn footer(b: &mut PromptBundle, query: &Example) {
    b.text("Here is the original question again.\n").image(&query.image_ref);
    b.text(&format!("\nQuestion: {}\n\n{ANSWER_INSTRUCTION}", query.question));
}

fn build(
    ctx: &DemonstrationContext,
    query: &Example,
    corpus: &Corpus,
    task_type: &str,
    attributes: Option<&[String]>,
) -> Result<PromptBundle> {
    let classification = corpus.task_kind() == TaskKind::Classification;
    let mut b = PromptBundle::new(task_type);
    header(&mut b, ctx, query, task_type, classification)?;

    if ctx.mode == PromptMode::None {
        if ctx.demo_count() > 0 {
            return Err(Error::invalid("mode none takes no demonstrations"));
        }
        b.text(ANSWER_INSTRUCTION);
        return Ok(b);
    }
    if ctx.mode != PromptMode::Circles && !ctx.causal_blocks.is_empty() {
        return Err(Error::invalid("causal blocks are only rendered in circles mode"));
    }

    if let Some(attrs) = attributes.filter(|a| !a.is_empty()) {
        b.text(&format!("Key attributes to consider: {}\n\n", attrs.join(", ")));
    }

    let corr = ctx.corr_block.as_ref();
    let corr_len = corr.map_or(0, RetrievalSet::len);
    // With the correlational block empty (causal-only runs) the count line
    // would announce zero examples, so it is left out.
    if ctx.mode != PromptMode::Circles || corr_len > 0 {
        b.text(&format!(
            "Here are {corr_len} in-context examples to help you answer the question:\n\n"
        ));
    }
    if let Some(set) = corr {
        demos(&mut b, set, corpus, ctx.ascending)?;
    }
    for block in &ctx.causal_blocks {
        b.text(&format!(
            "Examples retrieved based on the target image description after changing {} (caption: {}):\n\n",
            block.attribute, block.caption
        ));
        demos(&mut b, &block.set, corpus, ctx.ascending)?;
    }
    footer(&mut b, query);
    Ok(b)
}

/// Fills the template matching `ctx.mode`.
///
/// Classification corpora get the closed option list after the task sentence.
pub fn assemble(ctx: &DemonstrationContext, query: &Example, corpus: &Corpus, task_type: &str) -> Result<PromptBundle> {
    if ctx.mode == PromptMode::IclPlusAttr {
        return build(ctx, query, corpus, task_type, Some(&[]));
    }
    build(ctx, query, corpus, task_type, None)
}

/// ICL prompt plus a one-line note listing the extracted attributes.
pub fn assemble_attr_only(
    ctx: &DemonstrationContext,
    query: &Example,
    corpus: &Corpus,
    attributes: &[String],
    task_type: &str,
) -> Result<PromptBundle> {
    if !ctx.causal_blocks.is_empty() {
        return Err(Error::invalid("attribute-only prompts take no causal blocks"));
    }
    build(ctx, query, corpus, task_type, Some(attributes))
}

/// Request for the query's most answer-relevant attributes.
pub fn attribute_prompt(query: &Example, num_attributes: usize) -> PromptBundle {
    let mut b = PromptBundle::new("Attribute Extraction");
    b.text("Identify the key attributes of the following image that are most relevant to answering the question.\n\n")
        .image(&query.image_ref);
    b.text(&format!(
        "\nQuestion: {}\n\nPlease list the top {num_attributes} key attributes as short phrases in a section named '### Attributes', one per line, ordered from most to least important.",
        query.question
    ));
    b
}

/// Request for a caption of the query image with `attribute` changed.
pub fn caption_prompt(query: &Example, attribute: &str) -> PromptBundle {
    let mut b = PromptBundle::new("Counterfactual Caption");
    b.system = Some(CAPTION_SYSTEM_PROMPT.to_string());
    b.image(&query.image_ref);
    b.text(&format!(
        "\n\nManipulation Text: Change the attribute {attribute} to a different plausible value. Ensure the modified caption is concise and contains no more than 77 tokens."
    ));
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::Provenance;
    use std::collections::BTreeMap;

    fn vqa() -> Corpus {
        Corpus::from_examples(
            vec![
                Example::new("d1", "img/d1.jpg", "What sport is this?", "tennis"),
                Example::new("d2", "img/d2.jpg", "What is the man holding?", "racket"),
            ],
            TaskKind::OpenVqa,
        )
        .unwrap()
    }

    fn set(ids: &[(&str, f64)], p: Provenance) -> RetrievalSet {
        RetrievalSet {
            provenance: p,
            entries: ids
                .iter()
                .map(|(id, s)| ScoredCandidate {
                    example_id: id.to_string(),
                    score: *s,
                    components: BTreeMap::new(),
                })
                .collect(),
        }
    }

    fn q() -> Example {
        Example::new("q", "img/q.jpg", "What game is being played?", "tennis")
    }

    #[test]
    fn none_prompt_has_no_restatement() {
        let p = assemble(
            &DemonstrationContext::none(None),
            &q(),
            &vqa(),
            "Visual Question Answering",
        )
        .unwrap();
        assert_eq!(
            p.render_text(),
            "Your task is to perform Visual Question Answering.\n\n<image:img/q.jpg>\nQuestion: What game is being played?\n\nPlease provide your response by directly outputting the answer."
        );
    }

    #[test]
    fn blocks_sorted_descending_unless_ascending() {
        let ctx = DemonstrationContext::icl(set(&[("d2", 0.1), ("d1", 0.9)], Provenance::Corr), None);
        let text = assemble(&ctx, &q(), &vqa(), "Visual Question Answering")
            .unwrap()
            .render_text();
        assert!(text.find("img/d1").unwrap() < text.find("img/d2").unwrap());
        let mut asc = ctx.clone();
        asc.ascending = true;
        let text = assemble(&asc, &q(), &vqa(), "Visual Question Answering")
            .unwrap()
            .render_text();
        assert!(text.find("img/d2").unwrap() < text.find("img/d1").unwrap());
    }

    #[test]
    fn empty_causal_circles_equals_icl() {
        let corr = set(&[("d1", 0.9)], Provenance::Corr);
        let a = assemble(
            &DemonstrationContext::icl(corr.clone(), None),
            &q(),
            &vqa(),
            "Visual Question Answering",
        )
        .unwrap();
        let b = assemble(
            &DemonstrationContext::circles(corr, vec![], None),
            &q(),
            &vqa(),
            "Visual Question Answering",
        )
        .unwrap();
        assert_eq!(a.segments, b.segments);
    }

    #[test]
    fn unknown_demo_id_is_an_error() {
        let ctx = DemonstrationContext::icl(set(&[("nope", 1.0)], Provenance::Corr), None);
        assert!(matches!(
            assemble(&ctx, &q(), &vqa(), "Visual Question Answering"),
            Err(Error::UnknownExample(_))
        ));
    }

    #[test]
    fn classification_requires_options() {
        let c = Corpus::from_examples(
            vec![Example::new(
                "a",
                "a.jpg",
                "What is the category of the bird in this image?",
                "wren",
            )],
            TaskKind::Classification,
        )
        .unwrap();
        let qq = Example::new("q", "q.jpg", "What is the category of the bird in this image?", "wren");
        assert!(matches!(
            assemble(&DemonstrationContext::none(None), &qq, &c, "Image Classification"),
            Err(Error::MissingOptions)
        ));
        let p = assemble(
            &DemonstrationContext::none(Some(vec!["wren".into(), "finch".into()])),
            &qq,
            &c,
            "Image Classification",
        )
        .unwrap();
        assert!(p.render_text().starts_with(
            "Your task is to perform Image Classification. You need to choose one of the following options: wren, finch\n\n"
        ));
    }

    #[test]
    fn no_placeholders_and_query_restated() {
        let ctx = DemonstrationContext::circles(
            set(&[("d1", 0.5)], Provenance::Corr),
            vec![CausalBlock {
                attribute: "color".into(),
                caption: "a blue ball".into(),
                set: set(&[("d2", 0.4)], Provenance::Causal("color".into())),
            }],
            None,
        );
        let p = assemble(&ctx, &q(), &vqa(), "Visual Question Answering").unwrap();
        let t = p.render_text();
        assert!(!t.contains("{{"));
        assert_eq!(t.matches("<image:img/q.jpg>").count(), 2);
        assert_eq!(t.matches("\nAnswer: ").count(), 2);
        assert!(t.contains("after changing color (caption: a blue ball):\n\n<image:img/d2.jpg>"));
    }

    #[test]
    fn attribute_note_is_the_only_difference() {
        let ctx = DemonstrationContext::icl(set(&[("d1", 0.9)], Provenance::Corr), None);
        let plain = assemble(&ctx, &q(), &vqa(), "Visual Question Answering")
            .unwrap()
            .render_text();
        let same = assemble_attr_only(&ctx, &q(), &vqa(), &[], "Visual Question Answering")
            .unwrap()
            .render_text();
        assert_eq!(plain, same);
        let with = assemble_attr_only(&ctx, &q(), &vqa(), &["ball color".into()], "Visual Question Answering")
            .unwrap()
            .render_text();
        assert_eq!(with.replace("Key attributes to consider: ball color\n\n", ""), plain);
    }

    #[test]
    fn caption_prompt_carries_system_text() {
        let p = caption_prompt(&q(), "net height");
        assert_eq!(p.system.as_deref(), Some(CAPTION_SYSTEM_PROMPT));
        assert!(p.render_text().ends_with("contains no more than 77 tokens."));
        assert!(p
            .render_text()
            .contains("Change the attribute net height to a different"));
    }
}
