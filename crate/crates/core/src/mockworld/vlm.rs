use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{intervene, Schema, IMAGE_PREFIX};
use crate::error::{Error, Result};
use crate::inference::{ChatModel, ChatResponse};
use crate::prompting::{PromptBundle, Segment};

/// Prompt tokens charged per image in counted mode.
pub const IMAGE_TOKENS: u64 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockUsage {
    /// Whitespace words plus [`IMAGE_TOKENS`] per image.
    Counted,
    /// Constant `(prompt, completion)` tokens per call type.
    Fixed {
        extraction: (u64, u64),
        caption: (u64, u64),
        answer: (u64, u64),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Call {
    Extraction(usize),
    Caption,
    Answer,
}

/// Deterministic stand-in for a vision-language model on the mock world.
///
/// * Attribute requests list the schema's attribute names with the
///   decisive one at `decisive_rank` (0 = first), confounders before free
///   attributes otherwise.
/// * Caption requests return the query description with the named
///   attribute advanced to its next value.
/// * Answer requests return the label of the first demonstration sharing
///   the query's decisive value; failing that the majority label among the
///   demonstrations, smallest label on ties; `unknown` with no demonstrations.
#[derive(Debug, Clone)]
pub struct MockVlm {
    schema: Schema,
    decisive_rank: usize,
    usage: MockUsage,
    fail_images: BTreeSet<String>,
}

fn words(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl MockVlm {
    pub fn new(schema: Schema) -> Self {
        MockVlm {
            schema,
            decisive_rank: 1,
            usage: MockUsage::Counted,
            fail_images: BTreeSet::new(),
        }
    }

    pub fn with_decisive_rank(mut self, rank: usize) -> Self {
        self.decisive_rank = rank;
        self
    }

    pub fn with_usage(mut self, usage: MockUsage) -> Self {
        self.usage = usage;
        self
    }

    /// Every request whose query image is in `images` fails permanently.
    pub fn with_failures<I: IntoIterator<Item = String>>(mut self, images: I) -> Self {
        self.fail_images = images.into_iter().collect();
        self
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn attribute_order(&self) -> Vec<&str> {
        let mut rest: Vec<&str> = self.schema.names[1..].iter().map(String::as_str).collect();
        let at = self.decisive_rank.min(rest.len());
        rest.insert(at, self.schema.decisive());
        rest
    }

    fn classify(text: &str) -> Result<Call> {
        if text.contains("in a section named '### Attributes'") {
            let n = text
                .split("Please list the top ")
                .nth(1)
                .and_then(|t| t.split_whitespace().next())
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| Error::MalformedRequest("attribute count missing".into()))?;
            return Ok(Call::Extraction(n));
        }
        if text.contains("Manipulation Text: Change the attribute ") {
            return Ok(Call::Caption);
        }
        Ok(Call::Answer)
    }

    fn values_of(&self, image: &str) -> Result<Vec<usize>> {
        image
            .strip_prefix(IMAGE_PREFIX)
            .and_then(|d| self.schema.parse_full(d))
            .ok_or_else(|| Error::MalformedRequest(format!("not a mock-world image: {image}")))
    }

    fn answer(&self, prompt: &PromptBundle, query: &[usize]) -> Result<String> {
        let segs = &prompt.segments;
        let mut labels: Vec<(usize, &str)> = Vec::new();
        for w in segs.windows(2).skip(1) {
            if let [Segment::Image(r), Segment::Text(t)] = w {
                if let Some(rest) = t.split("\nAnswer: ").nth(1) {
                    let label = rest.lines().next().unwrap_or("").trim();
                    labels.push((self.values_of(r)?[0], label));
                }
            }
        }
        if let Some((_, l)) = labels.iter().find(|(d, _)| *d == query[0]) {
            return Ok(l.to_string());
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (_, l) in &labels {
            *counts.entry(l).or_default() += 1;
        }
        let best = counts.values().copied().max().unwrap_or(0);
        Ok(counts
            .into_iter()
            .find(|(_, c)| *c == best)
            .map_or_else(|| "unknown".to_string(), |(l, _)| l.to_string()))
    }

    pub fn respond(&self, prompt: &PromptBundle, max_tokens: u32) -> Result<ChatResponse> {
        let text = prompt.render_text();
        let query_image = prompt
            .image_refs()
            .next()
            .ok_or_else(|| Error::MalformedRequest("request has no image".into()))?;
        if self.fail_images.contains(query_image) {
            return Err(Error::request("injected failure", false));
        }
        let query = self.values_of(query_image)?;
        let call = Self::classify(&text)?;
        let reply = match call {
            Call::Extraction(n) => {
                let mut order = self.attribute_order();
                order.truncate(n.max(1));
                format!("### Attributes\n{}", order.join("\n"))
            }
            Call::Caption => {
                let attr = text
                    .split("Change the attribute ")
                    .nth(1)
                    .and_then(|t| t.split(" to a different plausible value").next())
                    .ok_or_else(|| Error::MalformedRequest("attribute missing".into()))?;
                let edited = intervene(&self.schema, &query, attr.trim());
                format!("Edited Description: {}", self.schema.render(&edited))
            }
            Call::Answer => self.answer(prompt, &query)?,
        };

        let mut completion: Vec<&str> = reply.split_whitespace().collect();
        let truncated = completion.len() > max_tokens as usize;
        let reply = if truncated {
            completion.truncate(max_tokens as usize);
            completion.join(" ")
        } else {
            reply
        };
        let (prompt_tokens, completion_tokens) = match self.usage {
            MockUsage::Counted => {
                let mut p = prompt.system.as_deref().map_or(0, words);
                for s in &prompt.segments {
                    p += match s {
                        Segment::Text(t) => words(t),
                        Segment::Image(_) => IMAGE_TOKENS,
                    };
                }
                (p, words(&reply))
            }
            MockUsage::Fixed {
                extraction,
                caption,
                answer,
            } => match call {
                Call::Extraction(_) => extraction,
                Call::Caption => caption,
                Call::Answer => answer,
            },
        };
        Ok(ChatResponse {
            text: reply,
            prompt_tokens,
            completion_tokens,
            finish_reason: Some(if truncated { "length" } else { "stop" }.to_string()),
        })
    }
}

impl ChatModel for MockVlm {
    fn complete(&self, prompt: &PromptBundle, _temperature: f64, max_tokens: u32) -> Result<ChatResponse> {
        self.respond(prompt, max_tokens)
    }

    fn model(&self) -> &str {
        "mock-vlm"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::{parse_attributes, parse_caption};
    use crate::prompting::{attribute_prompt, caption_prompt};

    fn vlm() -> MockVlm {
        MockVlm::new(Schema::new(4, 4, 1).unwrap())
    }

    fn img(vals: &[usize]) -> String {
        format!("{IMAGE_PREFIX}{}", Schema::new(4, 4, 1).unwrap().render(vals))
    }

    fn answer_prompt(query: &[usize], demos: &[(&[usize], &str)]) -> PromptBundle {
        let mut segs = vec![
            Segment::Text("Your task is to perform Image Classification.\n\n".into()),
            Segment::Image(img(query)),
        ];
        segs.push(Segment::Text(
            "\nQuestion: q\n\nHere are 3 in-context examples to help you answer the question:\n\n".into(),
        ));
        for (v, l) in demos {
            segs.push(Segment::Image(img(v)));
            segs.push(Segment::Text(format!("\nQuestion: q\nAnswer: {l}\n\n")));
        }
        segs.push(Segment::Image(img(query)));
        segs.push(Segment::Text(
            "\nQuestion: q\n\nPlease provide your response by directly outputting the answer.".into(),
        ));
        PromptBundle {
            system: None,
            segments: segs,
            task_type: String::new(),
        }
    }

    #[test]
    fn decisive_match_wins() {
        let p = answer_prompt(
            &[2, 0, 0, 0],
            &[(&[1, 0, 0, 0], "L1"), (&[2, 3, 3, 3], "L"), (&[1, 0, 0, 0], "L1")],
        );
        assert_eq!(vlm().respond(&p, 512).unwrap().text, "L");
    }

    #[test]
    fn majority_without_match() {
        let p = answer_prompt(
            &[3, 0, 0, 0],
            &[(&[1, 0, 0, 0], "L1"), (&[1, 0, 0, 0], "L1"), (&[2, 0, 0, 0], "L2")],
        );
        assert_eq!(vlm().respond(&p, 512).unwrap().text, "L1");
        let p = answer_prompt(&[3, 0, 0, 0], &[(&[2, 0, 0, 0], "b"), (&[1, 0, 0, 0], "a")]);
        assert_eq!(vlm().respond(&p, 512).unwrap().text, "a");
        let p = answer_prompt(&[3, 0, 0, 0], &[]);
        assert_eq!(vlm().respond(&p, 512).unwrap().text, "unknown");
    }

    #[test]
    fn extraction_respects_rank_and_count() {
        let s = Schema::new(4, 4, 1).unwrap();
        let q = s.example("q".into(), &[0, 1, 2, 3]);
        let r = vlm().respond(&attribute_prompt(&q, 3), 512).unwrap();
        assert_eq!(parse_attributes(&r.text, 3).unwrap(), ["color", "shape", "texture"]);
        let r = vlm()
            .with_decisive_rank(0)
            .respond(&attribute_prompt(&q, 2), 512)
            .unwrap();
        assert_eq!(parse_attributes(&r.text, 3).unwrap(), ["shape", "color"]);
    }

    #[test]
    fn caption_advances_value_cyclically() {
        let s = Schema::new(4, 4, 1).unwrap();
        let q = s.example("q".into(), &[0, 3, 2, 1]);
        let r = vlm().respond(&caption_prompt(&q, "color"), 512).unwrap();
        assert_eq!(
            parse_caption(&r.text).unwrap(),
            "shape=v0; color=v0; texture=v2; size=v1"
        );
        let again = vlm().respond(&caption_prompt(&q, "color"), 512).unwrap();
        assert_eq!(r, again);
        // unknown attribute still yields a caption
        let r = vlm().respond(&caption_prompt(&q, "wing span"), 512).unwrap();
        assert_eq!(
            parse_caption(&r.text).unwrap(),
            "shape=v0; color=v3; texture=v2; size=v1"
        );
    }

    #[test]
    fn fixed_usage_and_failures() {
        let s = Schema::new(4, 4, 1).unwrap();
        let q = s.example("q".into(), &[0, 1, 2, 3]);
        let v = vlm().with_usage(MockUsage::Fixed {
            extraction: (5, 1),
            caption: (7, 2),
            answer: (11, 3),
        });
        let r = v.respond(&caption_prompt(&q, "color"), 512).unwrap();
        assert_eq!((r.prompt_tokens, r.completion_tokens), (7, 2));
        let v = vlm().with_failures([q.image_ref.clone()]);
        assert!(v.respond(&caption_prompt(&q, "color"), 512).is_err());
    }
}
