use sha2::{Digest, Sha256};

use super::Schema;
use crate::embedstore::{normalize, EmbedInput, Embedder, Embedding};
use crate::error::{Error, Result};

pub const IMAGE_PREFIX: &str = "synthetic:";

/// Extra dimensions for text outside the attribute grammar.
pub const RESERVED_DIMS: usize = 16;

/// One-hot block per attribute, then [`RESERVED_DIMS`] hashed buckets.
///
/// Known `name=value` pairs set their slot. Pairs with an unknown name or
/// value contribute nothing. Any other words (questions, prose) are hashed
/// into the reserved buckets, so free text never collides with attributes.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    schema: Schema,
}

impl MockEmbedder {
    pub fn new(schema: Schema) -> Self {
        MockEmbedder { schema }
    }

    pub fn dim(&self) -> usize {
        self.schema.num_attributes() * self.schema.num_values + RESERVED_DIMS
    }

    fn bucket(word: &str) -> usize {
        let h = Sha256::digest(word.as_bytes());
        u64::from_le_bytes(h[..8].try_into().unwrap()) as usize % RESERVED_DIMS
    }

    pub fn raw(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot embed empty input"));
        }
        let v = self.schema.num_values;
        let reserved = self.schema.num_attributes() * v;
        let mut out = vec![0f32; self.dim()];
        let mut structured = false;
        for part in text.split(';') {
            if part.contains('=') {
                structured = true;
                if let [(a, val)] = self.schema.parse(part)[..] {
                    out[a * v + val] = 1.0;
                }
            } else {
                for w in part.split_whitespace() {
                    let w = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
                    if !w.is_empty() {
                        out[reserved + Self::bucket(&w)] += 1.0;
                    }
                }
            }
        }
        if out.iter().all(|x| *x == 0.0) {
            // only unknown pairs: park the whole text in one reserved slot
            let key = if structured {
                text.trim().to_string()
            } else {
                text.to_lowercase()
            };
            out[reserved + Self::bucket(&key)] = 1.0;
        }
        Ok(out)
    }

    pub fn embed_str(&self, text: &str) -> Result<Vec<f32>> {
        normalize(&self.raw(text)?)
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, input: EmbedInput<'_>) -> Result<Embedding> {
        let text = match input {
            EmbedInput::Text(t) => t,
            EmbedInput::Image(r) => r.strip_prefix(IMAGE_PREFIX).unwrap_or(r),
        };
        Ok(Embedding {
            vector: self.embed_str(text)?,
            tokens: text.split_whitespace().count() as u64,
        })
    }

    fn model(&self) -> &str {
        "mock-embed"
    }
}
