//! A synthetic attribute universe with a planted spurious correlation.
//!
//! Every item is an assignment of one value to each of `A` named
//! attributes. The label is a function of a single decisive attribute. In
//! the training split a block of confounding attributes copies the decisive
//! value (with probability `confounder_strength`), so it predicts the label
//! perfectly at strength 1. In the query split the confounder block is
//! shuffled across queries and carries no label information.
//!
//! Items are rendered as `name=value; name=value; ...`. Image references
//! prefix that with `synthetic:`. The mock embedder and mock model parse the
//! same grammar, so every retrieval and answer on this world is decidable.

mod embed;
mod server;
mod stack;
mod vlm;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Example, TaskKind};
use crate::error::{Error, Result};

pub use embed::{MockEmbedder, IMAGE_PREFIX, RESERVED_DIMS};
pub use server::MockServer;
pub use stack::MockStack;
pub use vlm::{MockUsage, MockVlm, IMAGE_TOKENS};

pub const QUESTION: &str = "What is the category of the object in this image?";

const NAMES: [&str; 8] = [
    "shape", "color", "texture", "size", "pattern", "material", "finish", "border",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub num_items: usize,
    pub num_queries: usize,
    /// Attributes per item.
    pub num_attributes: usize,
    /// Values per attribute.
    pub num_values: usize,
    pub confounder_strength: f64,
    /// Attributes that copy the decisive value together.
    pub num_confounders: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            num_items: 1024,
            num_queries: 200,
            num_attributes: 5,
            num_values: 4,
            confounder_strength: 1.0,
            num_confounders: 3,
            seed: 7,
        }
    }
}

/// Attribute names and roles. Attribute 0 is decisive; attributes
/// `1..=num_confounders` are confounders; the rest are free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub names: Vec<String>,
    pub num_values: usize,
    pub num_confounders: usize,
}

impl Schema {
    pub fn new(num_attributes: usize, num_values: usize, num_confounders: usize) -> Result<Self> {
        if num_attributes < 2 {
            return Err(Error::invalid("mock world needs at least 2 attributes"));
        }
        if num_values < 2 {
            return Err(Error::invalid("mock world needs at least 2 values per attribute"));
        }
        if num_confounders == 0 || num_confounders >= num_attributes {
            return Err(Error::invalid(format!(
                "num_confounders must be in 1..{num_attributes}"
            )));
        }
        let names = (0..num_attributes)
            .map(|i| NAMES.get(i).map_or_else(|| format!("attr{i}"), |s| s.to_string()))
            .collect();
        Ok(Schema {
            names,
            num_values,
            num_confounders,
        })
    }

    pub fn num_attributes(&self) -> usize {
        self.names.len()
    }

    pub fn decisive(&self) -> &str {
        &self.names[0]
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value_name(v: usize) -> String {
        format!("v{v}")
    }

    pub fn value_index(&self, s: &str) -> Option<usize> {
        s.strip_prefix('v')
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|&v| v < self.num_values && s == Self::value_name(v))
    }

    pub fn label(value: usize) -> String {
        format!("class-{}", Self::value_name(value))
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.num_values).map(Self::label).collect()
    }

    /// `name=value; ...` for a full assignment.
    pub fn render(&self, values: &[usize]) -> String {
        self.names
            .iter()
            .zip(values)
            .map(|(n, v)| format!("{n}={}", Self::value_name(*v)))
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// Known `(attribute, value)` pairs in a structured description.
    /// Unknown names and values are dropped.
    pub fn parse(&self, text: &str) -> Vec<(usize, usize)> {
        text.split(';')
            .filter_map(|part| {
                let (n, v) = part.split_once('=')?;
                Some((self.attribute_index(n.trim())?, self.value_index(v.trim())?))
            })
            .collect()
    }

    /// Full assignment, if every attribute is named exactly once.
    pub fn parse_full(&self, text: &str) -> Option<Vec<usize>> {
        let mut out = vec![None; self.num_attributes()];
        for (a, v) in self.parse(text) {
            if out[a].replace(v).is_some() {
                return None;
            }
        }
        out.into_iter().collect()
    }

    pub fn example(&self, id: String, values: &[usize]) -> Example {
        let label = Self::label(values[0]);
        let mut ex = Example::new(
            id,
            format!("{IMAGE_PREFIX}{}", self.render(values)),
            QUESTION,
            label.clone(),
        );
        ex.class_label = Some(label);
        ex.attributes = Some(
            self.names
                .iter()
                .zip(values)
                .map(|(n, v)| (n.clone(), Self::value_name(*v)))
                .collect::<BTreeMap<_, _>>(),
        );
        ex
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub schema: Schema,
    pub train: Corpus,
    pub queries: Corpus,
}

fn ids(prefix: char, n: usize) -> impl Iterator<Item = String> {
    let width = n.saturating_sub(1).to_string().len().max(4);
    (0..n).map(move |i| format!("{prefix}{i:0width$}"))
}

/// Builds the training and query splits. Deterministic per `spec.seed`.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    let schema = Schema::new(spec.num_attributes, spec.num_values, spec.num_confounders)?;
    if !(0.0..=1.0).contains(&spec.confounder_strength) {
        return Err(Error::invalid("confounder_strength must be in [0, 1]"));
    }
    if spec.num_items == 0 || spec.num_queries == 0 {
        return Err(Error::invalid("mock world needs items and queries"));
    }
    let (a, v, c) = (spec.num_attributes, spec.num_values, spec.num_confounders);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut vals: Vec<usize> = (0..a).map(|_| rng.gen_range(0..v)).collect();
        if rng.gen_bool(spec.confounder_strength) {
            let d = vals[0];
            vals[1..=c].fill(d);
        }
        vals
    };

    let train: Vec<Example> = ids('t', spec.num_items)
        .map(|id| {
            let vals = draw(&mut rng);
            schema.example(id, &vals)
        })
        .collect();

    let mut rows: Vec<Vec<usize>> = (0..spec.num_queries).map(|_| draw(&mut rng)).collect();
    // shuffle the confounder block across queries to break its link to labels
    let mut blocks: Vec<Vec<usize>> = rows.iter().map(|r| r[1..=c].to_vec()).collect();
    blocks.shuffle(&mut rng);
    for (r, b) in rows.iter_mut().zip(blocks) {
        r[1..=c].copy_from_slice(&b);
    }
    let queries: Vec<Example> = ids('q', spec.num_queries)
        .zip(&rows)
        .map(|(id, vals)| schema.example(id, vals))
        .collect();

    Ok(World {
        spec: *spec,
        train: Corpus::from_examples(train, TaskKind::Classification)?,
        queries: Corpus::from_examples(queries, TaskKind::Classification)?,
        schema,
    })
}

/// Advances `attribute` to its next value, cyclically. Unknown attributes
/// leave the description unchanged.
pub fn intervene(schema: &Schema, values: &[usize], attribute: &str) -> Vec<usize> {
    let mut out = values.to_vec();
    if let Some(i) = schema.attribute_index(attribute) {
        out[i] = (out[i] + 1) % schema.num_values;
    }
    out
}
