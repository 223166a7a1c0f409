//! Demonstration corpora and query sets.
//!
//! A corpus is a JSON-lines file, one example per line:
//!
//! ```text
//! {"id":"a","image":"imgs/a.jpg","question":"What is the category of the bird in this image?","answer":"Blue Jay"}
//! ```
//!
//! Optional keys are `attributes` (name → value map), `class_label` and
//! `options`. Any other key is kept verbatim and written back on
//! serialization, so load → serialize → load is a fixed point.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    OpenVqa,
}

impl TaskKind {
    /// Task description used in the inference prompt.
    pub fn task_type(self) -> &'static str {
        match self {
            TaskKind::Classification => "Image Classification",
            TaskKind::OpenVqa => "Visual Question Answering",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "open_vqa" | "vqa" => Ok(TaskKind::OpenVqa),
            other => Err(Error::invalid(format!(
                "unknown task kind `{other}` (expected classification or open_vqa)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    #[serde(rename = "image")]
    pub image_ref: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    /// Unrecognized keys, preserved on round-trip.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        image_ref: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        Example {
            id: id.into(),
            image_ref: image_ref.into(),
            question: question.into(),
            answer: answer.into(),
            attributes: None,
            class_label: None,
            options: None,
            extra: BTreeMap::new(),
        }
    }

    /// The label used for classification scoring.
    pub fn label(&self) -> &str {
        self.class_label.as_deref().unwrap_or(&self.answer)
    }

    fn check(&self, line: usize) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::MalformedRecord {
                line,
                reason: "empty id".into(),
            });
        }
        if self.image_ref.is_empty() {
            return Err(Error::MalformedRecord {
                line,
                reason: "empty image reference".into(),
            });
        }
        if self.question.is_empty() {
            return Err(Error::MalformedRecord {
                line,
                reason: "empty question".into(),
            });
        }
        if let Some(attrs) = &self.attributes {
            if let Some((name, _)) = attrs.iter().find(|(_, v)| v.is_empty()) {
                return Err(Error::MalformedRecord {
                    line,
                    reason: format!("attribute `{name}` has an empty value"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    examples: Vec<Example>,
    task_kind: TaskKind,
    question_template: Option<String>,
    index: HashMap<String, usize>,
}

const REQUIRED: [&str; 4] = ["id", "image", "question", "answer"];

impl Corpus {
    /// Builds a corpus from in-memory examples, enforcing the same invariants
    /// as [`load_corpus`]. Line numbers in errors are 1-based positions.
    pub fn from_examples(examples: Vec<Example>, task_kind: TaskKind) -> Result<Self> {
        let mut index = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            ex.check(i + 1)?;
            if index.insert(ex.id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    line: i + 1,
                    id: ex.id.clone(),
                });
            }
        }
        let question_template = match task_kind {
            TaskKind::OpenVqa => None,
            TaskKind::Classification => {
                let Some(first) = examples.first() else {
                    return Err(Error::InvalidCorpus(
                        "classification corpus has no examples to take a question template from".into(),
                    ));
                };
                if let Some((i, ex)) = examples
                    .iter()
                    .enumerate()
                    .find(|(_, ex)| ex.question != first.question)
                {
                    return Err(Error::InvalidCorpus(format!(
                        "classification corpora use one fixed question template; line {} differs: {:?}",
                        i + 1,
                        ex.question
                    )));
                }
                Some(first.question.clone())
            }
        };
        Ok(Corpus {
            examples,
            task_kind,
            question_template,
            index,
        })
    }

    pub fn from_reader<R: Read>(reader: R, task_kind: TaskKind) -> Result<Self> {
        let mut examples = Vec::new();
        let mut lines = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(parse_line(&line, line_no)?);
            lines.push(line_no);
        }
        // Re-run validation with true file line numbers.
        let mut seen = HashMap::new();
        for (ex, &line) in examples.iter().zip(&lines) {
            ex.check(line)?;
            if seen.insert(ex.id.as_str(), line).is_some() {
                return Err(Error::DuplicateId {
                    line,
                    id: ex.id.clone(),
                });
            }
        }
        Corpus::from_examples(examples, task_kind)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    pub fn question_template(&self) -> Option<&str> {
        self.question_template.as_deref()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.index.get(id).map(|&i| &self.examples[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }

    /// Sorted distinct labels.
    pub fn label_set(&self) -> Vec<String> {
        self.examples
            .iter()
            .map(|e| e.label().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Writes the canonical JSONL form.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for ex in &self.examples {
            serde_json::to_writer(&mut w, ex)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Keeps the examples whose ids satisfy `keep`, in original order.
    pub fn retain(&self, mut keep: impl FnMut(&Example) -> bool) -> Result<Corpus> {
        let examples = self.examples.iter().filter(|e| keep(e)).cloned().collect();
        Corpus::from_examples(examples, self.task_kind)
    }
}

fn parse_line(line: &str, line_no: usize) -> Result<Example> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
        line: line_no,
        reason: e.to_string(),
    })?;
    let Value::Object(map) = &value else {
        return Err(Error::MalformedRecord {
            line: line_no,
            reason: "record is not a JSON object".into(),
        });
    };
    for field in REQUIRED {
        match map.get(field) {
            None | Some(Value::Null) => return Err(Error::MissingField { line: line_no, field }),
            Some(Value::String(_)) => {}
            Some(_) => {
                return Err(Error::MalformedRecord {
                    line: line_no,
                    reason: format!("field `{field}` must be a string"),
                })
            }
        }
    }
    serde_json::from_value(value).map_err(|e| Error::MalformedRecord {
        line: line_no,
        reason: e.to_string(),
    })
}

pub fn load_corpus(path: &Path, task_kind: TaskKind) -> Result<Corpus> {
    Corpus::from_reader(File::open(path)?, task_kind)
}

/// Uniformly keeps `round(keep_fraction * N)` examples, preserving order.
pub fn subsample_corpus(corpus: &Corpus, keep_fraction: f64, seed: u64) -> Result<Corpus> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let n = corpus.len();
    let keep = (keep_fraction * n as f64).round() as usize;
    if keep == 0 {
        return Err(Error::invalid(format!(
            "keep_fraction {keep_fraction} leaves no examples out of {n}"
        )));
    }
    if keep == n {
        return Ok(corpus.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    picked.sort_unstable();
    let examples = picked.into_iter().map(|i| corpus.examples[i].clone()).collect();
    Corpus::from_examples(examples, corpus.task_kind)
}

/// Fraction of the corpus kept when `removal` of it is dropped.
pub fn keep_fraction_for_removal(removal: f64) -> f64 {
    1.0 - removal
}
