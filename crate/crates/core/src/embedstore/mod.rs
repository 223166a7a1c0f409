//! Unit-norm embeddings for corpus images and questions.
//!
//! Vectors for each [`EmbeddingKind`] live in one contiguous row-major
//! table so exact scoring can stream through memory. Lookups that miss
//! return `None`; the store never fabricates a zero vector.

mod build;
mod cache;
mod client;

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use build::{build_cache, BuildFailure, BuildOptions, BuildOutcome};
pub use cache::{read_cache, read_cache_file, write_cache, write_cache_file, CACHE_MAGIC, CACHE_VERSION};
pub use client::{EmbedInput, Embedder, Embedding, HttpEmbedder, TextEmbeddings};

/// Tolerance on ‖v‖₂ for stored vectors.
pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Image,
    Question,
    Caption,
}

impl EmbeddingKind {
    pub const ALL: [EmbeddingKind; 3] = [EmbeddingKind::Image, EmbeddingKind::Question, EmbeddingKind::Caption];

    pub fn code(self) -> u8 {
        match self {
            EmbeddingKind::Image => 0,
            EmbeddingKind::Question => 1,
            EmbeddingKind::Caption => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::Image => "image",
            EmbeddingKind::Question => "question",
            EmbeddingKind::Caption => "caption",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub kind: EmbeddingKind,
    pub vector: Vec<f32>,
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Scales `v` to unit L2 norm.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Inner product accumulated in f64, left to right.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[derive(Debug, Clone, Default)]
pub(crate) struct KindTable {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl KindTable {
    pub(crate) fn len(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    dim: Option<usize>,
    tables: [KindTable; 3],
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dim(dim: usize) -> Self {
        EmbeddingStore {
            dim: Some(dim),
            ..Self::default()
        }
    }

    /// Dimensionality, fixed by the first inserted vector.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    fn table(&self, kind: EmbeddingKind) -> &KindTable {
        &self.tables[kind.code() as usize]
    }

    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<()> {
        let EmbeddingRecord { id, kind, vector } = record;
        match self.dim {
            Some(d) if d != vector.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: vector.len(),
                })
            }
            None if vector.is_empty() => return Err(Error::ZeroVector),
            _ => {}
        }
        let norm = l2_norm(&vector);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::invalid(format!(
                "{kind} embedding for `{id}` has norm {norm}, expected unit norm"
            )));
        }
        let table = &mut self.tables[kind.code() as usize];
        if table.index.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate {kind} embedding for `{id}`")));
        }
        self.dim.get_or_insert(vector.len());
        table.index.insert(id.clone(), table.ids.len());
        table.ids.push(id);
        table.data.extend_from_slice(&vector);
        Ok(())
    }

    pub fn get(&self, id: &str, kind: EmbeddingKind) -> Option<&[f32]> {
        let t = self.table(kind);
        t.index.get(id).map(|&i| self.row_of(t, i))
    }

    pub fn require(&self, id: &str, kind: EmbeddingKind) -> Result<&[f32]> {
        self.get(id, kind).ok_or_else(|| Error::MissingEmbedding {
            id: id.to_string(),
            kind,
        })
    }

    pub fn contains(&self, id: &str, kind: EmbeddingKind) -> bool {
        self.table(kind).index.contains_key(id)
    }

    pub fn len(&self, kind: EmbeddingKind) -> usize {
        self.table(kind).len()
    }

    pub fn total_len(&self) -> usize {
        self.tables.iter().map(KindTable::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    /// Ids of `kind` in insertion order.
    pub fn ids(&self, kind: EmbeddingKind) -> &[String] {
        &self.table(kind).ids
    }

    pub(crate) fn index_of(&self, id: &str, kind: EmbeddingKind) -> Option<usize> {
        self.table(kind).index.get(id).copied()
    }

    pub(crate) fn row(&self, kind: EmbeddingKind, i: usize) -> &[f32] {
        self.row_of(self.table(kind), i)
    }

    fn row_of<'a>(&self, t: &'a KindTable, i: usize) -> &'a [f32] {
        let d = self.dim.unwrap_or(0);
        &t.data[i * d..(i + 1) * d]
    }

    /// All records, ordered by (kind, id).
    pub fn records(&self) -> Vec<EmbeddingRecord> {
        let mut out = Vec::with_capacity(self.total_len());
        for kind in EmbeddingKind::ALL {
            let t = self.table(kind);
            let mut order: Vec<usize> = (0..t.len()).collect();
            order.sort_by(|&a, &b| t.ids[a].cmp(&t.ids[b]));
            out.extend(order.into_iter().map(|i| EmbeddingRecord {
                id: t.ids[i].clone(),
                kind,
                vector: self.row_of(t, i).to_vec(),
            }));
        }
        out
    }

    /// A new store holding only the given ids (all kinds).
    pub fn subset(&self, keep: &HashSet<&str>) -> EmbeddingStore {
        let mut out = EmbeddingStore {
            dim: self.dim,
            ..Default::default()
        };
        for kind in EmbeddingKind::ALL {
            let src = self.table(kind);
            let dst = &mut out.tables[kind.code() as usize];
            for (i, id) in src.ids.iter().enumerate() {
                if keep.contains(id.as_str()) {
                    dst.index.insert(id.clone(), dst.ids.len());
                    dst.ids.push(id.clone());
                    dst.data.extend_from_slice(self.row_of(src, i));
                }
            }
        }
        out
    }
}
