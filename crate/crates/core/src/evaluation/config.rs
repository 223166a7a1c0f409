use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::causal::AttributeSource;
use crate::corpus::TaskKind;
use crate::endpoint::RetryPolicy;
use crate::error::{Error, Result};
use crate::inference::GenerationConfig;
use crate::mockworld::{MockUsage, WorldSpec};
use crate::retrieval::{IrScorer, ScoreWeights, DEFAULT_MMICES_POOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Random,
    Rices,
    Muier,
    Mmices,
    Circles,
    /// Causal scoring without the question-question term.
    CirclesNoTxt,
    /// Correlational demonstrations plus the extracted attributes as text.
    IclPlusAttr,
    /// Causal demonstrations only.
    CirOnly,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::None,
        Method::Random,
        Method::Rices,
        Method::Muier,
        Method::Mmices,
        Method::Circles,
        Method::CirclesNoTxt,
        Method::IclPlusAttr,
        Method::CirOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Random => "random",
            Method::Rices => "rices",
            Method::Muier => "muier",
            Method::Mmices => "mmices",
            Method::Circles => "circles",
            Method::CirclesNoTxt => "circles_no_txt",
            Method::IclPlusAttr => "icl_plus_attr",
            Method::CirOnly => "cir_only",
        }
    }

    pub fn uses_causal_branch(self) -> bool {
        matches!(self, Method::Circles | Method::CirclesNoTxt | Method::CirOnly)
    }

    pub fn needs_attributes(self) -> bool {
        self.uses_causal_branch() || self == Method::IclPlusAttr
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let all: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::invalid(format!("unknown method `{s}` (expected one of: {})", all.join(", ")))
        })
    }
}

/// Where corpora, embeddings and models come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// JSONL corpora and embedding caches on disk, remote endpoints.
    Files {
        task: TaskKind,
        corpus: PathBuf,
        queries: PathBuf,
        corpus_cache: PathBuf,
        query_cache: PathBuf,
        chat_model: String,
        embed_model: String,
    },
    /// Everything generated and served in-process.
    Mock {
        #[serde(default)]
        world: WorldSpec,
        #[serde(default = "default_decisive_rank")]
        decisive_rank: usize,
        #[serde(default = "default_usage")]
        usage: MockUsage,
    },
}

fn default_decisive_rank() -> usize {
    1
}

fn default_usage() -> MockUsage {
    MockUsage::Counted
}

impl DataSource {
    pub fn mock(world: WorldSpec) -> Self {
        DataSource::Mock {
            world,
            decisive_rank: 1,
            usage: MockUsage::Counted,
        }
    }
}

/// Complete description of one run. Two runs with equal configs over equal
/// data produce byte-identical reports.
///
/// Missing keys in a config file take the values of [`RunConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: Method,
    /// Total demonstrations per prompt.
    pub budget: usize,
    /// Correlational share of the budget for the causal methods.
    pub k_corr: usize,
    pub num_attributes: usize,
    /// Attributes requested from the model; defaults to `num_attributes`.
    /// Grids set it to their largest cell so every cell shares one request.
    pub extract_attributes: Option<usize>,
    pub attribute_source: AttributeSource,
    pub mmices_pool: usize,
    pub ir_scorer: IrScorer,
    pub weights: ScoreWeights,
    pub exclude_self: bool,
    pub ascending: bool,
    pub generation: GenerationConfig,
    pub retry: RetryPolicy,
    pub seed: u64,
    /// Fraction of the corpus dropped before retrieval, drawn with `seed`.
    pub removal: f64,
    pub max_queries: Option<usize>,
    pub concurrency: usize,
    pub data: DataSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::new(Method::Rices, DataSource::mock(WorldSpec::default()))
    }
}

impl RunConfig {
    pub fn new(method: Method, data: DataSource) -> Self {
        RunConfig {
            method,
            budget: 32,
            k_corr: 16,
            num_attributes: 1,
            extract_attributes: None,
            attribute_source: AttributeSource::Vlm,
            mmices_pool: DEFAULT_MMICES_POOL,
            ir_scorer: IrScorer::ImgImg,
            weights: ScoreWeights::default(),
            exclude_self: true,
            ascending: false,
            generation: GenerationConfig::default(),
            retry: RetryPolicy::default(),
            seed: 0,
            removal: 0.0,
            max_queries: None,
            concurrency: 8,
            data,
        }
    }

    /// Every validation failure, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.budget == 0 {
            out.push("budget must be positive".to_string());
        }
        if self.num_attributes == 0 {
            out.push("num_attributes must be positive".to_string());
        }
        if self.method.uses_causal_branch() && self.method != Method::CirOnly && self.k_corr > self.budget {
            out.push(format!("k_corr {} exceeds budget {}", self.k_corr, self.budget));
        }
        if self.extract_attributes.is_some_and(|n| n < self.num_attributes) {
            out.push("extract_attributes is smaller than num_attributes".to_string());
        }
        if !(0.0..1.0).contains(&self.removal) {
            out.push(format!("removal {} outside [0, 1)", self.removal));
        }
        if self.mmices_pool == 0 {
            out.push("mmices_pool must be positive".to_string());
        }
        if self.concurrency == 0 {
            out.push("concurrency must be positive".to_string());
        }
        if let Err(e) = self.generation.validate() {
            out.push(e.to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(p.join("; ")))
        }
    }

    /// Applies method-implied settings: causal-only runs have no
    /// correlational share.
    pub fn normalized(mut self) -> Self {
        if self.method == Method::CirOnly {
            self.k_corr = 0;
        }
        self
    }

    pub fn attributes_requested(&self) -> usize {
        self.extract_attributes.unwrap_or(self.num_attributes)
    }

    /// Correlational share after method-specific overrides.
    pub fn effective_k_corr(&self) -> usize {
        match self.method {
            Method::CirOnly => 0,
            m if m.uses_causal_branch() => self.k_corr,
            _ => self.budget,
        }
    }

    /// SHA-256 of the canonical (sorted-key) JSON form.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canonical.to_string().as_bytes());
        format!("{:x}", h.finalize())
    }
}
