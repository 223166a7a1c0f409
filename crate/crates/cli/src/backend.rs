//! Data and models for a run, either from disk and remote endpoints or
//! generated in-process.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use demosel::embedstore::{read_cache_file, HttpEmbedder};
use demosel::endpoint::{ENV_CHAT_URL, ENV_EMBED_URL};
use demosel::evaluation::{sha256_file, DataSource, Manifest, Resources, RunConfig};
use demosel::inference::HttpChatClient;
use demosel::mockworld::MockStack;
use demosel::{load_corpus, Corpus, EmbeddingStore};
use serde_json::Value;

pub struct FileStack {
    corpus: Corpus,
    queries: Corpus,
    store: EmbeddingStore,
    query_store: EmbeddingStore,
    vlm: HttpChatClient,
    embedder: HttpEmbedder,
}

pub enum Backend {
    Mock(Box<MockStack>),
    Files(Box<FileStack>),
}

fn read_cache(path: &Path) -> Result<EmbeddingStore> {
    if !path.exists() {
        bail!(
            "embedding cache {} does not exist; build it with `demosel embed`",
            path.display()
        );
    }
    read_cache_file(path).with_context(|| format!("reading {}", path.display()))
}

impl Backend {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        match &cfg.data {
            DataSource::Mock {
                world,
                decisive_rank,
                usage,
            } => Ok(Backend::Mock(Box::new(MockStack::new(world, *decisive_rank, *usage)?))),
            DataSource::Files {
                task,
                corpus,
                queries,
                corpus_cache,
                query_cache,
                chat_model,
                embed_model,
            } => Ok(Backend::Files(Box::new(FileStack {
                corpus: load_corpus(corpus, *task).with_context(|| format!("loading {}", corpus.display()))?,
                queries: load_corpus(queries, *task).with_context(|| format!("loading {}", queries.display()))?,
                store: read_cache(corpus_cache)?,
                query_store: read_cache(query_cache)?,
                vlm: HttpChatClient::from_env(chat_model.clone())?,
                embedder: HttpEmbedder::from_env(embed_model.clone())?,
            }))),
        }
    }

    pub fn resources(&self) -> Resources<'_> {
        match self {
            Backend::Mock(s) => s.resources(),
            Backend::Files(f) => Resources {
                corpus: &f.corpus,
                store: &f.store,
                queries: &f.queries,
                query_store: &f.query_store,
                vlm: &f.vlm,
                embedder: &f.embedder,
            },
        }
    }
}

/// Drops `user:pass@` from a URL.
fn without_userinfo(url: &str) -> String {
    let (scheme, rest) = url.split_once("://").unwrap_or(("", url));
    let authority_end = rest.find('/').unwrap_or(rest.len());
    match rest[..authority_end].rfind('@') {
        Some(at) if scheme.is_empty() => rest[at + 1..].to_string(),
        Some(at) => format!("{scheme}://{}", &rest[at + 1..]),
        None => url.to_string(),
    }
}

/// Manifest with input digests and endpoint URLs. Keys stay in the
/// environment and never reach the file.
pub fn manifest(command: &str, cfg: &RunConfig, params: BTreeMap<String, Value>) -> Result<Manifest> {
    let mut m = Manifest::new(command, cfg);
    m.params = params;
    if let DataSource::Files {
        corpus,
        queries,
        corpus_cache,
        query_cache,
        ..
    } = &cfg.data
    {
        for (role, p) in [
            ("corpus", corpus),
            ("queries", queries),
            ("corpus_cache", corpus_cache),
            ("query_cache", query_cache),
        ] {
            m.data.insert(
                role.to_string(),
                sha256_file(p).with_context(|| format!("hashing {}", p.display()))?,
            );
        }
        for (key, var) in [("chat_url", ENV_CHAT_URL), ("embed_url", ENV_EMBED_URL)] {
            if let Ok(url) = std::env::var(var) {
                m.params.insert(key.to_string(), Value::String(without_userinfo(&url)));
            }
        }
    }
    Ok(m)
}
