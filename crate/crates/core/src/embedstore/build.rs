use std::path::PathBuf;

use rayon::prelude::*;

use super::{
    normalize, read_cache_file, write_cache_file, EmbedInput, Embedder, EmbeddingKind, EmbeddingRecord, EmbeddingStore,
};
use crate::corpus::Corpus;
use crate::endpoint::RetryPolicy;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Cache file to resume from and persist to.
    pub path: Option<PathBuf>,
    pub concurrency: usize,
    pub retry: RetryPolicy,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            path: None,
            concurrency: 8,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildFailure {
    pub id: String,
    pub kind: EmbeddingKind,
    pub cause: String,
}

#[derive(Debug)]
pub struct BuildOutcome {
    pub store: EmbeddingStore,
    pub embedded: usize,
    pub skipped: usize,
    pub failures: Vec<BuildFailure>,
}

/// Embeds every example's image and question.
///
/// Pairs already present in the cache at `opts.path` are skipped, so an
/// interrupted build can be rerun. Per-item failures are collected rather
/// than aborting; whatever succeeded is persisted either way.
pub fn build_cache(corpus: &Corpus, client: &dyn Embedder, opts: &BuildOptions) -> Result<BuildOutcome> {
    let mut store = match &opts.path {
        Some(p) if p.exists() => read_cache_file(p)?,
        _ => EmbeddingStore::new(),
    };

    let mut todo: Vec<(&str, EmbeddingKind, EmbedInput<'_>)> = Vec::new();
    let mut skipped = 0;
    for ex in corpus.examples() {
        for (kind, input) in [
            (EmbeddingKind::Image, EmbedInput::Image(&ex.image_ref)),
            (EmbeddingKind::Question, EmbedInput::Text(&ex.question)),
        ] {
            if store.contains(&ex.id, kind) {
                skipped += 1;
            } else {
                todo.push((&ex.id, kind, input));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.concurrency.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<f32>>> = pool.install(|| {
        todo.par_iter()
            .map(|(_, _, input)| {
                let emb = opts.retry.run(|| client.embed(*input))?;
                normalize(&emb.vector)
            })
            .collect()
    });

    let mut failures = Vec::new();
    let mut embedded = 0;
    for ((id, kind, _), res) in todo.iter().zip(results) {
        match res {
            Ok(vector) => {
                // The first successful response (in corpus order) fixes the
                // dimension; later mismatches abort the build.
                if let Some(d) = store.dim() {
                    if d != vector.len() {
                        return Err(Error::DimensionMismatch {
                            expected: d,
                            got: vector.len(),
                        });
                    }
                }
                store.insert(EmbeddingRecord {
                    id: id.to_string(),
                    kind: *kind,
                    vector,
                })?;
                embedded += 1;
            }
            Err(e) => failures.push(BuildFailure {
                id: id.to_string(),
                kind: *kind,
                cause: e.to_string(),
            }),
        }
    }

    if let Some(p) = &opts.path {
        write_cache_file(&store, p)?;
    }
    Ok(BuildOutcome {
        store,
        embedded,
        skipped,
        failures,
    })
}
