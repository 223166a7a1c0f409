//! Experiment flags and their merge with a config file.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use demosel::causal::AttributeSource;
use demosel::endpoint::ENV_CACHE_DIR;
use demosel::evaluation::{DataSource, Method, RunConfig};
use demosel::mockworld::WorldSpec;
use demosel::retrieval::IrScorer;
use demosel::TaskKind;
use serde_json::Value;

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: demosel::Error| e.to_string())
}

fn parse_scorer(s: &str) -> Result<IrScorer, String> {
    s.parse().map_err(|e: demosel::Error| e.to_string())
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: demosel::Error| e.to_string())
}

fn parse_source(s: &str) -> Result<AttributeSource, String> {
    match s {
        "vlm" => Ok(AttributeSource::Vlm),
        "dataset" => Ok(AttributeSource::Dataset),
        _ => Err(format!("unknown attribute source `{s}` (expected vlm or dataset)")),
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// JSON run config, or a manifest written by an earlier run.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Demonstrations per prompt.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Correlational share of the budget (causal methods).
    #[arg(long)]
    pub k_corr: Option<usize>,
    #[arg(long)]
    pub num_attributes: Option<usize>,
    #[arg(long, value_parser = parse_source)]
    pub attribute_source: Option<AttributeSource>,
    #[arg(long)]
    pub mmices_pool: Option<usize>,
    /// img_img, img_img+img_txt or img_img+txt_txt.
    #[arg(long, value_parser = parse_scorer)]
    pub ir_scorer: Option<IrScorer>,
    /// Keep a query's own corpus entry among the candidates.
    #[arg(long)]
    pub include_self: bool,
    /// Most similar demonstration last.
    #[arg(long)]
    pub ascending: bool,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Sampled answers per query; above 1 the majority wins.
    #[arg(long)]
    pub num_generations: Option<u32>,
    /// Attempts per endpoint request.
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of the corpus dropped before retrieval.
    #[arg(long)]
    pub removal: Option<f64>,
    #[arg(long)]
    pub max_queries: Option<usize>,
    /// Parallel queries in flight.
    #[arg(long)]
    pub concurrency: Option<usize>,

    /// Use the in-process synthetic world instead of files and endpoints.
    #[arg(long)]
    pub mock: bool,
    /// World parameters as JSON; implies --mock.
    #[arg(long, value_name = "FILE")]
    pub world: Option<PathBuf>,
    /// Position of the decisive attribute in the mock model's answer.
    #[arg(long)]
    pub decisive_rank: Option<usize>,

    #[arg(long, value_parser = parse_task)]
    pub task: Option<TaskKind>,
    #[arg(long, value_name = "JSONL")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_name = "JSONL")]
    pub queries: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub corpus_cache: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub query_cache: Option<PathBuf>,
    #[arg(long)]
    pub chat_model: Option<String>,
    #[arg(long)]
    pub embed_model: Option<String>,
}

/// Reads a run config or the config inside a manifest.
pub fn load_config_file(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let v = match v.get("config") {
        Some(c) if v.get("fingerprint").is_some() => c.clone(),
        _ => v,
    };
    serde_json::from_value(v).with_context(|| format!("invalid config in {}", path.display()))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ConfigArgs {
    fn file_flags(&self) -> bool {
        self.task.is_some()
            || self.corpus.is_some()
            || self.queries.is_some()
            || self.corpus_cache.is_some()
            || self.query_cache.is_some()
            || self.chat_model.is_some()
            || self.embed_model.is_some()
    }

    /// Merged config plus every problem found; the caller reports them all
    /// before giving up. Relative cache paths resolve against the cache
    /// directory variable when it is set.
    pub fn resolve(&self) -> Result<(RunConfig, Vec<String>)> {
        let mut cfg = match &self.config {
            Some(p) => load_config_file(p)?,
            None => RunConfig::default(),
        };
        let mut problems = Vec::new();

        set(&mut cfg.method, self.method);
        set(&mut cfg.budget, self.budget);
        set(&mut cfg.k_corr, self.k_corr);
        set(&mut cfg.num_attributes, self.num_attributes);
        set(&mut cfg.attribute_source, self.attribute_source);
        set(&mut cfg.mmices_pool, self.mmices_pool);
        set(&mut cfg.ir_scorer, self.ir_scorer);
        set(&mut cfg.generation.temperature, self.temperature);
        set(&mut cfg.generation.max_tokens, self.max_tokens);
        set(&mut cfg.generation.num_generations, self.num_generations);
        set(&mut cfg.retry.attempts, self.retries);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.removal, self.removal);
        set(&mut cfg.concurrency, self.concurrency);
        if self.max_queries.is_some() {
            cfg.max_queries = self.max_queries;
        }
        if self.include_self {
            cfg.exclude_self = false;
        }
        if self.ascending {
            cfg.ascending = true;
        }

        let mock = self.mock || self.world.is_some();
        if mock && self.file_flags() {
            problems.push("--mock/--world cannot be combined with file or model flags".to_string());
        }
        if mock {
            if !matches!(cfg.data, DataSource::Mock { .. }) {
                cfg.data = DataSource::mock(WorldSpec::default());
            }
            if let DataSource::Mock {
                world, decisive_rank, ..
            } = &mut cfg.data
            {
                if let Some(p) = &self.world {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    *world =
                        serde_json::from_str(&text).with_context(|| format!("invalid world in {}", p.display()))?;
                }
                set(decisive_rank, self.decisive_rank);
            }
        } else if self.file_flags() {
            self.apply_files(&mut cfg, &mut problems);
        }
        if let (Some(r), DataSource::Files { .. }) = (self.decisive_rank, &cfg.data) {
            problems.push(format!("--decisive-rank {r} only applies to the mock world"));
        }

        if let (
            Ok(dir),
            DataSource::Files {
                corpus_cache,
                query_cache,
                ..
            },
        ) = (std::env::var(ENV_CACHE_DIR), &mut cfg.data)
        {
            for p in [corpus_cache, query_cache] {
                if p.is_relative() {
                    *p = Path::new(&dir).join(&*p);
                }
            }
        }

        let cfg = cfg.normalized();
        problems.extend(cfg.problems());
        Ok((cfg, problems))
    }

    fn apply_files(&self, cfg: &mut RunConfig, problems: &mut Vec<String>) {
        if let DataSource::Files {
            task,
            corpus,
            queries,
            corpus_cache,
            query_cache,
            chat_model,
            embed_model,
        } = &mut cfg.data
        {
            set(task, self.task);
            set(corpus, self.corpus.clone());
            set(queries, self.queries.clone());
            set(corpus_cache, self.corpus_cache.clone());
            set(query_cache, self.query_cache.clone());
            set(chat_model, self.chat_model.clone());
            set(embed_model, self.embed_model.clone());
            return;
        }
        // Switching from the mock default: every field must be given.
        let mut need = |name: &str, present: bool| {
            if !present {
                problems.push(format!("--{name} is required when reading data from files"));
            }
        };
        need("task", self.task.is_some());
        need("corpus", self.corpus.is_some());
        need("queries", self.queries.is_some());
        need("corpus-cache", self.corpus_cache.is_some());
        need("query-cache", self.query_cache.is_some());
        need("chat-model", self.chat_model.is_some());
        need("embed-model", self.embed_model.is_some());
        if let (Some(task), Some(corpus), Some(queries), Some(cc), Some(qc), Some(chat), Some(embed)) = (
            self.task,
            &self.corpus,
            &self.queries,
            &self.corpus_cache,
            &self.query_cache,
            &self.chat_model,
            &self.embed_model,
        ) {
            cfg.data = DataSource::Files {
                task,
                corpus: corpus.clone(),
                queries: queries.clone(),
                corpus_cache: cc.clone(),
                query_cache: qc.clone(),
                chat_model: chat.clone(),
                embed_model: embed.clone(),
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"method":"circles","budget":8,"k_corr":4,"seed":5}"#).unwrap();
        let args = ConfigArgs {
            config: Some(p),
            budget: Some(6),
            ..Default::default()
        };
        let (cfg, problems) = args.resolve().unwrap();
        assert!(problems.is_empty(), "{problems:?}");
        assert_eq!(
            (cfg.method, cfg.budget, cfg.k_corr, cfg.seed),
            (Method::Circles, 6, 4, 5)
        );
    }

    #[test]
    fn manifests_are_accepted_as_configs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        let want = RunConfig {
            seed: 9,
            ..RunConfig::default()
        };
        let m = demosel::evaluation::Manifest::new("run", &want);
        fs::write(&p, m.to_json()).unwrap();
        assert_eq!(load_config_file(&p).unwrap(), want);
    }

    #[test]
    fn cir_only_drops_the_correlational_share() {
        let args = ConfigArgs {
            method: Some(Method::CirOnly),
            k_corr: Some(8),
            ..Default::default()
        };
        assert_eq!(args.resolve().unwrap().0.k_corr, 0);
    }

    #[test]
    fn all_problems_are_collected() {
        let args = ConfigArgs {
            budget: Some(0),
            concurrency: Some(0),
            corpus: Some("x.jsonl".into()),
            ..Default::default()
        };
        let (_, problems) = args.resolve().unwrap();
        // six missing file fields plus the two numeric ones
        assert_eq!(problems.len(), 8, "{problems:?}");
    }
}
