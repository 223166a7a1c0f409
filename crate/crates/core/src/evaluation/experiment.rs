use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Method, RunConfig};
use super::metrics::{classification_metrics, exact_match, word_f1};
use crate::causal::{
    allocate_budget, causal_blocks, extract_attributes, generate_cf_caption, rank_dataset_attributes,
    AttributeIntervention, AttributeSource, BudgetConfig, CounterfactualRetriever,
};
use crate::corpus::{subsample_corpus, Corpus, Example, TaskKind};
use crate::embedstore::{Embedder, EmbeddingStore, TextEmbeddings};
use crate::error::{Error, Result};
use crate::inference::{account_tokens, generate, ChatModel, TokenSummary, Usage};
use crate::prompting::{assemble, assemble_attr_only, CausalBlock, DemonstrationContext, PromptBundle};
use crate::retrieval::{random_select, IrScorer, Provenance, QueryEmbedding, RetrievalSet, Retriever};

/// Everything a run reads. The stores hold normalized image and question
/// embeddings for every example of the matching corpus.
#[derive(Clone, Copy)]
pub struct Resources<'a> {
    pub corpus: &'a Corpus,
    pub store: &'a EmbeddingStore,
    pub queries: &'a Corpus,
    pub query_store: &'a EmbeddingStore,
    pub vlm: &'a dyn ChatModel,
    pub embedder: &'a dyn Embedder,
}

#[derive(Debug, Clone)]
struct CachedCaption {
    caption: String,
    vector: Arc<[f32]>,
    usage: Usage,
}

/// Model outputs that do not depend on the corpus: extracted attributes and
/// counterfactual captions. Sharing one cache across the levels of a sweep
/// or the cells of a grid keeps those inputs fixed and avoids repeat calls.
///
/// The cache is only valid for one model and one query set. Usage of the
/// original call is charged again to every run that reuses an entry, so
/// per-query token counts do not depend on what ran before.
/// Extracted attributes (or `None` on failure) and the usage they cost,
/// keyed by query id and attribute count.
type AttributeEntries = HashMap<(String, usize), (Option<Vec<String>>, Usage)>;

#[derive(Debug, Default)]
pub struct CausalCache {
    attributes: Mutex<AttributeEntries>,
    captions: Mutex<HashMap<(String, String), CachedCaption>>,
}

impl CausalCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// (attribute lists, captions) held.
    pub fn len(&self) -> (usize, usize) {
        (
            self.attributes.lock().unwrap().len(),
            self.captions.lock().unwrap().len(),
        )
    }

    pub fn is_empty(&self) -> bool {
        self.len() == (0, 0)
    }
}

/// One evaluated query. Metric fields are `None` when the query failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub id: String,
    pub gold: String,
    pub prediction: Option<String>,
    pub em: Option<u8>,
    pub f1: Option<f64>,
    pub demos: usize,
    pub usage: Usage,
    /// Attribute extraction failed and the whole budget went to the
    /// correlational branch.
    pub degraded: bool,
    pub error: Option<String>,
}

impl QueryRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Successful queries.
    pub n: usize,
    pub em_mean: f64,
    pub f1_mean: f64,
    /// Classification only.
    pub accuracy: Option<f64>,
    pub weighted_f1: Option<f64>,
}

impl Aggregates {
    /// Recomputes from rows; failed rows are skipped.
    pub fn from_rows(rows: &[QueryRow], task: TaskKind, label_set: &[String]) -> Self {
        let ok: Vec<&QueryRow> = rows.iter().filter(|r| !r.failed()).collect();
        let n = ok.len();
        let d = n.max(1) as f64;
        let em_mean = ok.iter().map(|r| f64::from(r.em.unwrap_or(0))).sum::<f64>() / d;
        let f1_mean = ok.iter().map(|r| r.f1.unwrap_or(0.0)).sum::<f64>() / d;
        let (accuracy, weighted_f1) = if task == TaskKind::Classification {
            let preds: Vec<&str> = ok.iter().map(|r| r.prediction.as_deref().unwrap_or("")).collect();
            let golds: Vec<&str> = ok.iter().map(|r| r.gold.as_str()).collect();
            let m = classification_metrics(&preds, &golds, label_set);
            (Some(m.accuracy), Some(m.weighted_f1))
        } else {
            (None, None)
        };
        Aggregates {
            n,
            em_mean,
            f1_mean,
            accuracy,
            weighted_f1,
        }
    }

    /// Headline score: accuracy for classification, EM otherwise.
    pub fn headline(&self) -> f64 {
        self.accuracy.unwrap_or(self.em_mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fingerprint: String,
    pub method: Method,
    pub task: TaskKind,
    pub corpus_size: usize,
    pub label_set: Vec<String>,
    pub rows: Vec<QueryRow>,
    pub aggregates: Aggregates,
    pub failures: usize,
    pub tokens: TokenSummary,
}

impl MetricReport {
    /// Whether the stored aggregates match a recomputation from the rows.
    pub fn is_consistent(&self) -> bool {
        Aggregates::from_rows(&self.rows, self.task, &self.label_set) == self.aggregates
            && self.rows.iter().filter(|r| r.failed()).count() == self.failures
    }
}

fn token_summary(method: Method, rows: &[QueryRow]) -> TokenSummary {
    let name = method.name();
    account_tokens(rows.iter().map(|r| (name, &r.usage)))
        .remove(name)
        .unwrap_or(TokenSummary {
            queries: 0,
            mean_prompt_tokens: 0.0,
            mean_completion_tokens: 0.0,
            mean_total_tokens: 0.0,
            mean_calls: 0.0,
        })
}

impl MetricReport {
    /// Aggregates, failure tally and token means rebuilt from the rows.
    pub fn recomputed(mut self) -> Self {
        self.aggregates = Aggregates::from_rows(&self.rows, self.task, &self.label_set);
        self.failures = self.rows.iter().filter(|r| r.failed()).count();
        self.tokens = token_summary(self.method, &self.rows);
        self
    }
}

/// What the pipeline did for one query; written to the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLog {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corr: Option<RetrievalSet>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub causal: Vec<CausalBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PromptBundle>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricReport,
    /// One entry per query evaluated in this run, in query order. Resumed
    /// rows have none.
    pub log: Vec<QueryLog>,
}

/// Per-query seed derived from the run seed and the query id.
fn query_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Training-split attribute frequencies per class. An attribute counts as
/// present unless its value is empty, `0`, `false` or `no`.
fn attribute_frequencies(corpus: &Corpus) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut counts: BTreeMap<String, (usize, BTreeMap<String, usize>)> = BTreeMap::new();
    for ex in corpus.examples() {
        let e = counts.entry(ex.label().to_string()).or_default();
        e.0 += 1;
        for (a, v) in ex.attributes.iter().flatten() {
            if attribute_present(v) {
                *e.1.entry(a.clone()).or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(c, (n, row))| {
            let row = row.into_iter().map(|(a, k)| (a, k as f64 / n as f64)).collect();
            (c, row)
        })
        .collect()
}

fn attribute_present(v: &str) -> bool {
    !matches!(v.trim().to_ascii_lowercase().as_str(), "" | "0" | "false" | "no")
}

struct Run<'a> {
    cfg: &'a RunConfig,
    res: Resources<'a>,
    cache: &'a CausalCache,
    texts: TextEmbeddings<'a>,
    options: Option<Vec<String>>,
    freq: Option<BTreeMap<String, BTreeMap<String, f64>>>,
    task_type: &'static str,
    /// False stops after prompt assembly.
    answer: bool,
}

struct Pipeline {
    ctx: DemonstrationContext,
    attributes: Option<Vec<String>>,
    budget: Option<BudgetConfig>,
    degraded: bool,
}

impl<'a> Run<'a> {
    fn available(&self, q: &Example) -> usize {
        let own = self.cfg.exclude_self && self.res.corpus.contains(&q.id);
        self.res.corpus.len() - usize::from(own)
    }

    fn retriever(&self) -> Retriever<'a> {
        Retriever::new(self.res.store)
            .with_exclude_self(self.cfg.exclude_self)
            .with_weights(self.cfg.weights)
    }

    fn correlational(&self, q: &QueryEmbedding, k: usize) -> Result<RetrievalSet> {
        if k == 0 {
            return Ok(RetrievalSet::empty(Provenance::Corr));
        }
        let r = self.retriever();
        match self.cfg.ir_scorer {
            IrScorer::ImgImg => r.rices(q, k),
            v => r.scorer_variant(q, k, v),
        }
    }

    /// Attributes for `ex` (at most `num_attributes`), or `None` when the
    /// model gave no usable list.
    fn attributes(&self, ex: &Example, usage: &mut Usage) -> Result<Option<Vec<String>>> {
        let n = self.cfg.num_attributes;
        if self.cfg.attribute_source == AttributeSource::Dataset {
            let freq = self.freq.as_ref().expect("frequency table");
            let present: HashSet<&str> = ex
                .attributes
                .iter()
                .flatten()
                .filter(|(_, v)| attribute_present(v))
                .map(|(a, _)| a.as_str())
                .collect();
            let set = rank_dataset_attributes(freq, ex.label(), &present, n)?;
            return Ok(Some(set.attributes));
        }
        let requested = self.cfg.attributes_requested();
        let key = (ex.id.clone(), requested);
        if let Some((attrs, u)) = self.cache.attributes.lock().unwrap().get(&key) {
            usage.add(*u);
            return Ok(attrs.as_ref().map(|a| a.iter().take(n).cloned().collect()));
        }
        let mut u = Usage::default();
        let got = match extract_attributes(
            self.res.vlm,
            ex,
            requested,
            self.cfg.generation.max_tokens,
            &self.cfg.retry,
            &mut u,
        ) {
            Ok(set) => Some(set.attributes),
            Err(Error::AttributeExtractionFailed) => None,
            Err(e) => return Err(e),
        };
        usage.add(u);
        let out = got.as_ref().map(|a| a.iter().take(n).cloned().collect());
        self.cache.attributes.lock().unwrap().insert(key, (got, u));
        Ok(out)
    }

    fn intervention(&self, ex: &Example, attribute: &str, usage: &mut Usage) -> Result<AttributeIntervention> {
        let key = (ex.id.clone(), attribute.to_string());
        if let Some(c) = self.cache.captions.lock().unwrap().get(&key) {
            usage.add(c.usage);
            return Ok(AttributeIntervention {
                attribute: attribute.to_string(),
                caption: c.caption.clone(),
                caption_vec: Arc::clone(&c.vector),
            });
        }
        let mut u = Usage::default();
        let iv = generate_cf_caption(
            self.res.vlm,
            &self.texts,
            ex,
            attribute,
            self.cfg.generation.max_tokens,
            &self.cfg.retry,
            &mut u,
        )?;
        usage.add(u);
        self.cache.captions.lock().unwrap().insert(
            key,
            CachedCaption {
                caption: iv.caption.clone(),
                vector: Arc::clone(&iv.caption_vec),
                usage: u,
            },
        );
        Ok(iv)
    }

    fn select(&self, ex: &Example, q: &QueryEmbedding, usage: &mut Usage) -> Result<Pipeline> {
        let k = self.cfg.budget.min(self.available(ex));
        let options = self.options.clone();
        let plain = |ctx| Pipeline {
            ctx,
            attributes: None,
            budget: None,
            degraded: false,
        };
        let exclude = self.cfg.exclude_self.then_some(ex.id.as_str());
        Ok(match self.cfg.method {
            Method::None => plain(DemonstrationContext::none(options)),
            Method::Random => {
                let set = random_select(self.res.corpus.ids(), k, query_seed(self.cfg.seed, &ex.id), exclude)?;
                plain(DemonstrationContext::icl(set, options))
            }
            Method::Rices => plain(DemonstrationContext::icl(self.correlational(q, k)?, options)),
            Method::Muier => {
                let set = if k == 0 {
                    RetrievalSet::empty(Provenance::Corr)
                } else {
                    self.retriever().muier(q, k)?
                };
                plain(DemonstrationContext::icl(set, options))
            }
            Method::Mmices => {
                let set = if k == 0 {
                    RetrievalSet::empty(Provenance::Corr)
                } else {
                    let pool = self.cfg.mmices_pool.min(self.available(ex)).max(k);
                    self.retriever().mmices(q, k, pool)?
                };
                plain(DemonstrationContext::icl(set, options))
            }
            Method::IclPlusAttr => {
                let attrs = self.attributes(ex, usage)?;
                let degraded = attrs.is_none();
                Pipeline {
                    ctx: DemonstrationContext::icl(self.correlational(q, k)?, options),
                    attributes: Some(attrs.unwrap_or_default()),
                    budget: None,
                    degraded,
                }
            }
            Method::Circles | Method::CirclesNoTxt | Method::CirOnly => {
                if k == 0 {
                    let corr = RetrievalSet::empty(Provenance::Corr);
                    return Ok(plain(DemonstrationContext::circles(corr, Vec::new(), options)));
                }
                let Some(attrs) = self.attributes(ex, usage)? else {
                    let corr = self.correlational(q, k)?;
                    return Ok(Pipeline {
                        ctx: DemonstrationContext::circles(corr, Vec::new(), options),
                        attributes: None,
                        budget: None,
                        degraded: true,
                    });
                };
                let budget = allocate_budget(k, attrs.len(), self.cfg.effective_k_corr().min(k))?;
                let corr = self.correlational(q, budget.k_corr)?;
                let interventions = attrs
                    .iter()
                    .map(|a| self.intervention(ex, a, usage))
                    .collect::<Result<Vec<_>>>()?;
                let mut cf = CounterfactualRetriever::new(self.res.store);
                cf.weights = self.cfg.weights;
                cf.exclude_self = self.cfg.exclude_self;
                cf.use_text = self.cfg.method != Method::CirclesNoTxt;
                let taken: HashSet<&str> = corr.ids().collect();
                let blocks = causal_blocks(&cf, &interventions, q, &budget, &taken)?;
                Pipeline {
                    ctx: DemonstrationContext::circles(corr, blocks, options),
                    attributes: Some(attrs),
                    budget: Some(budget),
                    degraded: false,
                }
            }
        })
    }

    fn prompt(&self, p: &Pipeline, ex: &Example) -> Result<PromptBundle> {
        let mut ctx = p.ctx.clone();
        ctx.ascending = self.cfg.ascending;
        if self.cfg.method == Method::IclPlusAttr {
            let attrs = p.attributes.as_deref().unwrap_or(&[]);
            return assemble_attr_only(&ctx, ex, self.res.corpus, attrs, self.task_type);
        }
        assemble(&ctx, ex, self.res.corpus, self.task_type)
    }

    fn evaluate(&self, ex: &Example) -> (QueryRow, QueryLog) {
        let mut usage = Usage::default();
        let mut log = QueryLog {
            id: ex.id.clone(),
            attributes: None,
            budget: None,
            corr: None,
            causal: Vec::new(),
            prompt: None,
            raw_text: None,
            error: None,
        };
        let mut row = QueryRow {
            id: ex.id.clone(),
            gold: ex.label().to_string(),
            prediction: None,
            em: None,
            f1: None,
            demos: 0,
            usage: Usage::default(),
            degraded: false,
            error: None,
        };
        let outcome = (|| -> Result<()> {
            let q = QueryEmbedding::from_store(self.res.query_store, &ex.id)?;
            let p = self.select(ex, &q, &mut usage)?;
            row.degraded = p.degraded;
            row.demos = p.ctx.demo_count();
            log.attributes = p.attributes.clone();
            log.budget = p.budget;
            log.corr = p.ctx.corr_block.clone();
            log.causal = p.ctx.causal_blocks.clone();
            let prompt = self.prompt(&p, ex)?;
            if !self.answer {
                log.prompt = Some(prompt);
                return Ok(());
            }
            let r = generate(self.res.vlm, &prompt, &self.cfg.generation, &self.cfg.retry)?;
            usage.add(r.usage);
            log.prompt = Some(prompt);
            log.raw_text = Some(r.raw_text);
            row.em = Some(exact_match(&r.answer, &row.gold));
            row.f1 = Some(word_f1(&r.answer, &row.gold));
            row.prediction = Some(r.answer);
            Ok(())
        })();
        row.usage = usage;
        if let Err(e) = outcome {
            row.prediction = None;
            row.em = None;
            row.f1 = None;
            row.error = Some(e.to_string());
            log.error = row.error.clone();
        }
        (row, log)
    }
}

fn subsampled(cfg: &RunConfig, res: &Resources<'_>) -> Result<Option<(Corpus, EmbeddingStore)>> {
    if cfg.removal == 0.0 {
        return Ok(None);
    }
    if !(0.0..1.0).contains(&cfg.removal) {
        return Err(Error::invalid(format!("removal {} outside [0, 1)", cfg.removal)));
    }
    let corpus = subsample_corpus(res.corpus, 1.0 - cfg.removal, cfg.seed)?;
    let keep: HashSet<&str> = corpus.ids().collect();
    let store = res.store.subset(&keep);
    Ok(Some((corpus, store)))
}

/// Evaluates `cfg.method` over the query set.
pub fn run_experiment(cfg: &RunConfig, res: Resources<'_>, cache: &CausalCache) -> Result<RunOutput> {
    resume_experiment(cfg, res, cache, None)
}

/// Like [`run_experiment`], reusing successful rows of `previous` when it
/// was produced by the same configuration. Failed rows are retried.
pub fn resume_experiment(
    cfg: &RunConfig,
    res: Resources<'_>,
    cache: &CausalCache,
    previous: Option<&MetricReport>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let fingerprint = cfg.fingerprint();
    let reusable: HashMap<&str, &QueryRow> = match previous {
        Some(p) if p.fingerprint == fingerprint => p
            .rows
            .iter()
            .filter(|r| !r.failed())
            .map(|r| (r.id.as_str(), r))
            .collect(),
        Some(_) => {
            return Err(Error::invalid(
                "previous report was produced by a different configuration",
            ))
        }
        None => HashMap::new(),
    };

    with_run(cfg, res, cache, true, |run, res, task, label_set| {
        finish(cfg, run, res, task, label_set, fingerprint, &reusable)
    })
}

/// Builds the per-run state, over the subsampled corpus when `removal` is
/// set, and hands it to `f`.
fn with_run<T>(
    cfg: &RunConfig,
    res: Resources<'_>,
    cache: &CausalCache,
    answer: bool,
    f: impl FnOnce(&Run<'_>, Resources<'_>, TaskKind, Vec<String>) -> Result<T>,
) -> Result<T> {
    let task = res.corpus.task_kind();
    let label_set = match task {
        TaskKind::Classification => res.corpus.label_set(),
        TaskKind::OpenVqa => Vec::new(),
    };
    let sub = subsampled(cfg, &res)?;
    let res = match &sub {
        Some((c, s)) => Resources {
            corpus: c,
            store: s,
            ..res
        },
        None => res,
    };
    let freq = (cfg.attribute_source == AttributeSource::Dataset).then(|| attribute_frequencies(res.corpus));
    let run = Run {
        cfg,
        res,
        cache,
        texts: TextEmbeddings::new(res.embedder, res.store.dim(), cfg.retry),
        options: (task == TaskKind::Classification).then(|| label_set.clone()),
        freq,
        task_type: task.task_type(),
        answer,
    };
    f(&run, res, task, label_set)
}

fn thread_pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Retrieval and prompt assembly without answering: the log entries carry
/// demonstrations and prompts, never predictions.
pub fn prepare_prompts(cfg: &RunConfig, res: Resources<'_>, cache: &CausalCache) -> Result<Vec<QueryLog>> {
    cfg.validate()?;
    with_run(cfg, res, cache, false, |run, res, _, _| {
        let limit = cfg.max_queries.unwrap_or(usize::MAX);
        let queries: Vec<&Example> = res.queries.examples().iter().take(limit).collect();
        Ok(thread_pool(cfg)?.install(|| queries.par_iter().map(|ex| run.evaluate(ex).1).collect()))
    })
}

fn finish(
    cfg: &RunConfig,
    run: &Run<'_>,
    res: Resources<'_>,
    task: TaskKind,
    label_set: Vec<String>,
    fingerprint: String,
    reusable: &HashMap<&str, &QueryRow>,
) -> Result<RunOutput> {
    let limit = cfg.max_queries.unwrap_or(usize::MAX);
    let queries: Vec<&Example> = res.queries.examples().iter().take(limit).collect();
    let pool = thread_pool(cfg)?;
    let results: Vec<(QueryRow, Option<QueryLog>)> = pool.install(|| {
        queries
            .par_iter()
            .map(|ex| match reusable.get(ex.id.as_str()) {
                Some(r) => ((*r).clone(), None),
                None => {
                    let (row, log) = run.evaluate(ex);
                    (row, Some(log))
                }
            })
            .collect()
    });

    let mut rows = Vec::with_capacity(results.len());
    let mut log = Vec::new();
    for (r, l) in results {
        rows.push(r);
        log.extend(l);
    }
    let aggregates = Aggregates::from_rows(&rows, task, &label_set);
    let failures = rows.iter().filter(|r| r.failed()).count();
    let tokens = token_summary(cfg.method, &rows);
    Ok(RunOutput {
        report: MetricReport {
            fingerprint,
            method: cfg.method,
            task,
            corpus_size: res.corpus.len(),
            label_set,
            rows,
            aggregates,
            failures,
            tokens,
        },
        log,
    })
}

#[derive(Debug, Clone)]
pub struct SweepLevel {
    pub removal: f64,
    pub runs: Vec<RunOutput>,
}

/// Runs every method at every removal level. Attributes and captions are
/// produced once per query and shared by all levels through `cache`.
pub fn scarcity_sweep(
    base: &RunConfig,
    methods: &[Method],
    removals: &[f64],
    res: Resources<'_>,
    cache: &CausalCache,
) -> Result<Vec<SweepLevel>> {
    if methods.is_empty() || removals.is_empty() {
        return Err(Error::invalid("sweep needs at least one method and one level"));
    }
    removals
        .iter()
        .map(|&removal| {
            let runs = methods
                .iter()
                .map(|&method| {
                    let cfg = RunConfig {
                        method,
                        removal,
                        ..base.clone()
                    };
                    run_experiment(&cfg, res, cache)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepLevel { removal, runs })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub num_attributes: usize,
    /// Causal demonstrations across all attributes.
    pub cir: usize,
    pub run: RunOutput,
}

/// Cartesian sweep over attribute count and causal budget with `base.k_corr`
/// fixed. Every cell requests the same (largest) attribute list, so cells
/// sharing an attribute reuse its caption.
pub fn budget_grid(
    base: &RunConfig,
    attrs_list: &[usize],
    cir_list: &[usize],
    res: Resources<'_>,
    cache: &CausalCache,
) -> Result<Vec<GridCell>> {
    if !base.method.uses_causal_branch() {
        return Err(Error::invalid(format!("method {} has no causal budget", base.method)));
    }
    let Some(&widest) = attrs_list.iter().max() else {
        return Err(Error::invalid("attrs_list is empty"));
    };
    if cir_list.is_empty() || cir_list.contains(&0) || attrs_list.contains(&0) {
        return Err(Error::invalid("grid axes must be non-empty and positive"));
    }
    let mut out = Vec::new();
    for &n in attrs_list {
        for &cir in cir_list {
            let cfg = RunConfig {
                num_attributes: n,
                extract_attributes: Some(widest.max(base.attributes_requested())),
                budget: base.effective_k_corr() + cir,
                ..base.clone()
            };
            out.push(GridCell {
                num_attributes: n,
                cir,
                run: run_experiment(&cfg, res, cache)?,
            });
        }
    }
    Ok(out)
}

/// Mean and population standard deviation of the headline score over
/// repeated runs with seeds `base.seed, base.seed + 1, ...`.
pub fn repeat_runs(
    base: &RunConfig,
    repeats: usize,
    res: Resources<'_>,
    cache: &CausalCache,
) -> Result<(Vec<RunOutput>, f64, f64)> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be positive"));
    }
    let runs = (0..repeats as u64)
        .map(|i| {
            let cfg = RunConfig {
                seed: base.seed + i,
                ..base.clone()
            };
            run_experiment(&cfg, res, cache)
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = runs.iter().map(|r| r.report.aggregates.headline()).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    Ok((runs, mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::DataSource;
    use crate::mockworld::{MockStack, MockUsage, MockVlm, WorldSpec};

    fn spec() -> WorldSpec {
        WorldSpec {
            num_items: 200,
            num_queries: 50,
            ..WorldSpec::default()
        }
    }

    fn cfg(method: Method) -> RunConfig {
        let mut c = RunConfig::new(method, DataSource::mock(spec()));
        c.num_attributes = 3;
        c
    }

    fn stack() -> MockStack {
        MockStack::new(&spec(), 1, MockUsage::Counted).unwrap()
    }

    #[test]
    fn reruns_are_identical() {
        let s = stack();
        let a = run_experiment(&cfg(Method::Rices), s.resources(), &CausalCache::new()).unwrap();
        let b = run_experiment(&cfg(Method::Rices), s.resources(), &CausalCache::new()).unwrap();
        assert_eq!(a.report, b.report);
        assert!(a.report.is_consistent());
        assert_eq!(a.report.clone().recomputed(), a.report);
        assert_eq!(a.report.rows.len(), 50);
        assert!(a.report.rows.iter().all(|r| r.demos == 32));
    }

    #[test]
    fn prepared_prompts_match_the_run_log() {
        let s = stack();
        let c = cfg(Method::Circles);
        let run = run_experiment(&c, s.resources(), &CausalCache::new()).unwrap();
        let logs = prepare_prompts(&c, s.resources(), &CausalCache::new()).unwrap();
        assert_eq!(logs.len(), run.log.len());
        for (a, b) in logs.iter().zip(&run.log) {
            assert_eq!(a.prompt, b.prompt);
            assert_eq!(a.causal, b.causal);
            assert!(a.raw_text.is_none());
        }
    }

    #[test]
    fn failures_are_tallied_not_averaged() {
        let mut s = stack();
        // two queries whose images no other query shares
        let refs: Vec<&str> = s
            .world
            .queries
            .examples()
            .iter()
            .map(|e| e.image_ref.as_str())
            .collect();
        let bad: Vec<String> = refs
            .iter()
            .filter(|r| refs.iter().filter(|x| x == r).count() == 1)
            .take(2)
            .map(|r| r.to_string())
            .collect();
        s.vlm = MockVlm::new(s.world.schema.clone()).with_failures(bad);
        let mut c = cfg(Method::Circles);
        c.retry = crate::endpoint::RetryPolicy::immediate(1);
        let out = run_experiment(&c, s.resources(), &CausalCache::new()).unwrap();
        assert_eq!(out.report.failures, 2);
        assert_eq!(out.report.aggregates.n, 48);
        assert!(out
            .report
            .rows
            .iter()
            .filter(|r| r.failed())
            .all(|r| r.em.is_none() && r.f1.is_none()));
        assert!(out.report.is_consistent());

        // resuming retries only the failed rows
        let fixed = stack();
        let again = resume_experiment(&c, fixed.resources(), &CausalCache::new(), Some(&out.report)).unwrap();
        assert_eq!(again.log.len(), 2);
        assert_eq!(again.report.failures, 0);
        let full = run_experiment(&c, fixed.resources(), &CausalCache::new()).unwrap();
        assert_eq!(again.report, full.report);
    }

    #[test]
    fn resume_rejects_foreign_reports() {
        let s = stack();
        let a = run_experiment(&cfg(Method::Rices), s.resources(), &CausalCache::new()).unwrap();
        assert!(resume_experiment(&cfg(Method::Muier), s.resources(), &CausalCache::new(), Some(&a.report)).is_err());
    }

    #[test]
    fn extraction_failure_degrades_to_correlational() {
        struct Mute(MockVlm);
        impl ChatModel for Mute {
            fn complete(&self, p: &PromptBundle, t: f64, m: u32) -> Result<crate::inference::ChatResponse> {
                let mut r = self.0.complete(p, t, m)?;
                if r.text.starts_with("### Attributes") {
                    r.text = "nothing useful".into();
                }
                Ok(r)
            }
            fn model(&self) -> &str {
                "mute"
            }
        }
        let s = stack();
        let vlm = Mute(s.vlm.clone());
        let res = Resources {
            vlm: &vlm,
            ..s.resources()
        };
        let c = cfg(Method::Circles);
        let out = run_experiment(&c, res, &CausalCache::new()).unwrap();
        let rices = run_experiment(&cfg(Method::Rices), s.resources(), &CausalCache::new()).unwrap();
        assert!(out.report.rows.iter().all(|r| r.degraded && r.demos == 32));
        assert_eq!(out.report.aggregates, rices.report.aggregates);
        // two extraction attempts per query
        assert!(out.report.rows.iter().all(|r| r.usage.calls == 3));
    }

    #[test]
    fn cache_keeps_per_query_usage() {
        let s = stack();
        let cache = CausalCache::new();
        let a = run_experiment(&cfg(Method::Circles), s.resources(), &cache).unwrap();
        assert_eq!(cache.len(), (50, 150));
        let b = run_experiment(&cfg(Method::Circles), s.resources(), &cache).unwrap();
        assert_eq!(a.report, b.report);
        assert!(a.report.rows.iter().all(|r| r.usage.calls == 5));
    }

    #[test]
    fn sweep_level_zero_matches_a_plain_run() {
        let s = stack();
        let levels = scarcity_sweep(
            &cfg(Method::Rices),
            &[Method::Rices, Method::Circles],
            &[0.0, 0.5],
            s.resources(),
            &CausalCache::new(),
        )
        .unwrap();
        assert_eq!(levels.len(), 2);
        assert_eq!(levels[1].runs[0].report.corpus_size, 100);
        let plain = run_experiment(&cfg(Method::Circles), s.resources(), &CausalCache::new()).unwrap();
        assert_eq!(levels[0].runs[1].report, plain.report);
    }

    #[test]
    fn one_cell_grid_matches_a_plain_run() {
        let s = stack();
        let base = cfg(Method::Circles);
        let grid = budget_grid(&base, &[3], &[16], s.resources(), &CausalCache::new()).unwrap();
        let plain = run_experiment(&base, s.resources(), &CausalCache::new()).unwrap();
        assert_eq!(grid[0].run.report.aggregates, plain.report.aggregates);
        assert!(budget_grid(&cfg(Method::Rices), &[1], &[4], s.resources(), &CausalCache::new()).is_err());
    }

    #[test]
    fn grid_cells_share_captions() {
        let s = stack();
        let cache = CausalCache::new();
        let grid = budget_grid(&cfg(Method::Circles), &[1, 2, 3], &[4, 8], s.resources(), &cache).unwrap();
        assert_eq!(grid.len(), 6);
        // one attribute list per query, one caption per (query, attribute)
        assert_eq!(cache.len(), (50, 150));
        for cell in &grid {
            assert!(cell.run.report.rows.iter().all(|r| r.demos == 16 + cell.cir));
        }
    }

    #[test]
    fn budget_shrinks_with_the_corpus() {
        let tiny = WorldSpec {
            num_items: 20,
            num_queries: 5,
            ..WorldSpec::default()
        };
        let s = MockStack::new(&tiny, 1, MockUsage::Counted).unwrap();
        for m in Method::ALL {
            let mut c = cfg(m);
            c.data = DataSource::mock(tiny);
            let out = run_experiment(&c, s.resources(), &CausalCache::new()).unwrap();
            let want = if m == Method::None { 0 } else { 20 };
            assert!(out.report.rows.iter().all(|r| r.demos == want), "{m}");
        }
    }

    #[test]
    fn dataset_attributes_skip_the_model() {
        let s = stack();
        let mut c = cfg(Method::Circles);
        c.attribute_source = AttributeSource::Dataset;
        let out = run_experiment(&c, s.resources(), &CausalCache::new()).unwrap();
        assert_eq!(out.report.failures, 0);
        // captions and answer only
        assert!(out.report.rows.iter().all(|r| r.usage.calls == 4));
    }

    #[test]
    fn query_seeds_differ_per_query() {
        assert_ne!(query_seed(0, "q1"), query_seed(0, "q2"));
        assert_ne!(query_seed(0, "q1"), query_seed(1, "q1"));
        assert!(attribute_present("yes") && attribute_present("v2"));
        assert!(!attribute_present(" No ") && !attribute_present("0"));
    }
}
