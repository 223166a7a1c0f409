mod args;
mod backend;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use demosel::corpus::TaskKind;
use demosel::embedstore::{build_cache, BuildOptions, HttpEmbedder};
use demosel::evaluation::{
    aggregates_csv, budget_grid, grid_csv, parse_report_jsonl, pct, prepare_prompts, repeat_runs, report_jsonl,
    resume_experiment, runlog_jsonl, scarcity_sweep, sweep_csv, CausalCache, DataSource, Method, MetricReport,
    QueryLog, RunConfig, RunOutput,
};
use demosel::mockworld::{generate_world, MockEmbedder, MockServer, MockUsage, MockVlm, WorldSpec};
use serde_json::json;

use args::ConfigArgs;
use backend::{manifest, Backend};

const EXIT_HARD: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(
    name = "demosel",
    version,
    about = "Demonstration selection experiments for multimodal in-context learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a corpus and its queries into binary caches.
    Embed {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        max_failures: usize,
    },
    /// Emit the demonstrations chosen for each query as JSONL.
    Retrieve(PrepareArgs),
    /// Emit the prompt assembled for each query.
    Render {
        #[command(flatten)]
        prep: PrepareArgs,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Evaluate one method over the query set.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Runs with consecutive seeds; the summary gives mean and std.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Reuse successful rows of an existing report.jsonl in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Every method at every corpus removal level.
    SweepScarcity {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "random,rices,muier,mmices,circles")]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
        removals: Vec<f64>,
    },
    /// A causal method over attribute counts and causal budgets.
    GridBudget {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        attributes: Vec<usize>,
        /// Causal demonstrations added to the correlational share.
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        cir: Vec<usize>,
    },
    /// Serve the synthetic model and embedder over HTTP.
    MockServe(ServeArgs),
    /// Recompute aggregates.csv from report files.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory for the output and a manifest; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Exit with status 2 when more queries than this fail.
    #[arg(long, default_value_t = 0)]
    max_failures: usize,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// World parameters as JSON.
    #[arg(long, value_name = "FILE")]
    world: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    decisive_rank: usize,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Write the world's corpora and a matching run config here.
    #[arg(long, value_name = "DIR")]
    export: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: demosel::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_HARD } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_HARD)
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Embed { cfg, max_failures } => embed(&cfg, max_failures),
        Command::Retrieve(p) => prepare(&p, |logs| {
            let mut out = String::new();
            for mut l in logs {
                l.prompt = None;
                out.push_str(&serde_json::to_string(&l)?);
                out.push('\n');
            }
            Ok(("retrieval.jsonl", out))
        }),
        Command::Render { prep, format } => prepare(&prep, |logs| render(logs, format)),
        Command::Run {
            cfg,
            out,
            repeats,
            resume,
        } => run(&cfg, &out, repeats, resume),
        Command::SweepScarcity {
            cfg,
            out,
            methods,
            removals,
        } => sweep(&cfg, &out, &methods, &removals),
        Command::GridBudget {
            cfg,
            out,
            attributes,
            cir,
        } => grid(&cfg, &out, &attributes, &cir),
        Command::MockServe(a) => serve(&a),
        Command::Report { reports, out } => report(&reports, out.as_deref()),
    }
}

/// Merged config, or every validation problem at once.
fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let (cfg, problems) = args.resolve()?;
    if problems.is_empty() {
        return Ok(cfg);
    }
    for p in &problems {
        eprintln!("error: {p}");
    }
    bail!(
        "invalid configuration ({} problem{})",
        problems.len(),
        if problems.len() == 1 { "" } else { "s" }
    )
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn exit_for(failures: usize, max_failures: usize) -> u8 {
    if failures > max_failures {
        eprintln!("{failures} queries failed (threshold {max_failures})");
        EXIT_PARTIAL
    } else {
        0
    }
}

fn embed(args: &ConfigArgs, max_failures: usize) -> Result<u8> {
    let cfg = resolve(args)?;
    let DataSource::Files {
        task,
        corpus,
        queries,
        corpus_cache,
        query_cache,
        embed_model,
        ..
    } = &cfg.data
    else {
        bail!("embed needs file inputs (--task, --corpus, --queries, caches and models, or a config file)");
    };
    let client = HttpEmbedder::from_env(embed_model.clone())?;
    let mut failures = 0;
    for (input, cache) in [(corpus, corpus_cache), (queries, query_cache)] {
        let c = demosel::load_corpus(input, *task).with_context(|| format!("loading {}", input.display()))?;
        let opts = BuildOptions {
            path: Some(cache.clone()),
            concurrency: cfg.concurrency,
            retry: cfg.retry,
        };
        let out = build_cache(&c, &client, &opts)?;
        eprintln!(
            "{}: {} embedded, {} cached, {} failed",
            cache.display(),
            out.embedded,
            out.skipped,
            out.failures.len()
        );
        for f in &out.failures {
            eprintln!("  {} ({:?}): {}", f.id, f.kind, f.cause);
        }
        failures += out.failures.len();
    }
    Ok(exit_for(failures, max_failures))
}

fn prepare(args: &PrepareArgs, emit: impl FnOnce(Vec<QueryLog>) -> Result<(&'static str, String)>) -> Result<u8> {
    let cfg = resolve(&args.cfg)?;
    let backend = Backend::open(&cfg)?;
    let logs = prepare_prompts(&cfg, backend.resources(), &CausalCache::new())?;
    let failures = logs.iter().filter(|l| l.error.is_some()).count();
    let (name, text) = emit(logs)?;
    match &args.out {
        Some(dir) => {
            create_dir(dir)?;
            let command = if name == "retrieval.jsonl" {
                "retrieve"
            } else {
                "render"
            };
            write(
                dir,
                "manifest.json",
                &manifest(command, &cfg, BTreeMap::new())?.to_json(),
            )?;
            write(dir, name, &text)?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(exit_for(failures, 0))
}

fn render(logs: Vec<QueryLog>, format: Format) -> Result<(&'static str, String)> {
    let mut out = String::new();
    match format {
        Format::Json => {
            for l in &logs {
                out.push_str(&serde_json::to_string(
                    &json!({"id": l.id, "prompt": l.prompt, "error": l.error}),
                )?);
                out.push('\n');
            }
            Ok(("prompts.jsonl", out))
        }
        Format::Text => {
            for l in &logs {
                out.push_str(&format!("===== {} =====\n", l.id));
                match (&l.prompt, &l.error) {
                    (Some(p), _) => {
                        if let Some(s) = &p.system {
                            out.push_str(&format!("[system]\n{s}\n[user]\n"));
                        }
                        out.push_str(&p.render_text());
                        out.push('\n');
                    }
                    (None, Some(e)) => out.push_str(&format!("error: {e}\n")),
                    (None, None) => {}
                }
            }
            Ok(("prompts.txt", out))
        }
    }
}

fn write_run(dir: &Path, suffix: &str, run: &RunOutput) -> Result<()> {
    write(dir, &format!("report{suffix}.jsonl"), &report_jsonl(&run.report))?;
    write(dir, &format!("runlog{suffix}.jsonl"), &runlog_jsonl(&run.log))
}

fn summary_line(r: &MetricReport) -> String {
    format!(
        "{} on {} queries: {} (failures {})",
        r.method,
        r.rows.len(),
        pct(r.aggregates.headline()),
        r.failures
    )
}

fn run(args: &ConfigArgs, out: &OutArgs, repeats: usize, resume: bool) -> Result<u8> {
    let cfg = resolve(args)?;
    if repeats == 0 {
        bail!("--repeats must be positive");
    }
    if resume && repeats > 1 {
        bail!("--resume works on single runs only");
    }
    let previous = if resume {
        let p = out.out.join("report.jsonl");
        match fs::read_to_string(&p) {
            Ok(text) => Some(parse_report_jsonl(&text).with_context(|| format!("parsing {}", p.display()))?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e).with_context(|| format!("reading {}", p.display())),
        }
    } else {
        None
    };
    let backend = Backend::open(&cfg)?;
    let cache = CausalCache::new();
    create_dir(&out.out)?;
    let mut params = BTreeMap::new();
    if repeats > 1 {
        params.insert("repeats".to_string(), json!(repeats));
    }
    write(&out.out, "manifest.json", &manifest("run", &cfg, params)?.to_json())?;

    let runs = if repeats == 1 {
        let r = resume_experiment(&cfg, backend.resources(), &cache, previous.as_ref())?;
        write_run(&out.out, "", &r)?;
        vec![r]
    } else {
        let (runs, mean, std) = repeat_runs(&cfg, repeats, backend.resources(), &cache)?;
        for (i, r) in runs.iter().enumerate() {
            write_run(&out.out, &format!("-seed{}", cfg.seed + i as u64), r)?;
        }
        let summary = json!({
            "method": cfg.method,
            "seeds": (0..repeats as u64).map(|i| cfg.seed + i).collect::<Vec<_>>(),
            "scores": runs.iter().map(|r| pct(r.report.aggregates.headline())).collect::<Vec<_>>(),
            "mean": pct(mean),
            "std": pct(std),
        });
        write(
            &out.out,
            "summary.json",
            &(serde_json::to_string_pretty(&summary)? + "\n"),
        )?;
        eprintln!("mean {} std {}", pct(mean), pct(std));
        runs
    };
    let reports: Vec<&MetricReport> = runs.iter().map(|r| &r.report).collect();
    write(&out.out, "aggregates.csv", &aggregates_csv(&reports))?;
    for r in &reports {
        eprintln!("{}", summary_line(r));
    }
    Ok(exit_for(reports.iter().map(|r| r.failures).sum(), out.max_failures))
}

fn sweep(args: &ConfigArgs, out: &OutArgs, methods: &[Method], removals: &[f64]) -> Result<u8> {
    let cfg = resolve(args)?;
    let backend = Backend::open(&cfg)?;
    create_dir(&out.out)?;
    let params = BTreeMap::from([
        ("methods".to_string(), json!(methods)),
        ("removals".to_string(), json!(removals)),
    ]);
    write(
        &out.out,
        "manifest.json",
        &manifest("sweep-scarcity", &cfg, params)?.to_json(),
    )?;
    let levels = scarcity_sweep(&cfg, methods, removals, backend.resources(), &CausalCache::new())?;
    let runs = out.out.join("runs");
    create_dir(&runs)?;
    let mut reports = Vec::new();
    for l in &levels {
        for r in &l.runs {
            write_run(&runs, &format!("-{}-removal{}", r.report.method, l.removal), r)?;
            reports.push(&r.report);
        }
    }
    write(&out.out, "sweep.csv", &sweep_csv(&levels))?;
    write(&out.out, "aggregates.csv", &aggregates_csv(&reports))?;
    eprint!("{}", sweep_csv(&levels));
    Ok(exit_for(reports.iter().map(|r| r.failures).sum(), out.max_failures))
}

fn grid(args: &ConfigArgs, out: &OutArgs, attributes: &[usize], cir: &[usize]) -> Result<u8> {
    let cfg = resolve(args)?;
    let backend = Backend::open(&cfg)?;
    create_dir(&out.out)?;
    let params = BTreeMap::from([
        ("attributes".to_string(), json!(attributes)),
        ("cir".to_string(), json!(cir)),
    ]);
    write(
        &out.out,
        "manifest.json",
        &manifest("grid-budget", &cfg, params)?.to_json(),
    )?;
    let cells = budget_grid(&cfg, attributes, cir, backend.resources(), &CausalCache::new())?;
    let runs = out.out.join("runs");
    create_dir(&runs)?;
    for c in &cells {
        write_run(&runs, &format!("-attrs{}-cir{}", c.num_attributes, c.cir), &c.run)?;
    }
    let reports: Vec<&MetricReport> = cells.iter().map(|c| &c.run.report).collect();
    write(&out.out, "grid.csv", &grid_csv(&cells))?;
    write(&out.out, "aggregates.csv", &aggregates_csv(&reports))?;
    eprint!("{}", grid_csv(&cells));
    Ok(exit_for(reports.iter().map(|r| r.failures).sum(), out.max_failures))
}

fn serve(a: &ServeArgs) -> Result<u8> {
    let spec: WorldSpec = match &a.world {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("invalid world in {}", p.display()))?,
        None => WorldSpec::default(),
    };
    let world = generate_world(&spec)?;
    if let Some(dir) = &a.export {
        create_dir(dir)?;
        world.train.save(&dir.join("train.jsonl"))?;
        world.queries.save(&dir.join("queries.jsonl"))?;
        let mut cfg = RunConfig::new(
            Method::Rices,
            DataSource::Files {
                task: TaskKind::Classification,
                corpus: dir.join("train.jsonl"),
                queries: dir.join("queries.jsonl"),
                corpus_cache: dir.join("train.cache"),
                query_cache: dir.join("queries.cache"),
                chat_model: "mock-vlm".to_string(),
                embed_model: "mock-embed".to_string(),
            },
        );
        cfg.seed = spec.seed;
        write(dir, "config.json", &(serde_json::to_string_pretty(&cfg)? + "\n"))?;
    }
    let vlm = MockVlm::new(world.schema.clone())
        .with_decisive_rank(a.decisive_rank)
        .with_usage(MockUsage::Counted);
    let server = MockServer::start(&a.addr, vlm, MockEmbedder::new(world.schema.clone()), a.workers)?;
    println!("listening on {}", server.base_url());
    std::io::stdout().flush()?;
    server.join();
    Ok(0)
}

fn report(paths: &[PathBuf], out: Option<&Path>) -> Result<u8> {
    let mut reports = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let stored = parse_report_jsonl(&text).with_context(|| format!("parsing {}", p.display()))?;
        let r = stored.clone().recomputed();
        if r != stored {
            eprintln!(
                "warning: {} header disagrees with its rows; using the rows",
                p.display()
            );
        }
        reports.push(r);
    }
    let refs: Vec<&MetricReport> = reports.iter().collect();
    let csv = aggregates_csv(&refs);
    match out {
        Some(p) => fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(0)
}
