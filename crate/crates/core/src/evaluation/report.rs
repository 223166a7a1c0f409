use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::experiment::{Aggregates, GridCell, MetricReport, QueryLog, QueryRow, SweepLevel};
use crate::error::{Error, Result};

/// Metrics are stored as fractions and printed as percentages.
pub fn pct(x: f64) -> String {
    format!("{:.4}", x * 100.0)
}

fn opt_pct(x: Option<f64>) -> String {
    x.map(pct).unwrap_or_default()
}

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    method: super::Method,
    task: crate::corpus::TaskKind,
    corpus_size: usize,
    label_set: Vec<String>,
    aggregates: Aggregates,
    failures: usize,
    tokens: crate::inference::TokenSummary,
    /// Answers are compared after lowercasing and stripping punctuation and
    /// articles; scores are not comparable with other canonicalizations.
    normalization: String,
}

const NORMALIZATION: &str = "lowercase; ascii punctuation removed; articles a/an/the removed; whitespace collapsed";

/// Header line with the aggregates, then one line per query.
pub fn report_jsonl(report: &MetricReport) -> String {
    let header = Header {
        fingerprint: report.fingerprint.clone(),
        method: report.method,
        task: report.task,
        corpus_size: report.corpus_size,
        label_set: report.label_set.clone(),
        aggregates: report.aggregates.clone(),
        failures: report.failures,
        tokens: report.tokens,
        normalization: NORMALIZATION.to_string(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in &report.rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_report_jsonl(text: &str) -> Result<MetricReport> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Header = serde_json::from_str(lines.next().ok_or_else(|| Error::invalid("empty report"))?)?;
    let rows = lines
        .map(serde_json::from_str::<QueryRow>)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(MetricReport {
        fingerprint: header.fingerprint,
        method: header.method,
        task: header.task,
        corpus_size: header.corpus_size,
        label_set: header.label_set,
        rows,
        aggregates: header.aggregates,
        failures: header.failures,
        tokens: header.tokens,
    })
}

pub fn runlog_jsonl(log: &[QueryLog]) -> String {
    log.iter()
        .map(|l| serde_json::to_string(l).expect("log serializes") + "\n")
        .collect()
}

/// Headline score averaged over reports, treating accuracy as EM for
/// classification tasks.
pub fn average_headline(reports: &[&MetricReport]) -> Option<f64> {
    if reports.is_empty() {
        return None;
    }
    Some(reports.iter().map(|r| r.aggregates.headline()).sum::<f64>() / reports.len() as f64)
}

/// One row per report in percent; an `average` row follows when there is
/// more than one report.
pub fn aggregates_csv(reports: &[&MetricReport]) -> String {
    let mut out = String::from("method,task,corpus_size,n,failures,em,f1,accuracy,weighted_f1,mean_total_tokens\n");
    for r in reports {
        let a = &r.aggregates;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:.4}",
            r.method,
            r.task.task_type(),
            r.corpus_size,
            a.n,
            r.failures,
            pct(a.em_mean),
            pct(a.f1_mean),
            opt_pct(a.accuracy),
            opt_pct(a.weighted_f1),
            r.tokens.mean_total_tokens
        )
        .unwrap();
    }
    if reports.len() > 1 {
        let avg = average_headline(reports).unwrap();
        writeln!(out, "average,,,,,{},,,,", pct(avg)).unwrap();
    }
    out
}

/// Long format: one line per (level, method).
pub fn sweep_csv(levels: &[SweepLevel]) -> String {
    let mut out = String::from("removal,corpus_size,method,score,failures\n");
    for l in levels {
        for r in &l.runs {
            let rep = &r.report;
            writeln!(
                out,
                "{},{},{},{},{}",
                l.removal,
                rep.corpus_size,
                rep.method,
                pct(rep.aggregates.headline()),
                rep.failures
            )
            .unwrap();
        }
    }
    out
}

/// Heatmap matrix: one row per attribute count, one column per causal
/// budget, headline score in percent.
pub fn grid_csv(cells: &[GridCell]) -> String {
    let mut attrs: Vec<usize> = cells.iter().map(|c| c.num_attributes).collect();
    let mut cirs: Vec<usize> = cells.iter().map(|c| c.cir).collect();
    attrs.sort_unstable();
    attrs.dedup();
    cirs.sort_unstable();
    cirs.dedup();
    let score: BTreeMap<(usize, usize), f64> = cells
        .iter()
        .map(|c| ((c.num_attributes, c.cir), c.run.report.aggregates.headline()))
        .collect();
    let mut out = String::from("attributes");
    for c in &cirs {
        write!(out, ",cir_{c}").unwrap();
    }
    out.push('\n');
    for a in &attrs {
        write!(out, "{a}").unwrap();
        for c in &cirs {
            write!(out, ",{}", score.get(&(*a, *c)).map(|x| pct(*x)).unwrap_or_default()).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Everything needed to rerun an experiment. Deliberately free of
/// timestamps and host details so equal runs write equal manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub fingerprint: String,
    /// Extra parameters of sweeps and grids.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, Value>,
    /// SHA-256 of every input file, keyed by role.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub data: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.clone(),
            fingerprint: config.fingerprint(),
            params: BTreeMap::new(),
            data: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
