//! Reports over routing traces and metrics files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{read_file, Error, Result};
use crate::hashing::BalanceStats;
use crate::trainer::{MetricsRecord, RecordKind, TraceRow};

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read_file(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Analysis(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    read_jsonl(path)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    read_jsonl(path)
}

/// Realized routing shares of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadHistogram {
    pub layer: usize,
    pub positions: u64,
    #[serde(flatten)]
    pub stats: BalanceStats,
}

impl LoadHistogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("expert,share\n");
        for (i, v) in self.stats.shares.iter().enumerate() {
            s.push_str(&format!("{i},{v}\n"));
        }
        s
    }
}

pub fn parse_balance_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    if lines.next() != Some("expert,share") {
        return Err(Error::Analysis("balance CSV must start with `expert,share`".into()));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let (e, s) = l.split_once(',').ok_or_else(|| Error::Analysis(format!("line {}: expected two fields", i + 2)))?;
            if e.parse::<usize>().ok() != Some(i) {
                return Err(Error::Analysis(format!("line {}: expert ids must be 0,1,2,...", i + 2)));
            }
            s.parse::<f64>().map_err(|err| Error::Analysis(format!("line {}: {err}", i + 2)))
        })
        .collect()
}

/// Per-layer histograms from trace rows, one count per routed position.
/// `k` sets the expert count; by default the largest expert id seen plus one.
pub fn balance_report(rows: &[TraceRow], k: Option<usize>) -> Result<Vec<LoadHistogram>> {
    if rows.is_empty() {
        return Err(Error::Analysis("empty trace".into()));
    }
    let mut per_layer: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for r in rows {
        let counts = per_layer.entry(r.layer).or_default();
        if counts.len() <= r.expert {
            counts.resize(r.expert + 1, 0);
        }
        counts[r.expert] += 1;
    }
    per_layer
        .into_iter()
        .map(|(layer, mut counts)| {
            if let Some(k) = k {
                if counts.len() > k {
                    return Err(Error::Analysis(format!("layer {layer}: expert id {} >= K={k}", counts.len() - 1)));
                }
                counts.resize(k, 0);
            }
            let stats = BalanceStats::from_counts(&counts)?;
            Ok(LoadHistogram { layer, positions: counts.iter().sum(), stats })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub kind: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub alpha: f64,
    pub params: u64,
    pub valid_ppl: f64,
    pub test_ppl: Option<f64>,
}

pub const COMPARE_HEADER: &str = "label,kind,K,N,alpha,params,valid_ppl,test_ppl";

/// Last eval row of each run, sorted by label.
pub fn compare(runs: &[(String, PathBuf)]) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for (label, path) in runs {
        let recs = read_metrics(path)?;
        let last = recs
            .iter()
            .rev()
            .find(|r| r.kind == RecordKind::Eval)
            .ok_or_else(|| Error::Analysis(format!("{}: no eval rows", path.display())))?;
        let run = last.run.clone().ok_or_else(|| Error::Analysis(format!("{}: eval row lacks run info", path.display())))?;
        rows.push(ComparisonRow {
            label: label.clone(),
            kind: run.router,
            k: run.k,
            n: run.n,
            alpha: run.alpha,
            params: run.params,
            valid_ppl: last.valid_ppl.unwrap_or(last.ppl),
            test_ppl: last.test_ppl,
        });
    }
    rows.sort_by(|a, b| a.label.cmp(&b.label));
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{COMPARE_HEADER}\n");
    for r in rows {
        let test = r.test_ppl.map(|t| t.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{},{},{},{}\n", r.label, r.kind, r.k, r.n, r.alpha, r.params, r.valid_ppl, test));
    }
    s
}

pub fn parse_comparison_csv(text: &str) -> Result<Vec<ComparisonRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(COMPARE_HEADER) {
        return Err(Error::Analysis(format!("comparison CSV must start with `{COMPARE_HEADER}`")));
    }
    let num = |s: &str, what: &str| -> Result<f64> { s.parse().map_err(|e| Error::Analysis(format!("{what}: {e}"))) };
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Analysis(format!("expected 8 fields in {l:?}")));
            }
            Ok(ComparisonRow {
                label: f[0].into(),
                kind: f[1].into(),
                k: num(f[2], "K")? as usize,
                n: num(f[3], "N")? as usize,
                alpha: num(f[4], "alpha")?,
                params: num(f[5], "params")? as u64,
                valid_ppl: num(f[6], "valid_ppl")?,
                test_ppl: if f[7].is_empty() { None } else { Some(num(f[7], "test_ppl")?) },
            })
        })
        .collect()
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{:<20} {:<13} {:>5} {:>3} {:>6} {:>12} {:>10} {:>10}\n", "label", "kind", "K", "N", "alpha", "params", "valid_ppl", "test_ppl");
    for r in rows {
        let test = r.test_ppl.map_or("-".to_string(), |t| format!("{t:.3}"));
        s.push_str(&format!(
            "{:<20} {:<13} {:>5} {:>3} {:>6} {:>12} {:>10.3} {:>10}\n",
            r.label, r.kind, r.k, r.n, r.alpha, r.params, r.valid_ppl, test
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub stddev: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { count: 0, mean: 0.0, stddev: 0.0 };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        Self { count: n, mean, stddev: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunThroughput {
    pub file: PathBuf,
    pub tokens_per_sec: Summary,
    pub updates_per_sec: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub runs: Vec<RunThroughput>,
    /// Pooled over all runs, so each run weighs by its step count.
    pub tokens_per_sec: Summary,
    pub updates_per_sec: Summary,
}

/// Throughput statistics over train rows past `skip_steps`.
pub fn throughput_report(files: &[PathBuf], skip_steps: u64) -> Result<ThroughputReport> {
    let mut runs = Vec::new();
    let (mut all_tok, mut all_upd) = (Vec::new(), Vec::new());
    for f in files {
        let recs: Vec<MetricsRecord> =
            read_metrics(f)?.into_iter().filter(|r| r.kind == RecordKind::Train && r.step > skip_steps).collect();
        let tok: Vec<f64> = recs.iter().map(|r| r.tokens_per_sec).collect();
        let upd: Vec<f64> = recs.iter().map(|r| r.updates_per_sec).collect();
        runs.push(RunThroughput { file: f.clone(), tokens_per_sec: Summary::of(&tok), updates_per_sec: Summary::of(&upd) });
        all_tok.extend(tok);
        all_upd.extend(upd);
    }
    Ok(ThroughputReport { runs, tokens_per_sec: Summary::of(&all_tok), updates_per_sec: Summary::of(&all_upd) })
}
