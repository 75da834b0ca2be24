//! Machine-readable metric records and the rendered results table.

use std::fmt::Write;

use serde::Serialize;

use super::metrics::{hit_by_query, map_at_n, mapq_at_n, mrrq_at_n, recall_at_n, RankedResult};
use super::Task;

pub const METRIC_NAMES: [&str; 5] = ["map", "recall", "mapq", "mrrq", "hit_by_query"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub task: &'static str,
    pub metric: &'static str,
    pub n: usize,
    pub value: f64,
}

/// Every metric at every cutoff, cutoff-major.
pub fn compute_metrics(task: Task, results: &[RankedResult], cutoffs: &[usize]) -> Vec<MetricRecord> {
    let fns: [fn(&[RankedResult], usize) -> f64; 5] =
        [map_at_n, recall_at_n, mapq_at_n, mrrq_at_n, hit_by_query];
    let mut out = Vec::new();
    for &n in cutoffs {
        for (metric, f) in METRIC_NAMES.iter().zip(fns) {
            out.push(MetricRecord {
                task: task.as_str(),
                metric,
                n,
                value: f(results, n),
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct TaskReport {
    pub task: Task,
    /// Ranked sessions.
    pub sessions: usize,
    /// Sessions whose label was missing from the pool.
    pub skipped: usize,
    pub pool_size: usize,
    pub records: Vec<MetricRecord>,
    pub results: Vec<RankedResult>,
}

#[derive(Serialize)]
struct Summary<'a> {
    task: &'a str,
    sessions: usize,
    skipped: usize,
    pool_size: usize,
}

impl TaskReport {
    pub fn value(&self, metric: &str, n: usize) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.metric == metric && r.n == n)
            .map(|r| r.value)
    }

    /// One JSON object per line: a summary, then one per metric record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let summary = Summary {
            task: self.task.as_str(),
            sessions: self.sessions,
            skipped: self.skipped,
            pool_size: self.pool_size,
        };
        out.push_str(&serde_json::to_string(&summary).expect("plain struct"));
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain struct"));
            out.push('\n');
        }
        out
    }
}

/// A percent table with one row per task and map/recall/mapq columns per
/// cutoff, followed by the by-query metrics.
pub fn render_table(reports: &[TaskReport]) -> String {
    let mut out = String::new();
    out.push_str("# scale caveat: synthetic sessions; candidate and attribute label spaces are the\n");
    out.push_str("# synthetic catalog's, far smaller than a production catalog.\n");
    let Some(first) = reports.first() else {
        return out;
    };
    let mut cutoffs: Vec<usize> = first.records.iter().map(|r| r.n).collect();
    cutoffs.dedup();

    let mut header = format!("{:<16}", "task");
    for n in &cutoffs {
        for m in ["map", "recall", "mapq"] {
            write!(header, " {:>10}", format!("{m}@{n}")).unwrap();
        }
    }
    out.push_str(&header);
    out.push('\n');
    for r in reports {
        write!(out, "{:<16}", r.task.as_str()).unwrap();
        for &n in &cutoffs {
            for m in ["map", "recall", "mapq"] {
                let v = r.value(m, n).unwrap_or(f64::NAN);
                write!(out, " {:>10.3}", 100.0 * v).unwrap();
            }
        }
        out.push('\n');
    }
    out.push('\n');
    let mut header = format!("{:<16}", "task");
    for n in &cutoffs {
        for m in ["mrrq", "hit"] {
            write!(header, " {:>10}", format!("{m}@{n}")).unwrap();
        }
    }
    write!(header, " {:>9} {:>8} {:>8}", "sessions", "skipped", "pool").unwrap();
    out.push_str(&header);
    out.push('\n');
    for r in reports {
        write!(out, "{:<16}", r.task.as_str()).unwrap();
        for &n in &cutoffs {
            for m in ["mrrq", "hit_by_query"] {
                let v = r.value(m, n).unwrap_or(f64::NAN);
                write!(out, " {:>10.3}", 100.0 * v).unwrap();
            }
        }
        writeln!(out, " {:>9} {:>8} {:>8}", r.sessions, r.skipped, r.pool_size).unwrap();
    }
    out
}
