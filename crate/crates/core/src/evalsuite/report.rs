use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;

use super::{Metric, MetricSummary};

pub const BENCH_CONVERSATION: &str = "conversation";
pub const BENCH_QA: &str = "qa";
pub const BENCH_GROUNDING: &str = "grounding";

/// QA datasets in table order; others follow alphabetically.
const QA_ORDER: [&str; 4] = ["MSVD-QA", "MSRVTT-QA", "TGIF-QA", "ActivityNet-QA"];
/// Grounding datasets in table order, with their column headings.
const GROUNDING_COLUMNS: [(&str, &str); 2] = [("vidstg", "VidSTG"), ("hc-stvg", "HC-STVG")];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ReportError {
    #[error("no reports given")]
    Empty,
    #[error("config hash mismatch: {first} ({first_hash}) vs {other} ({other_hash})")]
    ConfigMismatch {
        first: String,
        first_hash: String,
        other: String,
        other_hash: String,
    },
    #[error("{0}: unknown benchmark {1:?}")]
    UnknownBenchmark(String, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub benchmark: String,
    pub judge_model: String,
    /// Digest over every template the run used.
    pub template_hash: String,
    pub config_hash: String,
    #[serde(default)]
    pub template_hashes: BTreeMap<String, String>,
    /// Thresholds and other knobs the run was made with.
    #[serde(default)]
    pub settings: BTreeMap<String, serde_json::Value>,
    pub metrics: BTreeMap<String, MetricSummary>,
}

impl BenchmarkReport {
    pub fn new(
        benchmark: &str,
        judge_model: String,
        config_hash: String,
        template_hashes: BTreeMap<String, String>,
        metrics: BTreeMap<String, MetricSummary>,
    ) -> Self {
        Self {
            benchmark: benchmark.to_string(),
            judge_model,
            template_hash: combined_hash(&template_hashes),
            config_hash,
            template_hashes,
            settings: BTreeMap::new(),
            metrics,
        }
    }
}

fn combined_hash(hashes: &BTreeMap<String, String>) -> String {
    let joined: String = hashes.iter().map(|(n, h)| format!("{n}={h}\n")).collect();
    sha256_hex(joined.as_bytes())
}

fn fmt(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.decimals$}"))
}

/// Pipe table with columns padded to their widest cell. `spans` optionally
/// adds a grouping header row of `(title, column count)` cells.
fn pipe_table(spans: Option<&[(String, usize)]>, header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    if let Some(spans) = spans {
        // widen the last column of a group whose title does not fit
        let mut col = 0;
        for (title, n) in spans {
            let inner: usize = widths[col..col + n].iter().sum::<usize>() + 3 * (n - 1);
            let need = title.chars().count();
            if need > inner {
                widths[col + n - 1] += need - inner;
            }
            col += n;
        }
    }
    let line = |cells: Vec<(String, usize)>| {
        let body: Vec<String> = cells.into_iter().map(|(c, w)| format!(" {c:<w$} ")).collect();
        format!("|{}|\n", body.join("|"))
    };
    let mut out = String::new();
    if let Some(spans) = spans {
        let mut col = 0;
        let mut cells = Vec::new();
        for (title, n) in spans {
            let w = widths[col..col + n].iter().sum::<usize>() + 3 * (n - 1);
            cells.push((title.clone(), w));
            col += n;
        }
        out.push_str(&line(cells));
    }
    out.push_str(&line(header.iter().cloned().zip(widths.iter().copied()).collect()));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(w + 2)).collect();
    out.push_str(&format!("|{}|\n", rule.join("|")));
    for r in rows {
        out.push_str(&line(r.iter().cloned().zip(widths.iter().copied()).collect()));
    }
    out
}

fn conversation_table(rows: &[(&str, &BenchmarkReport)]) -> String {
    let mut header = vec!["Run".to_string()];
    header.extend(Metric::ALL.iter().map(|m| m.title().to_string()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, r)| {
            let mut row = vec![label.to_string()];
            row.extend(Metric::ALL.iter().map(|m| fmt(r.metrics.get(m.as_str()).and_then(|s| s.mean), 2)));
            row
        })
        .collect();
    pipe_table(None, &header, &body)
}

fn qa_table(rows: &[(&str, &BenchmarkReport)]) -> String {
    let mut datasets: Vec<&str> = QA_ORDER
        .iter()
        .copied()
        .filter(|d| rows.iter().any(|(_, r)| r.metrics.contains_key(*d)))
        .collect();
    let mut extra: Vec<&str> = rows
        .iter()
        .flat_map(|(_, r)| r.metrics.keys().map(String::as_str))
        .filter(|d| !QA_ORDER.contains(d))
        .collect();
    extra.sort_unstable();
    extra.dedup();
    datasets.extend(extra);

    let mut spans = vec![(String::new(), 1)];
    let mut header = vec!["Run".to_string()];
    for d in &datasets {
        spans.push((d.to_string(), 2));
        header.push("Accuracy".into());
        header.push("Score".into());
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, r)| {
            let mut row = vec![label.to_string()];
            for d in &datasets {
                let s = r.metrics.get(*d);
                row.push(fmt(s.and_then(|s| s.accuracy).map(|a| a * 100.0), 1));
                row.push(fmt(s.and_then(|s| s.mean), 1));
            }
            row
        })
        .collect();
    pipe_table(Some(&spans), &header, &body)
}

fn grounding_table(rows: &[(&str, &BenchmarkReport)]) -> String {
    let mut header = vec!["Run".to_string()];
    header.extend(GROUNDING_COLUMNS.iter().map(|(_, t)| t.to_string()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, r)| {
            let mut row = vec![label.to_string()];
            row.extend(GROUNDING_COLUMNS.iter().map(|(k, _)| fmt(r.metrics.get(*k).and_then(|s| s.mean), 1)));
            row
        })
        .collect();
    pipe_table(None, &header, &body)
}

/// Table for reports of a single benchmark kind, one row per report.
pub fn render_table(benchmark: &str, rows: &[(&str, &BenchmarkReport)]) -> Option<String> {
    match benchmark {
        BENCH_CONVERSATION => Some(conversation_table(rows)),
        BENCH_QA => Some(qa_table(rows)),
        BENCH_GROUNDING => Some(grounding_table(rows)),
        _ => None,
    }
}

/// Render labelled reports as one table per benchmark kind (conversation,
/// QA, grounding). All reports must share one config hash.
pub fn render_report(reports: &[(String, BenchmarkReport)]) -> Result<String, ReportError> {
    let (first_label, first) = reports.first().ok_or(ReportError::Empty)?;
    for (label, r) in reports {
        if r.config_hash != first.config_hash {
            return Err(ReportError::ConfigMismatch {
                first: first_label.clone(),
                first_hash: first.config_hash.clone(),
                other: label.clone(),
                other_hash: r.config_hash.clone(),
            });
        }
        if ![BENCH_CONVERSATION, BENCH_QA, BENCH_GROUNDING].contains(&r.benchmark.as_str()) {
            return Err(ReportError::UnknownBenchmark(label.clone(), r.benchmark.clone()));
        }
    }
    let mut sections = Vec::new();
    for (bench, title) in [
        (BENCH_CONVERSATION, "Video-based conversation benchmark (judge scores, 1-5)"),
        (BENCH_GROUNDING, "Spatial grounding (mean IoU x100)"),
        (BENCH_QA, "Zero-shot question answering (accuracy %, score 1-5)"),
    ] {
        let rows: Vec<(&str, &BenchmarkReport)> = reports
            .iter()
            .filter(|(_, r)| r.benchmark == bench)
            .map(|(l, r)| (l.as_str(), r))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let judges: Vec<&str> = {
            let mut j: Vec<&str> = rows.iter().map(|(_, r)| r.judge_model.as_str()).collect();
            j.dedup();
            j
        };
        sections.push(format!(
            "{title}\njudge: {}\n\n{}",
            judges.join(", "),
            render_table(bench, &rows).expect("known benchmark")
        ));
    }
    Ok(format!("config: {}\n\n{}", first.config_hash, sections.join("\n")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(mean: Option<f64>, accuracy: Option<f64>) -> MetricSummary {
        MetricSummary { mean, count: 10, invalid: 0, accuracy }
    }

    fn conv() -> BenchmarkReport {
        let metrics = [
            ("correctness", 2.86),
            ("detail", 2.95),
            ("context", 3.23),
            ("temporal", 2.53),
            ("consistency", 3.49),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), summary(Some(v), None)))
        .collect();
        BenchmarkReport::new(BENCH_CONVERSATION, "judge".into(), "cfg".into(), BTreeMap::new(), metrics)
    }

    #[test]
    fn conversation_columns() {
        let t = render_table(BENCH_CONVERSATION, &[("13B", &conv())]).unwrap();
        let header = t.lines().next().unwrap();
        let cols: Vec<&str> = header.split('|').map(str::trim).filter(|s| !s.is_empty()).collect();
        assert_eq!(
            cols,
            vec!["Run", "Correctness", "Detail Orientation", "Contextual Understanding", "Temporal Understanding", "Consistency"]
        );
        assert!(t.lines().nth(2).unwrap().contains("2.86"));
        assert!(t.lines().all(|l| l.chars().count() == header.chars().count()));
    }

    #[test]
    fn qa_pairs() {
        let metrics = [("TGIF-QA", 0.5, 3.0), ("MSVD-QA", 0.641, 3.7)]
            .into_iter()
            .map(|(k, a, s)| (k.to_string(), summary(Some(s), Some(a))))
            .collect();
        let r = BenchmarkReport::new(BENCH_QA, "j".into(), "c".into(), BTreeMap::new(), metrics);
        let t = render_table(BENCH_QA, &[("run", &r)]).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].find("MSVD-QA").unwrap() < lines[0].find("TGIF-QA").unwrap());
        assert_eq!(lines[1].matches("Accuracy").count(), 2);
        assert!(lines[3].contains("64.1") && lines[3].contains("3.7"));
        assert!(lines.iter().all(|l| l.chars().count() == lines[0].chars().count()));
    }

    #[test]
    fn undefined_renders_marker() {
        let mut r = conv();
        r.metrics.insert("detail".into(), summary(None, None));
        r.metrics.remove("temporal");
        let t = render_table(BENCH_CONVERSATION, &[("x", &r)]).unwrap();
        assert_eq!(t.matches("n/a").count(), 2);
    }

    #[test]
    fn mismatched_config_refused() {
        let a = conv();
        let mut b = conv();
        b.config_hash = "other".into();
        let err = render_report(&[("a".into(), a), ("b".into(), b)]).unwrap_err();
        assert!(matches!(err, ReportError::ConfigMismatch { .. }));
        assert_eq!(render_report(&[]).unwrap_err(), ReportError::Empty);
    }

    #[test]
    fn template_hash_tracks_contents() {
        let mut h = BTreeMap::new();
        h.insert("a".to_string(), "1".to_string());
        let r1 = BenchmarkReport::new(BENCH_QA, "j".into(), "c".into(), h.clone(), BTreeMap::new());
        h.insert("a".to_string(), "2".to_string());
        let r2 = BenchmarkReport::new(BENCH_QA, "j".into(), "c".into(), h, BTreeMap::new());
        assert_ne!(r1.template_hash, r2.template_hash);
    }
}
