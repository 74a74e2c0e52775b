//! Benchmark reports and their csv / markdown renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::stats::Summary;

/// Smallest sample count a row may carry unless the caller lowers it.
pub const DEFAULT_MIN_SAMPLES: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub operation: String,
    /// `shm`, `fallback` or `-` for local operations.
    pub transport: String,
    /// `+`-joined flags such as `seal+sandbox`, or `plain`.
    pub mode: String,
    pub samples: u64,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    /// Operations per second, where it means something.
    pub throughput: Option<f64>,
}

impl Row {
    pub fn new(operation: impl Into<String>, transport: &str, mode: &str, s: &Summary) -> Self {
        Self {
            operation: operation.into(),
            transport: transport.to_string(),
            mode: mode.to_string(),
            samples: s.samples,
            mean_us: s.mean_ns / 1e3,
            p50_us: s.p50_ns / 1e3,
            p99_us: s.p99_ns / 1e3,
            throughput: None,
        }
    }

    pub fn with_throughput(mut self, ops_per_sec: f64) -> Self {
        self.throughput = Some(ops_per_sec);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<Row>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            _ => Err(format!("unknown format {s:?} (csv or md)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("report has no rows (pass --allow-empty to write it anyway)")]
    Empty,
    #[error("row {operation:?} has {samples} samples, fewer than the minimum {min}")]
    TooFewSamples { operation: String, samples: u64, min: u64 },
    #[error("cannot write {path}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub const CSV_HEADER: [&str; 8] = [
    "operation",
    "transport",
    "mode",
    "samples",
    "mean_us",
    "p50_us",
    "p99_us",
    "throughput_ops_s",
];

impl BenchReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Report with the host description filled in.
    pub fn with_host_metadata() -> Self {
        let mut r = Self::new();
        r.meta("host.cpus", std::thread::available_parallelism().map_or(1, |n| n.get()));
        r.meta("host.os", std::env::consts::OS);
        r.meta("host.arch", std::env::consts::ARCH);
        r.meta("sandbox.mode", format!("{:?}", rpcool::sandbox::info().mode));
        r
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn push(&mut self, row: Row) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: BenchReport) {
        self.rows.extend(other.rows);
        self.metadata.extend(other.metadata);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, operation: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.operation == operation)
    }

    /// Every row has at least `min` samples.
    pub fn check_samples(&self, min: u64) -> Result<(), ReportError> {
        match self.rows.iter().find(|r| r.samples < min) {
            Some(r) => Err(ReportError::TooFewSamples {
                operation: r.operation.clone(),
                samples: r.samples,
                min,
            }),
            None => Ok(()),
        }
    }

    pub fn to_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.operation.clone(),
                r.transport.clone(),
                r.mode.clone(),
                r.samples.to_string(),
                format!("{:.3}", r.mean_us),
                format!("{:.3}", r.p50_us),
                format!("{:.3}", r.p99_us),
                r.throughput.map_or(String::new(), |t| format!("{t:.0}")),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| Operation | Transport | Mode | Samples | Mean (µs) | p50 (µs) | p99 (µs) | Throughput (ops/s) |\n");
        s.push_str("|---|---|---|---:|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let tp = r.throughput.map_or("-".to_string(), |t| format!("{t:.0}"));
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.3} | {:.3} | {:.3} | {} |",
                r.operation, r.transport, r.mode, r.samples, r.mean_us, r.p50_us, r.p99_us, tp
            );
        }
        if !self.metadata.is_empty() {
            s.push('\n');
            for (k, v) in &self.metadata {
                let _ = writeln!(s, "- {k}: {v}");
            }
        }
        s
    }

    pub fn render(&self, format: Format) -> Result<String, ReportError> {
        match format {
            Format::Csv => self.to_csv(),
            Format::Markdown => Ok(self.to_markdown()),
        }
    }
}

/// Writes `report` to `path`. An empty report is an error unless
/// `allow_empty`.
pub fn emit_report(report: &BenchReport, format: Format, path: &Path, allow_empty: bool) -> Result<(), ReportError> {
    if report.is_empty() && !allow_empty {
        return Err(ReportError::Empty);
    }
    let text = report.render(format)?;
    std::fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str) -> Row {
        let s = Summary::of(&[1000, 2000, 3000]).unwrap();
        Row::new(name, "-", "plain", &s)
    }

    fn three() -> BenchReport {
        let mut r = BenchReport::new();
        for n in ["a", "b, with comma", "c"] {
            r.push(row(n));
        }
        r.meta("k", "v");
        r
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let text = three().to_csv().unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let names: Vec<String> = rd.records().map(|r| r.unwrap()[0].to_string()).collect();
        assert_eq!(names, ["a", "b, with comma", "c"]);
    }

    #[test]
    fn markdown_lists_every_row() {
        let md = three().to_markdown();
        for n in ["| a |", "| b, with comma |", "| c |", "- k: v"] {
            assert!(md.contains(n), "{md}");
        }
    }

    #[test]
    fn empty_needs_permission() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let empty = BenchReport::new();
        assert!(matches!(emit_report(&empty, Format::Csv, &p, false), Err(ReportError::Empty)));
        emit_report(&empty, Format::Csv, &p, true).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 1);
    }

    #[test]
    fn unwritable_path() {
        let r = three();
        let e = emit_report(&r, Format::Markdown, Path::new("/nonexistent/dir/r.md"), false).unwrap_err();
        assert!(matches!(e, ReportError::Io { .. }));
    }

    #[test]
    fn sample_minimum() {
        let r = three();
        assert!(r.check_samples(3).is_ok());
        assert!(matches!(r.check_samples(4), Err(ReportError::TooFewSamples { .. })));
    }

    #[test]
    fn format_names() {
        assert_eq!("csv".parse::<Format>().unwrap(), Format::Csv);
        assert_eq!("md".parse::<Format>().unwrap(), Format::Markdown);
        assert!("xml".parse::<Format>().is_err());
    }
}
