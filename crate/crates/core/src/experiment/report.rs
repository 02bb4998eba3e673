use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{LabError, Result};
use crate::metrics::Correlation;
use crate::model::{SampleRecord, TrainStepReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Num(x) => x.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(i) => Some(*i as f64),
            Cell::Num(x) => Some(*x),
            Cell::Text(_) => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Text(x.to_string())
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

impl From<String> for Cell {
    fn from(x: String) -> Self {
        Cell::Text(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width in table {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[i]).collect())
    }
}

/// A Pearson test between two per-sample series. `r` and `p_value` are
/// absent when the test is undefined, with the reason in `omitted`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub x: String,
    pub y: String,
    pub n: usize,
    pub r: Option<f64>,
    pub p_value: Option<f64>,
    pub omitted: Option<String>,
}

impl CorrelationEntry {
    pub fn compute(x: &str, y: &str, xs: &[f64], ys: &[f64]) -> Result<Self> {
        let mut e = CorrelationEntry {
            x: x.to_string(),
            y: y.to_string(),
            n: xs.len(),
            r: None,
            p_value: None,
            omitted: None,
        };
        match crate::metrics::pearson_test(xs, ys) {
            Ok(Correlation { r, p_value, .. }) => {
                e.r = Some(r);
                e.p_value = Some(p_value);
            }
            Err(err @ (LabError::Undefined(_) | LabError::Empty(_))) => e.omitted = Some(err.to_string()),
            Err(err) => return Err(err),
        }
        Ok(e)
    }
}

/// Equal-width histogram over `[lo, hi]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub name: String,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(name: &str, values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            if v < lo || v > hi || !v.is_finite() {
                continue;
            }
            let i = (((v - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Histogram {
            name: name.to_string(),
            edges,
            counts,
        }
    }
}

/// Plot-ready point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSamples {
    pub arm: String,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub arm: String,
    pub steps: Vec<TrainStepReport>,
}

/// A named yes/no outcome of an experiment, e.g. a monotonicity claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub kind: String,
    pub config: RunConfig,
    pub derived_seeds: Vec<(String, u64)>,
    pub tables: Vec<Table>,
    pub correlations: Vec<CorrelationEntry>,
    pub histograms: Vec<Histogram>,
    pub scatters: Vec<Scatter>,
    pub samples: Vec<ArmSamples>,
    pub training: Vec<TrainingTrace>,
    pub checks: Vec<Check>,
    /// Excluded from reproducibility comparisons.
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn new(kind: &str, config: RunConfig) -> Self {
        RunReport {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            kind: kind.to_string(),
            config,
            derived_seeds: Vec::new(),
            tables: Vec::new(),
            correlations: Vec::new(),
            histograms: Vec::new(),
            scatters: Vec::new(),
            samples: Vec::new(),
            training: Vec::new(),
            checks: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn correlation(&self, x: &str, y: &str) -> Option<&CorrelationEntry> {
        self.correlations.iter().find(|c| c.x == x && c.y == y)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: RunReport = serde_json::from_str(text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(LabError::Config(format!(
                "report schema version {} (expected {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    /// The JSON form with the wall-clock field zeroed.
    pub fn canonical_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.wall_clock_seconds = 0.0;
        r.to_json()
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| LabError::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| LabError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| LabError::io(&tmp, e))?;
    f.sync_all().map_err(|e| LabError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

fn delimited(header: &[String], rows: impl Iterator<Item = Vec<String>>, delim: u8) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().delimiter(delim).from_writer(Vec::new());
    let err = |e: csv::Error| LabError::InvalidArgument(format!("table encoding: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| LabError::InvalidArgument(format!("table encoding: {e}")))
}

pub fn table_csv(t: &Table) -> Result<Vec<u8>> {
    delimited(&t.columns, t.rows.iter().map(|r| r.iter().map(Cell::render).collect()), b',')
}

pub fn histogram_tsv(h: &Histogram) -> Result<Vec<u8>> {
    let header = ["bin_lo", "bin_hi", "count"].map(String::from);
    delimited(
        &header,
        h.counts.iter().enumerate().map(|(i, c)| {
            vec![h.edges[i].to_string(), h.edges[i + 1].to_string(), c.to_string()]
        }),
        b'\t',
    )
}

pub fn scatter_tsv(s: &Scatter) -> Result<Vec<u8>> {
    delimited(
        &s.columns,
        s.rows.iter().map(|r| r.iter().map(|x| x.to_string()).collect()),
        b'\t',
    )
}

/// Writes `report.json`, one CSV per table and one TSV per histogram and
/// scatter into `dir`. Returns the written paths.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut files: Vec<(PathBuf, Vec<u8>)> = vec![(dir.join("report.json"), report.to_json()?.into_bytes())];
    for t in &report.tables {
        files.push((dir.join(format!("{}.csv", t.name)), table_csv(t)?));
    }
    for h in &report.histograms {
        files.push((dir.join(format!("hist_{}.tsv", h.name)), histogram_tsv(h)?));
    }
    for s in &report.scatters {
        files.push((dir.join(format!("scatter_{}.tsv", s.name)), scatter_tsv(s)?));
    }
    for (path, bytes) in &files {
        write_atomic(path, bytes)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> RunReport {
        let mut r = RunReport::new("correlate", RunConfig::default());
        let mut t = Table::new("sweep", &["alpha", "s_disc", "subset"]);
        t.push(vec![0.0.into(), 0.25.into(), "original".into()]);
        t.push(vec![1.0.into(), 1.0.into(), "original".into()]);
        r.tables.push(t);
        r.histograms.push(Histogram::build("s", &[0.0, 0.1, 0.95, 1.0], 0.0, 1.0, 4));
        r.correlations
            .push(CorrelationEntry::compute("a", "b", &[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap());
        r.wall_clock_seconds = 3.5;
        r
    }

    #[test]
    fn json_round_trip() {
        let r = sample_report();
        assert_eq!(RunReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn csv_rows_match_table() {
        let r = sample_report();
        let text = String::from_utf8(table_csv(&r.tables[0]).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + r.tables[0].rows.len());
        assert_eq!(lines[0], "alpha,s_disc,subset");
        assert_eq!(lines[2], "1,1,original");
    }

    #[test]
    fn histogram_counts() {
        let h = Histogram::build("s", &[0.0, 0.1, 0.95, 1.0, 1.5], 0.0, 1.0, 4);
        assert_eq!(h.counts, vec![2, 0, 0, 2]);
        assert_eq!(h.edges, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn constant_series_correlation_is_omitted() {
        let r = sample_report();
        let c = &r.correlations[0];
        assert!(c.r.is_none() && c.omitted.is_some());
    }

    #[test]
    fn emit_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_report();
        let a = emit_report(&r, &dir.path().join("a")).unwrap();
        let b = emit_report(&r, &dir.path().join("b")).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let leftovers = std::fs::read_dir(dir.path().join("a"))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp"))
            .count();
        assert_eq!(leftovers, 0);
    }
}
