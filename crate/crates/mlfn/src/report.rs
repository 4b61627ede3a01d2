//! Metric tables as CSV and as aligned text.

use std::fmt::Write as _;
use std::path::Path;

use mlfn_core::eval::EvalReport;

use crate::error::{CliError, Result};

/// One matching result: CMC at the requested ranks plus mAP.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub label: String,
    pub ranks: Vec<usize>,
    pub cmc: Vec<f64>,
    pub map: f64,
}

impl MetricRow {
    pub fn from_report(label: impl Into<String>, r: &EvalReport) -> Self {
        Self { label: label.into(), ranks: r.ranks.clone(), cmc: r.cmc.clone(), map: r.map }
    }

    pub fn rank(&self, r: usize) -> Option<f64> {
        self.ranks.iter().position(|&x| x == r).map(|i| self.cmc[i])
    }
}

/// Header plus string rows, written with the `csv` crate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        self.rows.push(row.into_iter().map(Into::into).collect());
    }

    pub fn metrics(label_column: &str, rows: &[MetricRow]) -> Self {
        let ranks = rows.first().map(|r| r.ranks.clone()).unwrap_or_default();
        let mut t = Self::new(std::iter::once(label_column.to_string()).chain(ranks.iter().map(|r| format!("R{}", r))).chain(["mAP".to_string()]));
        for r in rows {
            t.push(std::iter::once(r.label.clone()).chain(r.cmc.iter().map(|v| fmt(*v))).chain([fmt(r.map)]));
        }
        t
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush().map_err(CliError::io(path))
    }

    /// Columns padded to their widest cell; the first column left-aligned.
    pub fn to_text(&self) -> String {
        let cols = self.header.len();
        let width: Vec<usize> = (0..cols)
            .map(|c| self.rows.iter().map(|r| r.get(c).map_or(0, |s| s.len())).chain([self.header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        let line = |s: &mut String, cells: &[String]| {
            for (c, cell) in cells.iter().enumerate() {
                if c == 0 {
                    let _ = write!(s, "{:<w$}", cell, w = width[c]);
                } else {
                    let _ = write!(s, "  {:>w$}", cell, w = width[c]);
                }
            }
            s.push('\n');
        };
        line(&mut s, &self.header);
        let rule: usize = width.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
        s.push_str(&"-".repeat(rule));
        s.push('\n');
        for r in &self.rows {
            line(&mut s, r);
        }
        s
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(CliError::io(path))
    }
}

/// Fixed six-decimal rendering used in every metric file.
pub fn fmt(v: f64) -> String {
    format!("{:.6}", v)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<MetricRow> {
        vec![
            MetricRow { label: "R".into(), ranks: vec![1, 5], cmc: vec![0.5, 0.875], map: 0.61 },
            MetricRow { label: "FS-pair".into(), ranks: vec![1, 5], cmc: vec![0.25, 1.0], map: 0.4 },
        ]
    }

    #[test]
    fn metric_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        Table::metrics("features", &rows()).write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, "features,R1,R5,mAP\nR,0.500000,0.875000,0.610000\nFS-pair,0.250000,1.000000,0.400000\n");
    }

    #[test]
    fn text_table_aligns_columns() {
        let t = Table::metrics("features", &rows()).to_text();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
        assert!(lines[1].chars().all(|c| c == '-'));
        assert!(lines[3].starts_with("FS-pair "));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
        assert_eq!(rows()[0].rank(5), Some(0.875));
        assert_eq!(rows()[0].rank(10), None);
    }
}
