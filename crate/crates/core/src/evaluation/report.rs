//! Score reports and their TSV / text-table renderings.

use std::fmt;
use std::fmt::Write as _;

use super::mos::{MOS_MAX, MOS_MIN};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Similarity,
    Mos,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Similarity => "cosine",
            Metric::Mos => "mos",
        })
    }
}

impl Metric {
    fn range(self) -> (f64, f64) {
        match self {
            Metric::Similarity => (-1.0, 1.0),
            Metric::Mos => (MOS_MIN, MOS_MAX),
        }
    }
}

/// Per-item scores of one system on one test set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub system: String,
    pub test_set: String,
    pub metric: Metric,
    pub mean: f64,
    pub items: Vec<(String, f64)>,
}

impl EvalReport {
    /// Validates every score against the metric's range.
    pub fn new(system: &str, test_set: &str, metric: Metric, items: Vec<(String, f64)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data(format!("no scored items for {system} on {test_set}")));
        }
        let (lo, hi) = metric.range();
        if let Some((id, v)) = items.iter().find(|(_, v)| !(v.is_finite() && *v >= lo && *v <= hi)) {
            return Err(Error::Data(format!("{metric} score {v} for `{id}` outside [{lo}, {hi}]")));
        }
        let mean = items.iter().map(|(_, v)| v).sum::<f64>() / items.len() as f64;
        Ok(Self { system: system.into(), test_set: test_set.into(), metric, mean, items })
    }

    pub fn count(&self) -> usize {
        self.items.len()
    }

    /// `system  test_set  metric  item  score` rows with a header.
    pub fn items_tsv(reports: &[EvalReport]) -> String {
        let mut out = String::from("system\ttest_set\tmetric\titem\tscore\n");
        for r in reports {
            for (id, v) in &r.items {
                let _ = writeln!(out, "{}\t{}\t{}\t{id}\t{v:.6}", r.system, r.test_set, r.metric);
            }
        }
        out
    }
}

/// Systems as rows, test sets as columns, one metric.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub metric: Metric,
    pub systems: Vec<String>,
    pub test_sets: Vec<String>,
    /// `cells[system][test_set]`: mean and sample count.
    pub cells: Vec<Vec<Option<(f64, usize)>>>,
}

impl ReportTable {
    /// Rows and columns keep first-appearance order.
    pub fn from_reports(reports: &[EvalReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Data("no reports to tabulate".into()))?;
        if reports.iter().any(|r| r.metric != first.metric) {
            return Err(Error::Data("cannot tabulate reports of different metrics".into()));
        }
        let mut systems: Vec<String> = Vec::new();
        let mut test_sets: Vec<String> = Vec::new();
        for r in reports {
            if !systems.contains(&r.system) {
                systems.push(r.system.clone());
            }
            if !test_sets.contains(&r.test_set) {
                test_sets.push(r.test_set.clone());
            }
        }
        let mut cells = vec![vec![None; test_sets.len()]; systems.len()];
        for r in reports {
            let i = systems.iter().position(|s| *s == r.system).unwrap();
            let j = test_sets.iter().position(|s| *s == r.test_set).unwrap();
            cells[i][j] = Some((r.mean, r.count()));
        }
        Ok(Self { metric: first.metric, systems, test_sets, cells })
    }

    pub fn get(&self, system: &str, test_set: &str) -> Option<f64> {
        let i = self.systems.iter().position(|s| s == system)?;
        let j = self.test_sets.iter().position(|s| s == test_set)?;
        self.cells[i][j].map(|c| c.0)
    }

    /// Header `system  <set>...`, one row per system, means to 3 decimals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("system");
        for t in &self.test_sets {
            let _ = write!(out, "\t{t}");
        }
        out.push('\n');
        for (s, row) in self.systems.iter().zip(&self.cells) {
            out.push_str(s);
            for c in row {
                match c {
                    Some((m, _)) => {
                        let _ = write!(out, "\t{m:.3}");
                    }
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Aligned plain-text rendering, same layout as [`Self::to_tsv`].
    pub fn render(&self) -> String {
        let mut rows: Vec<Vec<String>> = vec![std::iter::once(format!("{} / method", self.metric))
            .chain(self.test_sets.iter().cloned())
            .collect()];
        for (s, row) in self.systems.iter().zip(&self.cells) {
            let mut r = vec![s.clone()];
            r.extend(row.iter().map(|c| c.map_or("-".to_string(), |(m, _)| format!("{m:.3}"))));
            rows.push(r);
        }
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
        let rule: String = widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("+");
        let mut out = String::new();
        for (n, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(j, c)| if j == 0 { format!(" {c:<w$} ", w = widths[j]) } else { format!(" {c:>w$} ", w = widths[j]) })
                .collect();
            out.push_str(line.join("|").trim_end());
            out.push('\n');
            if n == 0 {
                out.push_str(&rule);
                out.push('\n');
            }
        }
        out
    }
}
