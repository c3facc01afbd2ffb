use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::da::DaReport;
use crate::error::{Error, Result};

/// Accuracy table: one row per block combination, one column per dataset or
/// transfer task. Values are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub mean: Vec<Vec<Option<f64>>>,
    pub std: Vec<Vec<Option<f64>>>,
}

/// `"amazon" -> "A"`.
fn initial(domain: &str) -> String {
    domain.chars().next().map(|c| c.to_uppercase().collect()).unwrap_or_default()
}

impl ResultsTable {
    pub fn new(rows: Vec<String>, cols: Vec<String>) -> Self {
        let (r, c) = (rows.len(), cols.len());
        Self { rows, cols, mean: vec![vec![None; c]; r], std: vec![vec![None; c]; r] }
    }

    pub fn set(&mut self, row: &str, col: &str, mean: f64, std: Option<f64>) -> Result<()> {
        let r = self.rows.iter().position(|x| x == row).ok_or_else(|| Error::invalid(format!("no row `{row}`")))?;
        let c = self.cols.iter().position(|x| x == col).ok_or_else(|| Error::invalid(format!("no column `{col}`")))?;
        self.mean[r][c] = Some(mean);
        self.std[r][c] = std;
        Ok(())
    }

    /// One column per transfer task, labeled like `A→W`.
    pub fn from_da(reports: &[DaReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::invalid("no DA reports"))?;
        let cols = reports.iter().map(|r| format!("{}→{}", initial(&r.source), initial(&r.target))).collect();
        let mut t = Self::new(first.rows.clone(), cols);
        for (c, rep) in reports.iter().enumerate() {
            for (r, row) in rep.rows.iter().enumerate() {
                let col = t.cols[c].clone();
                t.set(row, &col, rep.mean[r], Some(rep.std[r]))?;
            }
        }
        Ok(t)
    }

    /// Percentages with two decimals, `mean±std` where a spread is known.
    pub fn render_text(&self) -> String {
        let cell = |r: usize, c: usize| match (self.mean[r][c], self.std[r][c]) {
            (Some(m), Some(s)) => format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s),
            (Some(m), None) => format!("{:.2}", 100.0 * m),
            _ => "-".to_string(),
        };
        let width = |s: &str| s.chars().count();
        let w0 = self.rows.iter().map(|r| width(r)).chain([width("Method")]).max().unwrap_or(0);
        let widths: Vec<usize> = (0..self.cols.len())
            .map(|c| (0..self.rows.len()).map(|r| width(&cell(r, c))).chain([width(&self.cols[c])]).max().unwrap_or(0))
            .collect();
        let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w - width(s)));
        let mut out = String::new();
        let mut line = pad("Method", w0);
        for (c, col) in self.cols.iter().enumerate() {
            let _ = write!(line, "  {}", pad(col, widths[c]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
        for (r, row) in self.rows.iter().enumerate() {
            let mut line = pad(row, w0);
            for (c, w) in widths.iter().enumerate() {
                let _ = write!(line, "  {}", pad(&cell(r, c), *w));
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    /// Writes `path` as JSON and the text rendering next to it with a `.txt`
    /// extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(path.with_extension("txt"), self.render_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_layout() {
        let mut t = ResultsTable::new(vec!["MLR".into(), "MLR+CFV".into()], vec!["Indoor67".into()]);
        t.set("MLR", "Indoor67", 0.8224, None).unwrap();
        let s = t.render_text();
        assert_eq!(s, "Method   Indoor67\nMLR      82.24\nMLR+CFV  -\n");
        assert!(t.set("FCR1", "Indoor67", 0.1, None).is_err());
    }

    #[test]
    fn da_columns() {
        let rep = DaReport {
            source: "webcam".into(),
            target: "dslr".into(),
            rows: vec!["MLR".into()],
            accuracy: vec![vec![1.0, 1.0]],
            mean: vec![1.0],
            std: vec![0.0],
            partitions: Vec::new(),
        };
        let t = ResultsTable::from_da(&[rep]).unwrap();
        assert_eq!(t.cols, vec!["W→D"]);
        assert!(t.render_text().contains("100.00±0.00"));
        let json: serde_json::Value = serde_json::to_value(&t).unwrap();
        for k in ["rows", "cols", "mean", "std"] {
            assert!(json.get(k).is_some());
        }
    }
}
