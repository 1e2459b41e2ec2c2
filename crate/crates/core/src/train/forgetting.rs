use std::fmt::Write as _;

use super::trainer::evaluate;
use super::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::volume::Dataset;

/// Mean Dice of every checkpoint (rows) on every domain test set (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct ForgettingMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl ForgettingMatrix {
    /// `reports[i][j]` is checkpoint `i` evaluated on domain `j`.
    pub fn from_reports(rows: Vec<String>, reports: &[Vec<MetricsReport>]) -> Result<Self> {
        if reports.len() != rows.len() || reports.is_empty() {
            return Err(Error::Invalid("one report row per checkpoint required".into()));
        }
        let columns: Vec<String> = reports[0].iter().map(|r| r.domain_tag.clone()).collect();
        let mut cells = Vec::with_capacity(rows.len());
        for row in reports {
            if row.len() != columns.len() || row.iter().zip(&columns).any(|(r, c)| &r.domain_tag != c) {
                return Err(Error::Invalid("report rows cover different domains".into()));
            }
            cells.push(row.iter().map(MetricsReport::mean_dice).collect());
        }
        Ok(Self { rows, columns, cells })
    }

    pub fn row_average(&self, i: usize) -> f64 {
        let r = &self.cells[i];
        r.iter().sum::<f64>() / r.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model");
        for c in &self.columns {
            let _ = write!(s, ",{c}");
        }
        s.push_str(",average\n");
        for (i, name) in self.rows.iter().enumerate() {
            s.push_str(name);
            for v in &self.cells[i] {
                let _ = write!(s, ",{v:.6}");
            }
            let _ = writeln!(s, ",{:.6}", self.row_average(i));
        }
        s
    }

    /// Bar-chart table grouped by evaluation domain, one bar per model.
    pub fn to_bar_data(&self) -> String {
        let mut s = String::from("domain,model,dice\n");
        for (j, c) in self.columns.iter().enumerate() {
            for (i, r) in self.rows.iter().enumerate() {
                let _ = writeln!(s, "{c},{r},{:.6}", self.cells[i][j]);
            }
        }
        s
    }
}

pub fn forgetting_report(ckpts: &[(String, &Checkpoint)], domains: &[Dataset]) -> Result<ForgettingMatrix> {
    let mut reports = Vec::with_capacity(ckpts.len());
    for (_, c) in ckpts {
        reports.push(domains.iter().map(|d| evaluate(c, d)).collect::<Result<Vec<_>>>()?);
    }
    ForgettingMatrix::from_reports(ckpts.iter().map(|c| c.0.clone()).collect(), &reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::VolumeMetrics;

    fn rep(tag: &str, dice: &[f64]) -> MetricsReport {
        MetricsReport {
            domain_tag: tag.into(),
            note: String::new(),
            per_volume: dice
                .iter()
                .enumerate()
                .map(|(i, &d)| VolumeMetrics { id: i.to_string(), dice: d, hd95_mm: None, sensitivity: None })
                .collect(),
        }
    }

    #[test]
    fn matrix_layout() {
        let m = ForgettingMatrix::from_reports(
            vec!["M_s".into(), "M_t1".into()],
            &[
                vec![rep("A", &[0.9, 0.8]), rep("C", &[0.2])],
                vec![rep("A", &[0.85]), rep("C", &[0.8, 0.7])],
            ],
        )
        .unwrap();
        assert!((m.cells[0][0] - 0.85).abs() < 1e-12);
        assert!((m.row_average(1) - (0.85 + 0.75) / 2.0).abs() < 1e-12);
        let csv = m.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "model,A,C,average");
        let bars = m.to_bar_data();
        assert_eq!(bars.lines().nth(2).unwrap(), "A,M_t1,0.850000");
        assert!(ForgettingMatrix::from_reports(vec!["x".into()], &[vec![rep("A", &[1.0])], vec![]]).is_err());
    }
}
