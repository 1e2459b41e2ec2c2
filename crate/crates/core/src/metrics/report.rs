use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metric triple for one volume. `hd95_mm` is `None` when the prediction
/// (or reference) is empty and no surface distance exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub id: String,
    pub dice: f64,
    pub hd95_mm: Option<f64>,
    pub sensitivity: Option<f64>,
}

/// Mean and population standard deviation over the defined values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        Self { mean, std, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub domain_tag: String,
    pub per_volume: Vec<VolumeMetrics>,
    /// Free-text provenance written into the CSV header.
    pub note: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "no-prediction".to_string(),
    }
}

fn fmt_summary(s: Summary) -> String {
    if s.n == 0 {
        "nan".into()
    } else {
        format!("{:.6}", s.mean)
    }
}

impl MetricsReport {
    pub fn dice(&self) -> Summary {
        Summary::of(self.per_volume.iter().map(|r| r.dice))
    }

    pub fn hd95(&self) -> Summary {
        Summary::of(self.per_volume.iter().filter_map(|r| r.hd95_mm))
    }

    pub fn sensitivity(&self) -> Summary {
        Summary::of(self.per_volume.iter().filter_map(|r| r.sensitivity))
    }

    pub fn mean_dice(&self) -> f64 {
        self.dice().mean
    }

    /// One row per volume followed by `mean` and `std` footer rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# domain: {}", self.domain_tag);
        if !self.note.is_empty() {
            let _ = writeln!(s, "# {}", self.note);
        }
        let _ = writeln!(s, "id,dice,hd95_mm,sensitivity");
        for r in &self.per_volume {
            let _ = writeln!(s, "{},{:.6},{},{}", r.id, r.dice, fmt_opt(r.hd95_mm), fmt_opt(r.sensitivity));
        }
        let (d, h, se) = (self.dice(), self.hd95(), self.sensitivity());
        let _ = writeln!(s, "mean,{},{},{}", fmt_summary(d), fmt_summary(h), fmt_summary(se));
        let std = |x: Summary| if x.n == 0 { "nan".to_string() } else { format!("{:.6}", x.std) };
        let _ = writeln!(s, "std,{},{},{}", std(d), std(h), std(se));
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let r = MetricsReport {
            domain_tag: "A".into(),
            note: "network resolution".into(),
            per_volume: vec![
                VolumeMetrics { id: "a".into(), dice: 0.8, hd95_mm: Some(2.0), sensitivity: Some(0.9) },
                VolumeMetrics { id: "b".into(), dice: 0.0, hd95_mm: None, sensitivity: Some(0.0) },
            ],
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[2], "id,dice,hd95_mm,sensitivity");
        assert_eq!(lines[4], "b,0.000000,no-prediction,0.000000");
        assert_eq!(lines[5], "mean,0.400000,2.000000,0.450000");
        assert_eq!(r.hd95().n, 1);
    }
}
