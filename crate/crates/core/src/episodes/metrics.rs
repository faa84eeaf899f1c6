//! PCK, normalized error, harmonic mean, and the long-format metrics log.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

pub const PCK_TAU: f64 = 0.1;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Whether `pred` lies within `tau * max(w, h)` of `gt` for a box of size
/// `(w, h)`.
pub fn pck(pred: [f64; 2], gt: [f64; 2], box_size: (f64, f64), tau: f64) -> bool {
    dist(pred, gt) <= tau * box_size.0.max(box_size.1)
}

/// Percentage of correct flags; 0 for an empty set.
pub fn pck_score(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    100.0 * flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

/// Distance normalized by the longer image side.
pub fn ne(pred: [f64; 2], gt: [f64; 2], image: (f64, f64)) -> f64 {
    dist(pred, gt) / image.0.max(image.1)
}

pub fn harmonic(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

pub const METRICS_HEADER: &str = "run_id,subcommand,variant,seed,step,key,value";

/// Append-only long-format metrics CSV shared by every subcommand.
pub struct MetricsLog {
    out: Option<BufWriter<std::fs::File>>,
    pub run_id: String,
    pub subcommand: String,
    pub rows: Vec<MetricRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub variant: String,
    pub seed: u64,
    pub step: u64,
    pub key: String,
    pub value: f64,
}

impl MetricsLog {
    /// In-memory log.
    pub fn memory(run_id: &str, subcommand: &str) -> Self {
        Self {
            out: None,
            run_id: run_id.into(),
            subcommand: subcommand.into(),
            rows: Vec::new(),
        }
    }

    /// Appends to `path`, writing the header if the file is new.
    pub fn append(path: &Path, run_id: &str, subcommand: &str) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut out = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
        if fresh {
            writeln!(out, "{METRICS_HEADER}")?;
        }
        Ok(Self {
            out: Some(out),
            ..Self::memory(run_id, subcommand)
        })
    }

    pub fn log(&mut self, variant: &str, seed: u64, step: u64, key: &str, value: f64) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            writeln!(out, "{},{},{variant},{seed},{step},{key},{value}", self.run_id, self.subcommand)?;
        }
        self.rows.push(MetricRow {
            variant: variant.into(),
            seed,
            step,
            key: key.into(),
            value,
        });
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            out.flush()?;
        }
        Ok(())
    }

    pub fn values(&self, key: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.key == key).map(|r| r.value).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pck_examples() {
        assert!(pck([3.0, 4.0], [3.0, 4.0], (60.0, 40.0), PCK_TAU));
        assert!(pck([5.9, 0.0], [0.0, 0.0], (60.0, 40.0), PCK_TAU));
        assert!(!pck([6.1, 0.0], [0.0, 0.0], (60.0, 40.0), PCK_TAU));
        assert_eq!(pck_score(&[true; 5]), 100.0);
        assert_eq!(pck_score(&[true, false, false, true]), 50.0);
    }

    #[test]
    fn ne_and_harmonic_examples() {
        assert!((ne([38.4, 0.0], [0.0, 0.0], (384.0, 200.0)) - 0.1).abs() < 1e-15);
        assert_eq!(harmonic(42.0, 42.0), 42.0);
        assert!((harmonic(50.0, 70.0) - 58.33).abs() < 0.01);
        assert_eq!(harmonic(0.0, 0.0), 0.0);
    }

    #[test]
    fn log_appends_schema_stable_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        {
            let mut a = MetricsLog::append(&path, "r1", "train").unwrap();
            a.log("full", 0, 10, "loss", 1.5).unwrap();
            a.flush().unwrap();
        }
        {
            let mut b = MetricsLog::append(&path, "r1", "eval").unwrap();
            b.log("full", 0, 0, "pck", 80.0).unwrap();
            b.flush().unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec![METRICS_HEADER, "r1,train,full,0,10,loss,1.5", "r1,eval,full,0,0,pck,80"]);
    }
}
