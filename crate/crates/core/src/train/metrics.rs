//! Append-only JSON-lines metrics.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpectraError};

/// One optimizer step. Loss components are batch means over the samples
/// they apply to; `None` means no sample in the batch had that term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub tpp: Option<f64>,
    pub crs: Option<f64>,
    pub cmlm: Option<f64>,
    pub cmam: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
}

impl StepMetrics {
    /// The record without its wall time, for reproducibility comparisons.
    pub fn without_time(&self) -> StepMetrics {
        StepMetrics {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last_step: Option<usize>,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let last_step = if path.exists() { read_metrics(path)?.last().map(|m| m.step) } else { None };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(SpectraError::io(path))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            last_step,
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        if self.last_step.is_some_and(|s| m.step <= s) {
            return Err(SpectraError::Invalid(format!(
                "{}: step {} does not follow logged step {}",
                self.path.display(),
                m.step,
                self.last_step.unwrap_or_default()
            )));
        }
        let line = serde_json::to_string(m).map_err(SpectraError::json(&self.path))?;
        writeln!(self.out, "{line}").map_err(SpectraError::io(&self.path))?;
        self.out.flush().map_err(SpectraError::io(&self.path))?;
        self.last_step = Some(m.step);
        Ok(())
    }
}

/// Drops logged steps after `step`, e.g. before resuming from a checkpoint
/// written earlier than the last log line. A missing file is left alone.
pub fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<StepMetrics> = read_metrics(path)?.into_iter().filter(|m| m.step <= step).collect();
    let mut out = String::new();
    for m in &kept {
        out.push_str(&serde_json::to_string(m).map_err(SpectraError::json(path))?);
        out.push('\n');
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out).map_err(SpectraError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(SpectraError::io(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(SpectraError::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(SpectraError::json(path)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(step: usize) -> StepMetrics {
        StepMetrics {
            step,
            loss: step as f64,
            tpp: None,
            crs: Some(0.5),
            cmlm: None,
            cmam: None,
            lr: 1e-3,
            grad_norm: 1.0,
            wall_time: 0.1,
        }
    }

    #[test]
    fn steps_must_increase() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::append(&path).unwrap();
        w.write(&m(1)).unwrap();
        w.write(&m(2)).unwrap();
        assert!(w.write(&m(2)).is_err());
        drop(w);
        let mut w = MetricsWriter::append(&path).unwrap();
        assert!(w.write(&m(1)).is_err());
        w.write(&m(3)).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), vec![m(1), m(2), m(3)]);
    }

    #[test]
    fn truncation_keeps_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::append(&path).unwrap();
        for s in 1..=5 {
            w.write(&m(s)).unwrap();
        }
        drop(w);
        truncate_metrics(&path, 3).unwrap();
        assert_eq!(read_metrics(&path).unwrap().len(), 3);
        MetricsWriter::append(&path).unwrap().write(&m(4)).unwrap();
        truncate_metrics(&dir.path().join("absent.jsonl"), 1).unwrap();
    }
}
