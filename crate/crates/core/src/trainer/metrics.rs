//! Metrics log and config echo files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// One training step's log row.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetric {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub tokens_per_sec: f64,
    pub wall_ms: f64,
}

/// Writes the metrics CSV: `step,epoch,lr,loss,tokens_per_sec,wall_ms`.
pub fn write_metrics_csv(path: &Path, metrics: &[StepMetric]) -> Result<()> {
    let mut out = String::from("step,epoch,lr,loss,tokens_per_sec,wall_ms\n");
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            m.step, m.epoch, m.lr, m.loss, m.tokens_per_sec, m.wall_ms
        )
        .expect("string writes cannot fail");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// `key = value` lines, one per resolved hyperparameter.
pub fn render_config_echo(entries: &[(String, String)]) -> String {
    let mut out = String::new();
    for (key, value) in entries {
        writeln!(out, "{key} = {value}").expect("string writes cannot fail");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_the_documented_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![StepMetric {
            step: 1,
            epoch: 0,
            lr: 0.001,
            loss: 0.75,
            tokens_per_sec: 0.0,
            wall_ms: 0.0,
        }];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,epoch,lr,loss,tokens_per_sec,wall_ms\n1,0,0.001,0.75,0,0\n");
    }
}
