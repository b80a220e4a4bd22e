//! Training metrics log: CSV with `step,loss,accuracy` rows.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use shapelab_core::train::MetricsRow;

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("create {path:?}"))?);
    writeln!(w, "step,loss,accuracy")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.step, r.loss, r.accuracy)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![
            MetricsRow {
                step: 25,
                loss: 1.5,
                accuracy: 0.5,
                eval_loss: 1.2,
            },
            MetricsRow {
                step: 50,
                loss: 0.75,
                accuracy: 0.875,
                eval_loss: 0.9,
            },
        ];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,loss,accuracy\n25,1.5,0.5\n50,0.75,0.875\n");
    }
}
