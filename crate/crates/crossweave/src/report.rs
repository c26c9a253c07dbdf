//! Metrics records (line-delimited JSON) and the comparison table.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One per-epoch, per-domain metrics line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub domain: u16,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub wall_time_s: f64,
}

pub fn write_jsonl(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Config(format!("serializing metrics: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EpochRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpochRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Config(format!("{}:{}: bad metrics record: {e}", path.display(), lineno + 1))
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "{}: no metrics records",
            path.display()
        )));
    }
    Ok(out)
}

/// Summary of one run's metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub domains: usize,
    pub epochs: usize,
    /// Mean final-epoch test accuracy across domains.
    pub final_accuracy: f64,
    pub total_wall_time_s: f64,
}

pub fn summarize(name: &str, records: &[EpochRecord]) -> RunSummary {
    let epochs = records.iter().map(|r| r.epoch).max().unwrap_or(0);
    let mut domains: Vec<u16> = records.iter().map(|r| r.domain).collect();
    domains.sort_unstable();
    domains.dedup();
    let finals: Vec<f64> = records
        .iter()
        .filter(|r| r.epoch == epochs)
        .map(|r| r.test_accuracy)
        .collect();
    let final_accuracy = finals.iter().sum::<f64>() / finals.len().max(1) as f64;
    RunSummary {
        name: name.to_string(),
        domains: domains.len(),
        epochs,
        final_accuracy,
        total_wall_time_s: records.iter().map(|r| r.wall_time_s).sum(),
    }
}

/// Render the solo-vs-collaborative comparison table.
pub fn render_table(summaries: &[RunSummary]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>7} {:>7} {:>10} {:>12}\n",
        "run", "domains", "epochs", "accuracy", "time (s)"
    ));
    for s in summaries {
        out.push_str(&format!(
            "{:<24} {:>7} {:>7} {:>9.1}% {:>12.1}\n",
            s.name,
            s.domains,
            s.epochs,
            s.final_accuracy * 100.0,
            s.total_wall_time_s
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, domain: u16, acc: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            domain,
            train_loss: 1.0 / epoch as f64,
            test_accuracy: acc,
            wall_time_s: 0.25,
        }
    }

    #[test]
    fn jsonl_round_trip_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records = vec![rec(1, 1, 0.5), rec(1, 2, 0.6), rec(2, 1, 0.7), rec(2, 2, 0.8)];
        write_jsonl(&path, &records).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn empty_or_malformed_files_are_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_jsonl(&path).is_err());
        std::fs::write(&path, "{\"epoch\": 1}\n").unwrap();
        match read_jsonl(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains(":1:"), "{msg}"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn summary_and_table() {
        let records = vec![rec(1, 1, 0.5), rec(2, 1, 0.7), rec(1, 2, 0.6), rec(2, 2, 0.9)];
        let s = summarize("collab", &records);
        assert_eq!(s.domains, 2);
        assert_eq!(s.epochs, 2);
        assert!((s.final_accuracy - 0.8).abs() < 1e-12);
        let solo = summarize("solo", &[rec(1, 1, 0.5), rec(2, 1, 0.55)]);
        let table = render_table(&[solo, s]);
        assert_eq!(table.lines().count(), 3);
        assert!(table.contains("collab"));
        assert!(table.contains("80.0%"));
    }
}
