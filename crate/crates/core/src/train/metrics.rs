//! CSV sink with one row per parameter update.

use std::fs::{File, OpenOptions};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Stage;
use crate::error::Result;

/// Column order of the metrics file.
pub const METRICS_COLUMNS: [&str; 11] = [
    "stage",
    "epoch",
    "update",
    "loss",
    "mean_return",
    "return_std",
    "mean_ratio",
    "clip_fraction",
    "success_rate",
    "lr",
    "wall_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stage: Stage,
    pub epoch: usize,
    pub update: usize,
    pub loss: f64,
    pub mean_return: f64,
    pub return_std: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    /// Rolling success rate; empty for offline rows.
    pub success_rate: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRow> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Writes rows to a CSV file, adding the header when the file is new.
pub struct CsvSink {
    writer: csv::Writer<File>,
}

impl CsvSink {
    /// Starts a new file, replacing any previous contents.
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { writer: csv::Writer::from_writer(File::create(path)?) })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { writer })
    }
}

impl MetricsSink for CsvSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Metrics file contents without the wall-clock column, for comparisons.
pub fn strip_wall_clock(path: &Path) -> Result<Vec<String>> {
    let file = std::io::BufReader::new(File::open(path)?);
    file.lines()
        .map(|l| Ok(l?.rsplit_once(',').map_or_else(String::new, |(head, _)| head.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(update: usize, success: Option<f64>) -> MetricsRow {
        MetricsRow {
            stage: Stage::Online,
            epoch: 0,
            update,
            loss: -0.25,
            mean_return: 1.5,
            return_std: 0.0,
            mean_ratio: 1.0,
            clip_fraction: 0.0,
            success_rate: success,
            lr: 1e-3,
            wall_ms: 12,
        }
    }

    #[test]
    fn csv_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        CsvSink::append(&path).unwrap().record(&row(0, Some(0.5))).unwrap();
        CsvSink::append(&path).unwrap().record(&row(1, None)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_COLUMNS.join(","));
        assert_eq!(text.lines().count(), 3);
        assert_eq!(read_metrics(&path).unwrap(), vec![row(0, Some(0.5)), row(1, None)]);
        let stripped = strip_wall_clock(&path).unwrap();
        assert_eq!(stripped[1], "online,0,0,-0.25,1.5,0.0,1.0,0.0,0.5,0.001");
    }
}
