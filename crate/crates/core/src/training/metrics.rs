use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// One `(epoch, split, metric, value)` observation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} split={} metric={} value={}",
            self.epoch, self.split, self.metric, self.value
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut epoch = None;
        let mut split = None;
        let mut metric = None;
        let mut value = None;
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::data(format!("malformed metrics field `{field}`")))?;
            match k {
                "epoch" => epoch = v.parse().ok(),
                "split" => split = Some(v.to_string()),
                "metric" => metric = Some(v.to_string()),
                "value" => value = v.parse().ok(),
                _ => {}
            }
        }
        match (epoch, split, metric, value) {
            (Some(epoch), Some(split), Some(metric), Some(value)) => Ok(MetricRecord {
                epoch,
                split,
                metric,
                value,
            }),
            _ => Err(Error::data(format!("incomplete metrics line `{line}`"))),
        }
    }
}

/// Append-only metrics history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.records.push(MetricRecord {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Values of one `(split, metric)` series in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| r.to_line() + "\n").collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(MetricRecord::parse)
            .collect::<Result<_>>()?;
        Ok(MetricsLog { records })
    }

    /// Appends every record to `path`, creating it if needed.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }
}
