use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FileDigest, HarnessError, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServedBy {
    Origin,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    /// Position in the scenario's request script.
    pub index: usize,
    pub file: String,
    pub client: String,
    pub served_by: ServedBy,
    /// Cache host that answered, when served by a cache.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<String>,
    pub bytes: u64,
    pub sha256: String,
    /// Virtual time, milliseconds since scenario start.
    pub start_ms: f64,
    pub end_ms: f64,
    /// Sum of link latencies along every leg of the exchange.
    pub simulated_latency_ms: f64,
    /// Wall-clock time spent in proxy, controller and cache logic.
    pub processing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub requests: usize,
    pub hits: usize,
    pub misses: usize,
    pub hit_ratio: f64,
    pub mean_hit_latency_ms: Option<f64>,
    pub mean_miss_latency_ms: Option<f64>,
    pub mean_processing_ms: f64,
    pub origin_requests: BTreeMap<String, u64>,
}

impl Aggregates {
    pub fn from_records(records: &[RequestRecord], origin_requests: BTreeMap<String, u64>) -> Self {
        let mean =
            |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let latencies = |by: ServedBy| {
            records
                .iter()
                .filter(|r| r.served_by == by)
                .map(|r| r.simulated_latency_ms)
                .collect::<Vec<_>>()
        };
        let hits = records
            .iter()
            .filter(|r| r.served_by == ServedBy::Cache)
            .count();
        Aggregates {
            requests: records.len(),
            hits,
            misses: records.len() - hits,
            hit_ratio: if records.is_empty() {
                0.0
            } else {
                hits as f64 / records.len() as f64
            },
            mean_hit_latency_ms: mean(latencies(ServedBy::Cache)),
            mean_miss_latency_ms: mean(latencies(ServedBy::Origin)),
            mean_processing_ms: mean(records.iter().map(|r| r.processing_ms).collect())
                .unwrap_or(0.0),
            origin_requests,
        }
    }
}

/// Settings that shaped the run, echoed for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub scenario: String,
    pub seed: u64,
    pub controller_available: bool,
    pub proxy: String,
    pub caches: Vec<String>,
    pub origin: String,
    pub config: ScenarioConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ConfigEcho,
    pub files: Vec<FileDigest>,
    pub records: Vec<RequestRecord>,
    pub aggregates: Aggregates,
    /// SHA-256 over every fabric delivery trace of the run, in order.
    pub trace_digest: String,
    pub packets_injected: u64,
}

impl Report {
    /// The report with wall-clock measurements zeroed, for comparing runs.
    pub fn without_wall_clock(&self) -> Report {
        let mut r = self.clone();
        for rec in &mut r.records {
            rec.processing_ms = 0.0;
        }
        r.aggregates.mean_processing_ms = 0.0;
        r
    }
}

pub const CSV_HEADER: [&str; 11] = [
    "index",
    "file",
    "client",
    "served_by",
    "cache",
    "bytes",
    "sha256",
    "start_ms",
    "end_ms",
    "simulated_latency_ms",
    "processing_ms",
];

/// Writes `report.json` and, with `csv`, `requests.csv` into `out_dir`.
pub fn emit_report(
    report: &Report,
    out_dir: &Path,
    csv: bool,
) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(out_dir)?;
    let json_path = out_dir.join("report.json");
    let json = serde_json::to_vec_pretty(report).map_err(std::io::Error::other)?;
    fs::write(&json_path, json)?;
    let mut written = vec![json_path];
    if csv {
        let csv_path = out_dir.join("requests.csv");
        let mut w = ::csv::Writer::from_path(&csv_path).map_err(std::io::Error::other)?;
        w.write_record(CSV_HEADER).map_err(std::io::Error::other)?;
        for r in &report.records {
            let served_by = match r.served_by {
                ServedBy::Origin => "origin",
                ServedBy::Cache => "cache",
            };
            w.write_record([
                r.index.to_string(),
                r.file.clone(),
                r.client.clone(),
                served_by.to_string(),
                r.cache.clone().unwrap_or_default(),
                r.bytes.to_string(),
                r.sha256.clone(),
                format!("{:.3}", r.start_ms),
                format!("{:.3}", r.end_ms),
                format!("{:.3}", r.simulated_latency_ms),
                format!("{:.3}", r.processing_ms),
            ])
            .map_err(std::io::Error::other)?;
        }
        w.flush()?;
        written.push(csv_path);
    }
    Ok(written)
}
