use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::mean_ci;
use super::ExperimentConfig;
use crate::{Error, Result};

pub const REPORT_CSV: &str = "report.csv";
pub const METRICS_JSON: &str = "metrics.json";
const FORMAT: &str = "overmod-metrics v1";

/// One long-format measurement. `condition` is `<environment>:<scope>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment: u8,
    pub seed: u64,
    pub speaker: String,
    pub condition: String,
    pub metric: String,
    /// `None` marks an absent cell (no data), never zero.
    pub value: Option<f64>,
    pub denominator: usize,
}

/// Across-seed summary of one `(speaker, condition, metric)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub speaker: String,
    pub condition: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: Option<f64>,
    /// 95% half-width; present only with two or more seeds.
    pub ci95: Option<f64>,
}

/// A stage that failed; its rows are missing from the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub environment: String,
    pub seed: u64,
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub config: ExperimentConfig,
    pub rows: Vec<Row>,
    pub aggregates: Vec<Aggregate>,
    pub failures: Vec<Failure>,
    /// False when any stage failed.
    pub complete: bool,
}

impl MetricsReport {
    pub fn new(config: ExperimentConfig, rows: Vec<Row>, failures: Vec<Failure>) -> Self {
        let aggregates = aggregate(&rows);
        Self {
            format: FORMAT.into(),
            config,
            rows,
            aggregates,
            complete: failures.is_empty(),
            failures,
        }
    }

    pub fn find(&self, speaker: &str, condition: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.speaker == speaker && a.condition == condition && a.metric == metric)
    }

    /// Seed mean of one series, if present.
    pub fn mean(&self, speaker: &str, condition: &str, metric: &str) -> Option<f64> {
        self.find(speaker, condition, metric)?.mean
    }

    pub fn rows_for<'a>(&'a self, metric: &'a str) -> impl Iterator<Item = &'a Row> + 'a {
        self.rows.iter().filter(move |r| r.metric == metric)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Config(format!("report csv: {e}"));
        w.write_record(["experiment", "seed", "speaker", "condition", "metric", "value", "denominator"])
            .map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.experiment.to_string(),
                r.seed.to_string(),
                r.speaker.clone(),
                r.condition.clone(),
                r.metric.clone(),
                r.value.map_or_else(|| "NA".to_string(), |v| v.to_string()),
                r.denominator.to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("report csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(format!("metrics json: {e}")))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(METRICS_JSON);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let report: Self = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        if report.format != FORMAT {
            return Err(Error::format(&path, format!("unsupported format `{}`", report.format)));
        }
        Ok(report)
    }

    /// Writes `report.csv` and `metrics.json` atomically.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [(REPORT_CSV, self.to_csv()?), (METRICS_JSON, self.to_json()? + "\n")] {
            let path = dir.join(name);
            crate::util::write_atomic(&path, text.as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Groups rows by `(speaker, condition, metric)` in first-appearance order.
pub fn aggregate(rows: &[Row]) -> Vec<Aggregate> {
    let mut out: Vec<Aggregate> = Vec::new();
    for r in rows {
        let idx = match out
            .iter()
            .position(|a| a.speaker == r.speaker && a.condition == r.condition && a.metric == r.metric)
        {
            Some(i) => i,
            None => {
                out.push(Aggregate {
                    speaker: r.speaker.clone(),
                    condition: r.condition.clone(),
                    metric: r.metric.clone(),
                    seeds: Vec::new(),
                    values: Vec::new(),
                    mean: None,
                    ci95: None,
                });
                out.len() - 1
            }
        };
        if let Some(v) = r.value {
            out[idx].seeds.push(r.seed);
            out[idx].values.push(v);
        }
    }
    for a in &mut out {
        (a.mean, a.ci95) = mean_ci(&a.values);
    }
    out
}
