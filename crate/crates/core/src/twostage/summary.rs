//! Aggregation of run summary CSVs into mean ± std tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::RunRecord;
use crate::error::{PasclError, Result};
use crate::metrics::{render_table, MetricSummary, MetricsReport};

/// Columns that identify a configuration; everything else except seed and
/// config hash is a metric.
pub const GROUP_COLUMNS: [&str; 6] = ["variant", "k", "lambda1", "lambda2", "score", "abf"];

const SHOWN: [(&str, &str); 6] = [
    ("AUROC", "auroc"),
    ("AUPR", "aupr"),
    ("FPR95", "fpr@tpr0.95"),
    ("ACC", "acc@fpr0"),
    ("head ACC", "acc_head"),
    ("tail ACC", "acc_tail"),
];

/// Seeds and metric rows collected for one configuration.
type Collected = (Vec<u64>, Vec<Vec<Option<f64>>>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryGroup {
    /// Values of [`GROUP_COLUMNS`], in order.
    pub key: Vec<String>,
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricSummary>,
}

impl SummaryGroup {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

fn parse_cell(name: &str, v: &str) -> Result<Option<f64>> {
    if v == "NA" {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|_| PasclError::Data(format!("summary csv: bad {name} value {v:?}")))
}

/// Groups the rows of several summary CSVs (as written by `train` or `ablate`)
/// by configuration. Rows repeating a `(configuration, seed)` pair are rejected.
pub fn aggregate_summary_csv(inputs: &[String]) -> Result<Vec<SummaryGroup>> {
    let expected = RunRecord::summary_csv_header();
    let expected: Vec<&str> = expected.split(',').collect();
    let metric_names = MetricsReport::metric_names();
    let mut groups: BTreeMap<Vec<String>, Collected> = BTreeMap::new();
    for (i, text) in inputs.iter().enumerate() {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| PasclError::Data(format!("summary csv {i}: {e}")))?.clone();
        if header.iter().ne(expected.iter().copied()) {
            return Err(PasclError::Data(format!("summary csv {i}: unexpected header")));
        }
        for row in reader.records() {
            let row = row.map_err(|e| PasclError::Data(format!("summary csv {i}: {e}")))?;
            let key: Vec<String> = row.iter().take(GROUP_COLUMNS.len()).map(str::to_string).collect();
            let seed: u64 = row[GROUP_COLUMNS.len() + 1]
                .parse()
                .map_err(|_| PasclError::Data(format!("summary csv {i}: bad seed")))?;
            let values = metric_names
                .iter()
                .zip(row.iter().skip(GROUP_COLUMNS.len() + 3))
                .map(|(name, v)| parse_cell(name, v))
                .collect::<Result<Vec<_>>>()?;
            let (seeds, rows) = groups.entry(key.clone()).or_default();
            if seeds.contains(&seed) {
                return Err(PasclError::Data(format!("summary csv: seed {seed} repeated for {}", key.join(","))));
            }
            seeds.push(seed);
            rows.push(values);
        }
    }
    Ok(groups
        .into_iter()
        .map(|(key, (mut seeds, rows))| {
            let metrics = metric_names
                .iter()
                .enumerate()
                .map(|(j, name)| MetricSummary::from_values(name, &rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
                .collect();
            seeds.sort_unstable();
            SummaryGroup { key, seeds, metrics }
        })
        .collect())
}

/// Human-readable table in percent.
pub fn format_summary_table(groups: &[SummaryGroup]) -> String {
    let mut header: Vec<String> = GROUP_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.push("runs".into());
    header.extend(SHOWN.iter().map(|(h, _)| h.to_string()));
    let body: Vec<Vec<String>> = groups
        .iter()
        .map(|g| {
            let mut row = g.key.clone();
            row.push(g.seeds.len().to_string());
            row.extend(SHOWN.iter().map(|(_, m)| g.metric(m).map_or("NA".into(), MetricSummary::percent)));
            row
        })
        .collect();
    render_table(&header, &body)
}

/// Raw fractions: one `mean` and one `std` column per metric.
pub fn summary_groups_csv(groups: &[SummaryGroup]) -> String {
    let names = MetricsReport::metric_names();
    let mut out = GROUP_COLUMNS.join(",");
    out.push_str(",runs");
    for n in &names {
        out.push_str(&format!(",{n}_mean,{n}_std"));
    }
    out.push('\n');
    let raw = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
    for g in groups {
        out.push_str(&g.key.join(","));
        out.push_str(&format!(",{}", g.seeds.len()));
        for m in &g.metrics {
            out.push_str(&format!(",{},{}", raw(m.mean), raw(m.std)));
        }
        out.push('\n');
    }
    out
}
