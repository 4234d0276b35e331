use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{PasclError, Result};

/// TPR operating points for `FPR@TPRn` and `ACC@TPRn`.
pub const TPR_LEVELS: [f64; 4] = [0.98, 0.95, 0.90, 0.80];
/// FPR operating points for `ACC@FPRn`.
pub const FPR_LEVELS: [f64; 4] = [0.0, 0.001, 0.01, 0.1];

const TPR_LABELS: [&str; 4] = ["0.98", "0.95", "0.90", "0.80"];
const FPR_LABELS: [&str; 4] = ["0", "0.001", "0.01", "0.1"];

/// A measure at one operating point; `None` marks an empty denominator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelValue {
    pub level: f64,
    pub value: Option<f64>,
}

/// Every detection and classification measure of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr_at_tpr: Vec<LevelValue>,
    pub acc_at_tpr: Vec<LevelValue>,
    pub acc_at_fpr: Vec<LevelValue>,
    pub acc_head: Option<f64>,
    pub acc_tail: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct VersionedReport {
    format_version: u32,
    #[serde(flatten)]
    report: MetricsReport,
}

impl MetricsReport {
    /// Bumped whenever a column or JSON field changes.
    pub const FORMAT_VERSION: u32 = 1;

    /// Metric column names in their fixed CSV order.
    pub fn metric_names() -> Vec<String> {
        let mut names = vec!["auroc".to_string(), "aupr".to_string()];
        names.extend(TPR_LABELS.iter().map(|l| format!("fpr@tpr{l}")));
        names.extend(TPR_LABELS.iter().map(|l| format!("acc@tpr{l}")));
        names.extend(FPR_LABELS.iter().map(|l| format!("acc@fpr{l}")));
        names.push("acc_head".into());
        names.push("acc_tail".into());
        names
    }

    /// Metric values aligned with [`MetricsReport::metric_names`].
    pub fn metric_values(&self) -> Vec<Option<f64>> {
        let mut v = vec![Some(self.auroc), Some(self.aupr)];
        v.extend(self.fpr_at_tpr.iter().map(|l| l.value));
        v.extend(self.acc_at_tpr.iter().map(|l| l.value));
        v.extend(self.acc_at_fpr.iter().map(|l| l.value));
        v.push(self.acc_head);
        v.push(self.acc_tail);
        v
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["report_version".to_string(), "seed".into(), "config_hash".into()];
        cols.extend(Self::metric_names());
        cols.join(",")
    }

    /// One row matching [`MetricsReport::csv_header`]; undefined values are `NA`.
    pub fn to_csv_row(&self) -> String {
        let mut cols = vec![
            Self::FORMAT_VERSION.to_string(),
            self.seed.to_string(),
            self.config_hash.clone(),
        ];
        cols.extend(self.metric_values().into_iter().map(format_raw));
        cols.join(",")
    }

    pub fn to_json(&self) -> String {
        let v = VersionedReport { format_version: Self::FORMAT_VERSION, report: self.clone() };
        serde_json::to_string_pretty(&v).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: VersionedReport =
            serde_json::from_str(text).map_err(|e| PasclError::Data(format!("report JSON: {e}")))?;
        if v.format_version != Self::FORMAT_VERSION {
            return Err(PasclError::Data(format!(
                "report format version {} is not supported",
                v.format_version
            )));
        }
        Ok(v.report)
    }

    pub fn fpr95(&self) -> f64 {
        self.fpr_at_tpr[1].value.expect("FPR is always defined")
    }

    pub fn acc95(&self) -> Option<f64> {
        self.acc_at_tpr[1].value
    }

    /// Plain in-distribution accuracy (`ACC@FPR0`).
    pub fn accuracy(&self) -> Option<f64> {
        self.acc_at_fpr[0].value
    }
}

/// Full-precision rendering used in files; `NA` for undefined values.
pub fn format_raw(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "NA".into(),
    }
}

fn percent(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}", 100.0 * x),
        None => "NA".into(),
    }
}

/// Human-readable table in percent with two decimals.
pub fn format_percent_table(rows: &[(String, &MetricsReport)]) -> String {
    let mut header = vec!["run".to_string(), "AUROC".into(), "AUPR".into()];
    header.extend(TPR_LABELS.iter().map(|l| format!("FPR@{l}")));
    header.push("ACC95".into());
    header.extend(FPR_LABELS.iter().map(|l| format!("ACC@FPR{l}")));
    header.push("head".into());
    header.push("tail".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, r)| {
            let mut cells = vec![label.clone(), percent(Some(r.auroc)), percent(Some(r.aupr))];
            cells.extend(r.fpr_at_tpr.iter().map(|l| percent(l.value)));
            cells.push(percent(r.acc95()));
            cells.extend(r.acc_at_fpr.iter().map(|l| percent(l.value)));
            cells.push(percent(r.acc_head));
            cells.push(percent(r.acc_tail));
            cells
        })
        .collect();
    render_table(&header, &body)
}

pub(crate) fn render_table(header: &[String], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header, &mut out);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&rule, &mut out);
    for row in body {
        line(row, &mut out);
    }
    out
}

/// Mean and sample standard deviation of one metric over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Runs where the metric was defined.
    pub n: usize,
}

impl MetricSummary {
    pub fn from_values(name: &str, values: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let n = defined.len();
        if n == 0 {
            return Self { name: name.into(), mean: None, std: None, n };
        }
        let mean = defined.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { name: name.into(), mean: Some(mean), std: Some(std), n }
    }

    /// `mean ± std` in percent.
    pub fn percent(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
            _ => "NA".into(),
        }
    }
}

/// Per-metric mean and standard deviation over a set of reports.
pub fn aggregate(reports: &[MetricsReport]) -> Vec<MetricSummary> {
    let values: Vec<Vec<Option<f64>>> = reports.iter().map(MetricsReport::metric_values).collect();
    MetricsReport::metric_names()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let column: Vec<Option<f64>> = values.iter().map(|row| row[i]).collect();
            MetricSummary::from_values(name, &column)
        })
        .collect()
}
