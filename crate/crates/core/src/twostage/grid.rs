use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_experiment, ExperimentConfig, RunRecord};
use crate::error::{PasclError, Result};
use crate::metrics::{aggregate, render_table, MetricSummary, MetricsReport};
use crate::objectives::{ContrastVariant, ScoreFn};

/// Axes of an ablation grid. Every combination runs once per seed; with
/// `include_oe` an extra `lambda2 = 0` cell runs per `(k, seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxes {
    pub variants: Vec<ContrastVariant>,
    pub ks: Vec<f64>,
    pub lambda2s: Vec<f64>,
    pub seeds: Vec<u64>,
    pub include_oe: bool,
}

impl GridAxes {
    /// All five variants and the OE baseline at the base config's `k` and `lambda2`.
    pub fn component_study(base: &ExperimentConfig, seeds: Vec<u64>) -> Self {
        Self {
            variants: ContrastVariant::ALL.to_vec(),
            ks: vec![base.data.tail_fraction],
            lambda2s: vec![base.train.weights.lambda2],
            seeds,
            include_oe: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.seeds.is_empty() {
            return Err(PasclError::Config("grid: k and seed axes must be non-empty".into()));
        }
        if (self.variants.is_empty() || self.lambda2s.is_empty()) && !self.include_oe {
            return Err(PasclError::Config("grid: no cells to run".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<CellKey> {
        let mut cells = Vec::new();
        for &k in &self.ks {
            for &seed in &self.seeds {
                if self.include_oe {
                    cells.push(CellKey { variant: None, k, lambda2: 0.0, seed });
                }
                for &variant in &self.variants {
                    for &lambda2 in &self.lambda2s {
                        cells.push(CellKey { variant: Some(variant), k, lambda2, seed });
                    }
                }
            }
        }
        cells.sort_by(CellKey::order);
        cells.dedup();
        cells
    }
}

/// One grid cell; `variant = None` is the OE baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub variant: Option<ContrastVariant>,
    pub k: f64,
    pub lambda2: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn method(&self) -> String {
        self.variant.map_or_else(|| "oe".to_string(), |v| v.as_str().to_string())
    }

    fn order(a: &CellKey, b: &CellKey) -> Ordering {
        a.variant
            .cmp(&b.variant)
            .then(a.k.total_cmp(&b.k))
            .then(a.lambda2.total_cmp(&b.lambda2))
            .then(a.seed.cmp(&b.seed))
    }

    pub fn config(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.data.tail_fraction = self.k;
        cfg.data.seed = self.seed;
        cfg.train.seed = self.seed;
        cfg.train.weights.lambda2 = self.lambda2;
        if let Some(v) = self.variant {
            cfg.train.variant = v;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub key: CellKey,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

/// Mean and standard deviation of every metric over the seeds of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub method: String,
    pub k: f64,
    pub lambda2: f64,
    pub abf: bool,
    pub runs: usize,
    pub failed: usize,
    pub metrics: Vec<MetricSummary>,
}

impl GroupSummary {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

/// Row labels of the component study, in order.
pub const COMPONENT_ROWS: [&str; 6] = ["OE", "SCL", "Partial only", "Asymmetric only", "PASCL", "PASCL + ABF"];

const TABLE_METRICS: [(&str, &str); 6] = [
    ("AUROC", "auroc"),
    ("AUPR", "aupr"),
    ("FPR95", "fpr@tpr0.95"),
    ("ACC", "acc@fpr0"),
    ("head ACC", "acc_head"),
    ("tail ACC", "acc_tail"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// Sorted by cell key.
    pub cells: Vec<CellOutcome>,
}

impl GridResult {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.record.is_none()).count()
    }

    /// Groups cells over seeds, once without and once with ABF.
    pub fn summaries(&self, score_fn: ScoreFn) -> Vec<GroupSummary> {
        let mut out: Vec<GroupSummary> = Vec::new();
        let mut i = 0;
        while i < self.cells.len() {
            let head = self.cells[i].key;
            let mut j = i;
            while j < self.cells.len() && {
                let k = self.cells[j].key;
                k.variant == head.variant && k.k == head.k && k.lambda2 == head.lambda2
            } {
                j += 1;
            }
            let group = &self.cells[i..j];
            let failed = group.iter().filter(|c| c.record.is_none()).count();
            for abf in [false, true] {
                let reports: Vec<MetricsReport> = group
                    .iter()
                    .filter_map(|c| c.record.as_ref())
                    .filter_map(|r| r.evaluation(score_fn, abf).cloned())
                    .collect();
                if reports.is_empty() && (abf || failed == 0) {
                    continue;
                }
                out.push(GroupSummary {
                    method: head.method(),
                    k: head.k,
                    lambda2: head.lambda2,
                    abf,
                    runs: reports.len(),
                    failed,
                    metrics: aggregate(&reports),
                });
            }
            i = j;
        }
        out
    }

    /// Every group as `mean ± std` in percent.
    pub fn format_grid_table(&self, score_fn: ScoreFn) -> String {
        let mut header: Vec<String> = ["method", "k", "lambda2", "ABF", "runs"].map(String::from).to_vec();
        header.extend(TABLE_METRICS.iter().map(|(h, _)| h.to_string()));
        let body: Vec<Vec<String>> = self
            .summaries(score_fn)
            .iter()
            .map(|g| {
                let mut row = vec![
                    g.method.clone(),
                    g.k.to_string(),
                    g.lambda2.to_string(),
                    if g.abf { "on" } else { "off" }.to_string(),
                    if g.failed > 0 { format!("{} ({} failed)", g.runs, g.failed) } else { g.runs.to_string() },
                ];
                row.extend(TABLE_METRICS.iter().map(|(_, m)| g.metric(m).map_or("NA".into(), |s| s.percent())));
                row
            })
            .collect();
        render_table(&header, &body)
    }

    /// The six component-study rows at one `(k, lambda2)`; missing groups are `None`.
    pub fn component_table(&self, score_fn: ScoreFn, k: f64, lambda2: f64) -> Vec<(&'static str, Option<GroupSummary>)> {
        let summaries = self.summaries(score_fn);
        let find = |method: &str, abf: bool, l2: f64| {
            summaries.iter().find(|g| g.method == method && g.abf == abf && g.k == k && g.lambda2 == l2).cloned()
        };
        vec![
            (COMPONENT_ROWS[0], find("oe", false, 0.0)),
            (COMPONENT_ROWS[1], find(ContrastVariant::SclAll.as_str(), false, lambda2)),
            (COMPONENT_ROWS[2], find(ContrastVariant::Partial.as_str(), false, lambda2)),
            (COMPONENT_ROWS[3], find(ContrastVariant::Asymmetric.as_str(), false, lambda2)),
            (COMPONENT_ROWS[4], find(ContrastVariant::Pascl.as_str(), false, lambda2)),
            (COMPONENT_ROWS[5], find(ContrastVariant::Pascl.as_str(), true, lambda2)),
        ]
    }

    pub fn format_component_table(&self, score_fn: ScoreFn, k: f64, lambda2: f64) -> String {
        let mut header = vec!["method".to_string(), "runs".to_string()];
        header.extend(TABLE_METRICS.iter().map(|(h, _)| h.to_string()));
        let body: Vec<Vec<String>> = self
            .component_table(score_fn, k, lambda2)
            .into_iter()
            .map(|(label, g)| {
                let mut row = vec![label.to_string(), g.as_ref().map_or("0".into(), |g| g.runs.to_string())];
                row.extend(TABLE_METRICS.iter().map(|(_, m)| {
                    g.as_ref().and_then(|g| g.metric(m)).map_or("NA".into(), MetricSummary::percent)
                }));
                row
            })
            .collect();
        render_table(&header, &body)
    }

    /// Summary rows of every successful cell, header included.
    pub fn summary_csv(&self) -> String {
        let mut out = RunRecord::summary_csv_header();
        out.push('\n');
        for record in self.cells.iter().filter_map(|c| c.record.as_ref()) {
            for row in record.summary_csv_rows() {
                out.push_str(&row);
                out.push('\n');
            }
        }
        out
    }
}

/// Runs one two-stage experiment per cell on up to `jobs` threads. A failing
/// cell is recorded and the rest of the grid still runs.
pub fn ablation_grid(base: &ExperimentConfig, axes: &GridAxes, jobs: usize) -> Result<GridResult> {
    axes.validate()?;
    base.validate()?;
    if jobs == 0 {
        return Err(PasclError::Config("jobs: must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| PasclError::Config(format!("jobs: {e}")))?;
    let cells = axes.cells();
    let mut outcomes: Vec<CellOutcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|key| match run_experiment::<f64>(&key.config(base)) {
                Ok(outcome) => CellOutcome { key: *key, record: Some(outcome.record), error: None },
                Err(e) => CellOutcome { key: *key, record: None, error: Some(e.to_string()) },
            })
            .collect()
    });
    outcomes.sort_by(|a, b| CellKey::order(&a.key, &b.key));
    Ok(GridResult { cells: outcomes })
}
