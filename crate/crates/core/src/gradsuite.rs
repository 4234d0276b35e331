//! Finite-difference checks of every training loss on small random batches.
//!
//! Each case draws a `[batch, classes + proj_dim]` matrix. The first `classes`
//! columns act as logits, the rest as a raw projection that is normalised on
//! the tape, so perturbations never leave the unit sphere.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{grad_check, GradCheckReport, NodeId, Tape, TensorBuf};
use crate::error::Result;
use crate::objectives::{
    cross_entropy, logit_adjusted_ce, outlier_uniformity, pascl_contrastive, stage1_loss, ContrastSpec,
    ContrastVariant, LossWeights, Stage1Batch,
};
use crate::synth::Domain;

pub const SUITE_BATCH: usize = 12;
pub const SUITE_CLASSES: usize = 4;
pub const SUITE_PROJ_DIM: usize = 4;
pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_SEEDS: u64 = 20;

/// Rows `0..8` are in-distribution, `8..12` are outliers.
const N_IN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SuiteLoss {
    CrossEntropy,
    OutlierUniformity,
    LogitAdjustedCe,
    Contrastive(ContrastVariant),
    Stage1,
}

impl SuiteLoss {
    pub fn all() -> Vec<SuiteLoss> {
        let mut out = vec![SuiteLoss::CrossEntropy, SuiteLoss::OutlierUniformity, SuiteLoss::LogitAdjustedCe];
        out.extend(ContrastVariant::ALL.iter().map(|&v| SuiteLoss::Contrastive(v)));
        out.push(SuiteLoss::Stage1);
        out
    }
}

impl fmt::Display for SuiteLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SuiteLoss::CrossEntropy => f.write_str("cross_entropy"),
            SuiteLoss::OutlierUniformity => f.write_str("outlier_uniformity"),
            SuiteLoss::LogitAdjustedCe => f.write_str("logit_adjusted_ce"),
            SuiteLoss::Contrastive(v) => write!(f, "contrastive[{v}]"),
            SuiteLoss::Stage1 => f.write_str("stage1_loss"),
        }
    }
}

/// One loss checked at one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub loss: SuiteLoss,
    pub seed: u64,
    pub report: GradCheckReport,
}

/// Worst errors of one loss over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSummary {
    pub loss: SuiteLoss,
    pub cases: usize,
    pub failed: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSuiteReport {
    pub cases: Vec<GradCase>,
}

impl GradSuiteReport {
    pub fn pass(&self) -> bool {
        self.cases.iter().all(|c| c.report.pass)
    }

    pub fn summaries(&self) -> Vec<LossSummary> {
        SuiteLoss::all()
            .into_iter()
            .filter_map(|loss| {
                let cases: Vec<&GradCase> = self.cases.iter().filter(|c| c.loss == loss).collect();
                (!cases.is_empty()).then(|| LossSummary {
                    loss,
                    cases: cases.len(),
                    failed: cases.iter().filter(|c| !c.report.pass).count(),
                    max_abs_error: cases.iter().map(|c| c.report.max_abs_error).fold(0.0, f64::max),
                    max_rel_error: cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max),
                })
            })
            .collect()
    }
}

/// A random point plus the labels of the batch it stands for.
struct Problem {
    point: TensorBuf<f64>,
    labels: Vec<usize>,
    domains: Vec<Domain>,
}

fn problem(seed: u64) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = SUITE_CLASSES + SUITE_PROJ_DIM;
    let data: Vec<f64> = (0..SUITE_BATCH * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            1.5 * v
        })
        .collect();
    // every class twice so every variant has anchors with positives
    let mut labels: Vec<usize> = (0..N_IN).map(|i| i % SUITE_CLASSES).collect();
    labels.shuffle(&mut rng);
    let mut domains = vec![Domain::In; N_IN];
    labels.resize(SUITE_BATCH, 0);
    domains.resize(SUITE_BATCH, Domain::Out);
    Ok(Problem { point: TensorBuf::new(vec![SUITE_BATCH, cols], data)?, labels, domains })
}

/// Constant `[cols, width]` matrix picking columns `from..from + width`.
fn selector(tape: &mut Tape<f64>, from: usize, width: usize) -> Result<NodeId> {
    let cols = SUITE_CLASSES + SUITE_PROJ_DIM;
    let mut m = vec![0.0; cols * width];
    for j in 0..width {
        m[(from + j) * width + j] = 1.0;
    }
    Ok(tape.constant(TensorBuf::new(vec![cols, width], m)?))
}

fn split(tape: &mut Tape<f64>, x: NodeId) -> Result<(NodeId, NodeId)> {
    let sl = selector(tape, 0, SUITE_CLASSES)?;
    let sp = selector(tape, SUITE_CLASSES, SUITE_PROJ_DIM)?;
    let logits = tape.matmul(x, sl)?;
    let raw = tape.matmul(x, sp)?;
    Ok((logits, tape.row_l2_normalize(raw)?))
}

fn tail_set() -> BTreeSet<usize> {
    BTreeSet::from([2, 3])
}

fn priors() -> Vec<f64> {
    let counts = [40.0, 16.0, 6.0, 2.0];
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / total).collect()
}

fn build(loss: SuiteLoss, p: &Problem, tape: &mut Tape<f64>, x: NodeId) -> Result<NodeId> {
    let weights = LossWeights::default();
    let (logits, z) = split(tape, x)?;
    let in_rows: Vec<usize> = (0..N_IN).collect();
    let out_rows: Vec<usize> = (N_IN..SUITE_BATCH).collect();
    match loss {
        SuiteLoss::CrossEntropy => cross_entropy(tape, logits, &p.labels),
        SuiteLoss::OutlierUniformity => outlier_uniformity(tape, logits),
        SuiteLoss::LogitAdjustedCe => logit_adjusted_ce(tape, logits, &p.labels, &priors(), weights.tau_la),
        SuiteLoss::Contrastive(variant) => {
            let spec = ContrastSpec::new(variant, tail_set());
            if variant.uses_ood() {
                pascl_contrastive(tape, z, &p.labels, &p.domains, &spec, weights.tau)
            } else {
                let z_in = tape.gather_rows(z, in_rows.clone())?;
                pascl_contrastive(tape, z_in, &p.labels[..N_IN], &p.domains[..N_IN], &spec, weights.tau)
            }
        }
        SuiteLoss::Stage1 => {
            let spec = ContrastSpec::new(ContrastVariant::Pascl, tail_set());
            let batch = Stage1Batch {
                in_logits: tape.gather_rows(logits, in_rows.clone())?,
                in_projection: tape.gather_rows(z, in_rows)?,
                in_labels: &p.labels[..N_IN],
                out_logits: Some(tape.gather_rows(logits, out_rows.clone())?),
                out_projection: Some(tape.gather_rows(z, out_rows)?),
            };
            Ok(stage1_loss(tape, &batch, &spec, &weights)?.total)
        }
    }
}

/// Checks one loss at one seed.
pub fn check_loss(loss: SuiteLoss, seed: u64, step: f64, tol: f64) -> Result<GradCase> {
    let p = problem(seed)?;
    let report = grad_check(|tape, x| build(loss, &p, tape, x), &p.point, step, tol)?;
    Ok(GradCase { loss, seed, report })
}

/// Every loss at seeds `0..seeds` with the given step and tolerance.
pub fn gradient_suite(seeds: u64, step: f64, tol: f64) -> Result<GradSuiteReport> {
    let mut cases = Vec::new();
    for loss in SuiteLoss::all() {
        for seed in 0..seeds {
            cases.push(check_loss(loss, seed, step, tol)?);
        }
    }
    Ok(GradSuiteReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let report = gradient_suite(SUITE_SEEDS, SUITE_STEP, SUITE_TOLERANCE).unwrap();
        assert_eq!(report.cases.len(), 9 * SUITE_SEEDS as usize);
        for s in report.summaries() {
            assert_eq!(s.failed, 0, "{}: abs {} rel {}", s.loss, s.max_abs_error, s.max_rel_error);
        }
        assert!(report.pass());
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // drop the normaliser's backward by treating a normalised value as a constant
        let p = problem(3).unwrap();
        let report = grad_check(
            |tape, x| {
                let (_, z) = split(tape, x)?;
                let frozen = tape.constant(tape.value(z).clone());
                let spec = ContrastSpec::new(ContrastVariant::SclAll, tail_set());
                let a = pascl_contrastive(tape, frozen, &p.labels, &p.domains, &spec, 0.1)?;
                let b = tape.sum(z)?;
                tape.add(a, b)
            },
            &p.point,
            SUITE_STEP,
            SUITE_TOLERANCE,
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn every_variant_has_anchors() {
        use crate::objectives::plan_contrast;
        for seed in 0..SUITE_SEEDS {
            let p = problem(seed).unwrap();
            for v in ContrastVariant::ALL {
                let spec = ContrastSpec::new(v, tail_set());
                let (labels, domains) = if v.uses_ood() {
                    (&p.labels[..], &p.domains[..])
                } else {
                    (&p.labels[..N_IN], &p.domains[..N_IN])
                };
                assert!(!plan_contrast(labels, domains, &spec).unwrap().anchors.is_empty(), "{v}");
            }
        }
    }
}
