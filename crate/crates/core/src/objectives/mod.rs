//! Training objectives and OOD detection scores.
//!
//! Every loss is built on a [`Tape`] so it can be differentiated; the scores
//! work on plain logit matrices.

mod contrast;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{logsumexp, NodeId, Tape, TensorBuf};
use crate::error::{invalid, PasclError, Result};
use crate::scalar::Real;
use crate::synth::Domain;

pub use contrast::{
    pascl_contrastive, plan_contrast, ContrastCounts, ContrastPlan, ContrastSpec, ContrastVariant,
    Role, UNIT_NORM_TOLERANCE,
};

/// Weights and temperatures of the stage-one and stage-two objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on the outlier-uniformity term.
    pub lambda1: f64,
    /// Weight on the contrastive term.
    pub lambda2: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Logit-adjustment strength.
    pub tau_la: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.5, lambda2: 0.1, tau: 0.1, tau_la: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(PasclError::Config(format!("{key}: {why}")));
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad("tau", "temperature must be positive");
        }
        for (key, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("tau_la", self.tau_la)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(key, "must be a finite value >= 0");
            }
        }
        Ok(())
    }
}

/// Which score turns logits into an OOD score (higher = more OOD).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScoreFn {
    Msp,
    Energy,
}

impl ScoreFn {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreFn::Msp => "msp",
            ScoreFn::Energy => "energy",
        }
    }

    pub fn score<S: Real>(self, logits: &TensorBuf<S>) -> Vec<S> {
        match self {
            ScoreFn::Msp => msp_ood_score(logits),
            ScoreFn::Energy => energy_ood_score(logits),
        }
    }
}

impl FromStr for ScoreFn {
    type Err = PasclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msp" => Ok(ScoreFn::Msp),
            "energy" => Ok(ScoreFn::Energy),
            _ => Err(PasclError::Config(format!("score: unknown score function {s:?}"))),
        }
    }
}

fn one_hot<S: Real>(labels: &[usize], rows: usize, classes: usize) -> Result<TensorBuf<S>> {
    if labels.len() != rows {
        return invalid(format!("{} labels for {rows} rows", labels.len()));
    }
    let mut data = vec![S::zero(); rows * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return invalid(format!("label {y} outside [0, {classes})"));
        }
        data[r * classes + y] = S::one();
    }
    TensorBuf::new(vec![rows, classes], data)
}

fn logit_shape<S: Real>(tape: &Tape<S>, logits: NodeId) -> Result<(usize, usize)> {
    let dims = tape.value(logits).dims();
    if dims.len() != 2 {
        return invalid(format!("logits must be [batch, classes], got {dims:?}"));
    }
    Ok((dims[0], dims[1]))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<S: Real>(tape: &mut Tape<S>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (rows, classes) = logit_shape(tape, logits)?;
    let target = tape.constant(one_hot(labels, rows, classes)?);
    let log_probs = tape.row_log_softmax(logits)?;
    let picked = tape.dot_rows(log_probs, target)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -S::one())
}

/// Cross-entropy from the uniform distribution to `softmax(logits)`, averaged
/// over rows: `mean(logsumexp(l) - mean(l))`. Minimum `ln C` at equal logits.
pub fn outlier_uniformity<S: Real>(tape: &mut Tape<S>, logits: NodeId) -> Result<NodeId> {
    let (_, classes) = logit_shape(tape, logits)?;
    if classes < 2 {
        return invalid("outlier uniformity needs at least 2 classes");
    }
    let lse = tape.row_logsumexp(logits)?;
    let lse_mean = tape.mean(lse)?;
    let logit_mean = tape.mean(logits)?;
    tape.sub(lse_mean, logit_mean)
}

/// Cross-entropy on logits shifted by `tau_la * ln(prior)` per class.
pub fn logit_adjusted_ce<S: Real>(
    tape: &mut Tape<S>,
    logits: NodeId,
    labels: &[usize],
    priors: &[f64],
    tau_la: f64,
) -> Result<NodeId> {
    let (_, classes) = logit_shape(tape, logits)?;
    if priors.len() != classes {
        return invalid(format!("{} priors for {classes} classes", priors.len()));
    }
    if let Some(p) = priors.iter().find(|&&p| !(p > 0.0)) {
        return invalid(format!("class prior {p} must be positive"));
    }
    if !(tau_la >= 0.0) {
        return invalid("logit-adjustment strength must be >= 0");
    }
    let shift: Vec<S> = priors.iter().map(|&p| S::lit(tau_la * p.ln())).collect();
    let shift = tape.constant(TensorBuf::vector(shift)?);
    let adjusted = tape.add(logits, shift)?;
    cross_entropy(tape, adjusted, labels)
}

/// Network outputs for one stage-one step, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Batch<'a> {
    pub in_logits: NodeId,
    pub in_projection: NodeId,
    pub in_labels: &'a [usize],
    pub out_logits: Option<NodeId>,
    pub out_projection: Option<NodeId>,
}

/// Loss nodes of one stage-one step; inactive terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Terms {
    pub total: NodeId,
    pub cross_entropy: NodeId,
    pub outlier: Option<NodeId>,
    pub contrastive: Option<NodeId>,
    /// Embeddings handed to the contrastive term, by role.
    pub contrast_counts: ContrastCounts,
}

/// `CE(in) + lambda1 * uniformity(out) + lambda2 * contrastive(in ++ out)`.
///
/// Each expectation is the mean over its own batch. Terms with zero weight are
/// not built at all, so `lambda1 = lambda2 = 0` is exactly cross-entropy.
pub fn stage1_loss<S: Real>(
    tape: &mut Tape<S>,
    batch: &Stage1Batch<'_>,
    spec: &ContrastSpec,
    weights: &LossWeights,
) -> Result<Stage1Terms> {
    weights.validate()?;
    let ce = cross_entropy(tape, batch.in_logits, batch.in_labels)?;
    let mut total = ce;
    let mut outlier = None;
    if weights.lambda1 > 0.0 {
        let Some(out_logits) = batch.out_logits else {
            return invalid("lambda1 > 0 needs an OOD batch");
        };
        let term = outlier_uniformity(tape, out_logits)?;
        let weighted = tape.scale(term, S::lit(weights.lambda1))?;
        total = tape.add(total, weighted)?;
        outlier = Some(term);
    }
    let mut contrastive = None;
    let mut contrast_counts = ContrastCounts::default();
    if weights.lambda2 > 0.0 {
        let mut labels = batch.in_labels.to_vec();
        let mut domains = vec![Domain::In; labels.len()];
        let z = match batch.out_projection {
            Some(out_z) => {
                let n_out = tape.value(out_z).rows();
                labels.extend(std::iter::repeat_n(0, n_out));
                domains.extend(std::iter::repeat_n(Domain::Out, n_out));
                tape.concat_rows(&[batch.in_projection, out_z])?
            }
            None if spec.variant.uses_ood() => {
                return invalid(format!("{} needs an OOD batch", spec.variant));
            }
            None => batch.in_projection,
        };
        let rows = spec.participants(&labels, &domains);
        contrast_counts = spec.count_roles(rows.iter().map(|&r| (labels[r], domains[r])));
        let term = if rows.is_empty() {
            tape.constant(TensorBuf::scalar(S::zero()))
        } else {
            let sub_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let sub_domains: Vec<Domain> = rows.iter().map(|&r| domains[r]).collect();
            let sub_z = tape.gather_rows(z, rows)?;
            pascl_contrastive(tape, sub_z, &sub_labels, &sub_domains, spec, weights.tau)?
        };
        let weighted = tape.scale(term, S::lit(weights.lambda2))?;
        total = tape.add(total, weighted)?;
        contrastive = Some(term);
    }
    Ok(Stage1Terms { total, cross_entropy: ce, outlier, contrastive, contrast_counts })
}

/// `1 - max softmax(l)` per row.
pub fn msp_ood_score<S: Real>(logits: &TensorBuf<S>) -> Vec<S> {
    logits
        .row_iter()
        .map(|row| {
            let lse = logsumexp(row.iter().copied());
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            S::one() - (max - lse).exp()
        })
        .collect()
}

/// Free-energy score `-logsumexp(l)` per row.
pub fn energy_ood_score<S: Real>(logits: &TensorBuf<S>) -> Vec<S> {
    logits.row_iter().map(|row| -logsumexp(row.iter().copied())).collect()
}
