//! Supervised contrastive loss with configurable anchor and contrast sets.
//!
//! | variant      | anchors `I`       | contrast set `A(x)`          | OOD positives |
//! |--------------|-------------------|------------------------------|---------------|
//! | `SclIn`      | in-distribution   | in-distribution minus `x`    | n/a           |
//! | `SclAll`     | everything        | everything minus `x`         | yes           |
//! | `Partial`    | tail + OOD        | tail + OOD minus `x`         | yes           |
//! | `Asymmetric` | in-distribution   | everything minus `x`         | no            |
//! | `Pascl`      | tail              | tail + OOD minus `x`         | no            |
//!
//! Where OOD rows may be positives they all share one extra pseudo-class.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, Tape, TensorBuf};
use crate::error::{invalid, PasclError, Result};
use crate::scalar::Real;
use crate::synth::Domain;

/// Allowed deviation of `|z|` from 1 for contrastive inputs.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContrastVariant {
    SclIn,
    SclAll,
    Partial,
    Asymmetric,
    Pascl,
}

impl ContrastVariant {
    pub const ALL: [ContrastVariant; 5] = [
        ContrastVariant::SclIn,
        ContrastVariant::SclAll,
        ContrastVariant::Partial,
        ContrastVariant::Asymmetric,
        ContrastVariant::Pascl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContrastVariant::SclIn => "scl_in",
            ContrastVariant::SclAll => "scl_all",
            ContrastVariant::Partial => "partial",
            ContrastVariant::Asymmetric => "asymmetric",
            ContrastVariant::Pascl => "pascl",
        }
    }

    /// Whether OOD rows take part at all.
    pub fn uses_ood(self) -> bool {
        !matches!(self, ContrastVariant::SclIn)
    }

    /// Whether OOD rows form one extra class (anchors and positives of each other).
    pub fn ood_is_class(self) -> bool {
        matches!(self, ContrastVariant::SclAll | ContrastVariant::Partial)
    }

    fn is_anchor_role(self, role: Role) -> bool {
        use ContrastVariant::*;
        match (self, role) {
            (SclIn | Asymmetric, Role::Ood) => false,
            (SclIn | SclAll | Asymmetric, _) => true,
            (Partial, r) => r != Role::Head,
            (Pascl, r) => r == Role::Tail,
        }
    }

    fn is_contrast_role(self, role: Role) -> bool {
        use ContrastVariant::*;
        match (self, role) {
            (SclIn, r) => r != Role::Ood,
            (SclAll | Asymmetric, _) => true,
            (Partial | Pascl, r) => r != Role::Head,
        }
    }
}

impl fmt::Display for ContrastVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContrastVariant {
    type Err = PasclError;

    fn from_str(s: &str) -> Result<Self> {
        ContrastVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| PasclError::Config(format!("variant: unknown contrastive variant {s:?}")))
    }
}

/// How a row participates, derived from its domain and the tail set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Head,
    Tail,
    Ood,
}

/// Active contrastive variant together with the tail classes it refers to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastSpec {
    pub variant: ContrastVariant,
    pub tail_set: BTreeSet<usize>,
}

/// Number of embeddings of each role handed to the contrastive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastCounts {
    pub head: u64,
    pub tail: u64,
    pub ood: u64,
}

impl ContrastCounts {
    pub fn accumulate(&mut self, other: ContrastCounts) {
        self.head += other.head;
        self.tail += other.tail;
        self.ood += other.ood;
    }
}

impl ContrastSpec {
    pub fn new(variant: ContrastVariant, tail_set: BTreeSet<usize>) -> Self {
        Self { variant, tail_set }
    }

    pub fn role(&self, label: usize, domain: Domain) -> Role {
        match domain {
            Domain::Out => Role::Ood,
            Domain::In if self.tail_set.contains(&label) => Role::Tail,
            Domain::In => Role::Head,
        }
    }

    /// Rows that can appear as an anchor or in a contrast set, in batch order.
    pub fn participants(&self, labels: &[usize], domains: &[Domain]) -> Vec<usize> {
        labels
            .iter()
            .zip(domains)
            .enumerate()
            .filter(|(_, (&y, &d))| {
                let role = self.role(y, d);
                self.variant.is_anchor_role(role) || self.variant.is_contrast_role(role)
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count_roles(&self, rows: impl Iterator<Item = (usize, Domain)>) -> ContrastCounts {
        let mut counts = ContrastCounts::default();
        for (y, d) in rows {
            match self.role(y, d) {
                Role::Head => counts.head += 1,
                Role::Tail => counts.tail += 1,
                Role::Ood => counts.ood += 1,
            }
        }
        counts
    }
}

/// Anchors with a non-empty positive set, their contrast masks and the weight
/// each positive pair carries in the averaged loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastPlan {
    pub batch: usize,
    pub anchors: Vec<usize>,
    /// `anchors.len() x batch`, true where the column belongs to `A(anchor)`.
    pub contrast_mask: Vec<bool>,
    /// `anchors.len() x batch`, `1 / (|P(anchor)| * anchors.len())` on positives.
    pub positive_weight: Vec<f64>,
}

/// Resolves anchor, contrast and positive sets for one batch.
pub fn plan_contrast(labels: &[usize], domains: &[Domain], spec: &ContrastSpec) -> Result<ContrastPlan> {
    if labels.len() != domains.len() {
        return invalid("labels and domains differ in length");
    }
    let n = labels.len();
    let roles: Vec<Role> = labels.iter().zip(domains).map(|(&y, &d)| spec.role(y, d)).collect();
    let variant = spec.variant;
    let mut anchors = Vec::new();
    let mut mask = Vec::new();
    let mut positives: Vec<Vec<usize>> = Vec::new();
    for x in 0..n {
        if !variant.is_anchor_role(roles[x]) {
            continue;
        }
        let row_mask: Vec<bool> = (0..n).map(|a| a != x && variant.is_contrast_role(roles[a])).collect();
        let pos: Vec<usize> = (0..n)
            .filter(|&a| row_mask[a])
            .filter(|&a| match (roles[x], roles[a]) {
                (Role::Ood, Role::Ood) => variant.ood_is_class(),
                (Role::Ood, _) | (_, Role::Ood) => false,
                _ => labels[a] == labels[x],
            })
            .collect();
        if pos.is_empty() {
            continue;
        }
        anchors.push(x);
        mask.extend(row_mask);
        positives.push(pos);
    }
    let n_anchors = anchors.len() as f64;
    let mut positive_weight = vec![0.0; anchors.len() * n];
    for (i, pos) in positives.iter().enumerate() {
        let w = 1.0 / (pos.len() as f64 * n_anchors);
        for &p in pos {
            positive_weight[i * n + p] = w;
        }
    }
    Ok(ContrastPlan { batch: n, anchors, contrast_mask: mask, positive_weight })
}

/// Mean over qualifying anchors of
/// `-(1/|P(x)|) * sum_p log(exp(z_x.z_p / tau) / sum_{a in A(x)} exp(z_x.z_a / tau))`.
///
/// Anchors without positives are skipped; with no qualifying anchor the loss is
/// the constant 0. Rows of `z` must be unit vectors.
pub fn pascl_contrastive<S: Real>(
    tape: &mut Tape<S>,
    z: NodeId,
    labels: &[usize],
    domains: &[Domain],
    spec: &ContrastSpec,
    tau: f64,
) -> Result<NodeId> {
    if !(tau > 0.0) {
        return invalid("temperature must be positive");
    }
    let zv = tape.value(z);
    if zv.rank() != 2 || zv.rows() != labels.len() {
        return invalid(format!("embeddings {:?} do not match {} labels", zv.dims(), labels.len()));
    }
    for (i, row) in zv.row_iter().enumerate() {
        let norm = row.iter().fold(S::zero(), |a, &v| a + v * v).sqrt().as_f64();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return invalid(format!("embedding row {i} has norm {norm}, expected 1"));
        }
    }
    let plan = plan_contrast(labels, domains, spec)?;
    if plan.anchors.is_empty() {
        return Ok(tape.constant(TensorBuf::scalar(S::zero())));
    }
    let n = plan.batch;
    let k = plan.anchors.len();
    let anchor_z = tape.gather_rows(z, plan.anchors.clone())?;
    let z_t = tape.transpose(z)?;
    let sim = tape.matmul(anchor_z, z_t)?;
    let logits = tape.scale(sim, S::lit(1.0 / tau))?;
    let lse = tape.row_logsumexp_masked(logits, plan.contrast_mask)?;

    let pos_w = plan.positive_weight.iter().map(|&w| S::lit(w)).collect();
    let pos_w = tape.constant(TensorBuf::new(vec![k, n], pos_w)?);
    let pos = tape.dot_rows(logits, pos_w)?;
    let pos = tape.sum(pos)?;

    let anchor_w = tape.constant(TensorBuf::new(vec![k, 1], vec![S::lit(1.0 / k as f64); k])?);
    let denom = tape.dot_rows(lse, anchor_w)?;
    let denom = tape.sum(denom)?;
    tape.sub(denom, pos)
}
