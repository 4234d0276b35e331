//! OOD detection and residual classification measures.
//!
//! OOD is the positive class throughout and a higher score means "more OOD".
//! Tie conventions: AUROC gives half credit to tied pairs, AUPR ranks tied
//! in-distribution examples ahead of tied OOD examples, and thresholds include
//! scores equal to the threshold.

mod report;

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::error::{invalid, Result};
use crate::scalar::Real;

pub(crate) use report::render_table;
pub use report::{
    aggregate, format_percent_table, format_raw, LevelValue, MetricSummary, MetricsReport, FPR_LEVELS, TPR_LEVELS,
};

/// One scored test example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredExample<S> {
    pub score: S,
    pub is_ood: bool,
    /// Ignored for OOD examples.
    pub pred_class: usize,
    /// Ignored for OOD examples.
    pub true_class: usize,
}

impl<S: Real> ScoredExample<S> {
    pub fn in_distribution(score: S, pred_class: usize, true_class: usize) -> Self {
        Self { score, is_ood: false, pred_class, true_class }
    }

    pub fn ood(score: S) -> Self {
        Self { score, is_ood: true, pred_class: 0, true_class: 0 }
    }

    fn correct(&self) -> bool {
        self.pred_class == self.true_class
    }
}

fn cmp<S: Real>(a: S, b: S) -> Ordering {
    a.partial_cmp(&b).expect("scores were checked for NaN")
}

fn split_counts<S: Real>(examples: &[ScoredExample<S>]) -> Result<(usize, usize)> {
    if examples.iter().any(|e| e.score.is_nan()) {
        return invalid("scores must not be NaN");
    }
    let n_ood = examples.iter().filter(|e| e.is_ood).count();
    Ok((n_ood, examples.len() - n_ood))
}

fn need_both(n_ood: usize, n_in: usize) -> Result<()> {
    if n_ood == 0 || n_in == 0 {
        return invalid(format!("need OOD and in-distribution examples, got {n_ood} and {n_in}"));
    }
    Ok(())
}

/// Probability that an OOD example outscores an in-distribution one, ties counted half.
pub fn auroc<S: Real>(examples: &[ScoredExample<S>]) -> Result<f64> {
    let (n_ood, n_in) = split_counts(examples)?;
    need_both(n_ood, n_in)?;
    let mut sorted: Vec<&ScoredExample<S>> = examples.iter().collect();
    sorted.sort_by(|a, b| cmp(a.score, b.score));
    // twice the Mann-Whitney statistic, kept integral
    let mut twice_u: u128 = 0;
    let mut in_below: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut g_ood, mut g_in) = (0u128, 0u128);
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            if sorted[j].is_ood {
                g_ood += 1;
            } else {
                g_in += 1;
            }
            j += 1;
        }
        twice_u += 2 * g_ood * in_below + g_ood * g_in;
        in_below += g_in;
        i = j;
    }
    Ok(twice_u as f64 / (2.0 * n_ood as f64 * n_in as f64))
}

/// Average precision with OOD as the positive class.
pub fn aupr<S: Real>(examples: &[ScoredExample<S>]) -> Result<f64> {
    let (n_ood, _) = split_counts(examples)?;
    if n_ood == 0 {
        return invalid("average precision needs at least one OOD example");
    }
    let mut sorted: Vec<&ScoredExample<S>> = examples.iter().collect();
    sorted.sort_by(|a, b| cmp(b.score, a.score).then(a.is_ood.cmp(&b.is_ood)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, e) in sorted.iter().enumerate() {
        if e.is_ood {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_ood as f64)
}

/// Largest threshold at which at least a fraction `n` of OOD scores are `>= t`.
pub fn tpr_threshold<S: Real>(examples: &[ScoredExample<S>], n: f64) -> Result<S> {
    if !(n > 0.0 && n <= 1.0) {
        return invalid(format!("TPR level {n} outside (0, 1]"));
    }
    let (n_ood, n_in) = split_counts(examples)?;
    need_both(n_ood, n_in)?;
    let mut ood: Vec<S> = examples.iter().filter(|e| e.is_ood).map(|e| e.score).collect();
    ood.sort_by(|a, b| cmp(*b, *a));
    let needed = (1..=n_ood)
        .find(|&j| j as f64 / n_ood as f64 >= n)
        .expect("j = n_ood always qualifies");
    Ok(ood[needed - 1])
}

/// Fraction of in-distribution examples flagged at the TPR-`n` threshold.
pub fn fpr_at_tpr<S: Real>(examples: &[ScoredExample<S>], n: f64) -> Result<f64> {
    let t = tpr_threshold(examples, n)?;
    let ins = examples.iter().filter(|e| !e.is_ood);
    let n_in = ins.clone().count();
    Ok(ins.filter(|e| e.score >= t).count() as f64 / n_in as f64)
}

fn accuracy<'a, S: Real + 'a>(examples: impl Iterator<Item = &'a ScoredExample<S>>) -> Option<f64> {
    let (mut total, mut correct) = (0usize, 0usize);
    for e in examples {
        total += 1;
        correct += usize::from(e.correct());
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Accuracy over in-distribution examples left unflagged at the TPR-`n`
/// threshold; `None` when none remain.
pub fn acc_at_tpr<S: Real>(examples: &[ScoredExample<S>], n: f64) -> Result<Option<f64>> {
    let t = tpr_threshold(examples, n)?;
    Ok(accuracy(examples.iter().filter(|e| !e.is_ood && e.score < t)))
}

/// Accuracy after flagging the `ceil(n * N_in)` highest-scoring in-distribution
/// examples; `n = 0` is plain accuracy. OOD examples play no part.
pub fn acc_at_fpr<S: Real>(examples: &[ScoredExample<S>], n: f64) -> Result<Option<f64>> {
    if !(0.0..1.0).contains(&n) {
        return invalid(format!("FPR level {n} outside [0, 1)"));
    }
    if examples.iter().any(|e| e.score.is_nan()) {
        return invalid("scores must not be NaN");
    }
    let mut ins: Vec<&ScoredExample<S>> = examples.iter().filter(|e| !e.is_ood).collect();
    if n == 0.0 {
        return Ok(accuracy(ins.into_iter()));
    }
    // guard against products such as 0.01 * 700 landing one ulp above an integer
    let flagged = ((n * ins.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    ins.sort_by(|a, b| cmp(b.score, a.score));
    Ok(accuracy(ins.into_iter().skip(flagged)))
}

/// Accuracy on in-distribution examples of head classes and of tail classes.
pub fn head_tail_accuracy<S: Real>(
    examples: &[ScoredExample<S>],
    tail_set: &BTreeSet<usize>,
) -> (Option<f64>, Option<f64>) {
    let ins = examples.iter().filter(|e| !e.is_ood);
    let head = accuracy(ins.clone().filter(|e| !tail_set.contains(&e.true_class)));
    let tail = accuracy(ins.filter(|e| tail_set.contains(&e.true_class)));
    (head, tail)
}

/// Plain top-1 accuracy over in-distribution examples.
pub fn top1_accuracy<S: Real>(examples: &[ScoredExample<S>]) -> Option<f64> {
    accuracy(examples.iter().filter(|e| !e.is_ood))
}

/// Every measure at the standard operating points.
pub fn compute_report<S: Real>(
    examples: &[ScoredExample<S>],
    tail_set: &BTreeSet<usize>,
    seed: u64,
    config_hash: &str,
) -> Result<MetricsReport> {
    let fpr_at = TPR_LEVELS
        .iter()
        .map(|&n| Ok(LevelValue { level: n, value: Some(fpr_at_tpr(examples, n)?) }))
        .collect::<Result<Vec<_>>>()?;
    let acc_tpr = TPR_LEVELS
        .iter()
        .map(|&n| Ok(LevelValue { level: n, value: acc_at_tpr(examples, n)? }))
        .collect::<Result<Vec<_>>>()?;
    let acc_fpr = FPR_LEVELS
        .iter()
        .map(|&n| Ok(LevelValue { level: n, value: acc_at_fpr(examples, n)? }))
        .collect::<Result<Vec<_>>>()?;
    let (acc_head, acc_tail) = head_tail_accuracy(examples, tail_set);
    Ok(MetricsReport {
        auroc: auroc(examples)?,
        aupr: aupr(examples)?,
        fpr_at_tpr: fpr_at,
        acc_at_tpr: acc_tpr,
        acc_at_fpr: acc_fpr,
        acc_head,
        acc_tail,
        seed,
        config_hash: config_hash.to_string(),
    })
}
