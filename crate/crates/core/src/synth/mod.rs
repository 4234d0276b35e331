//! Seeded long-tailed Gaussian-mixture benchmark.
//!
//! In-distribution classes sit on a circle in the first two coordinates; OOD
//! clusters sit at the angular midpoints between neighbouring classes, at the
//! same radius, so rare classes and outliers genuinely overlap.

mod io;

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PasclError, Result};

pub use io::{read_examples_csv, write_examples_csv, ProfileSummary};

/// Parameters of the synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataGenConfig {
    pub classes: usize,
    pub n_max: usize,
    pub rho: f64,
    /// Fraction of classes treated as tail classes.
    pub tail_fraction: f64,
    pub dim: usize,
    pub id_center_radius: f64,
    pub id_cluster_std: f64,
    pub n_ood_clusters: usize,
    pub ood_cluster_std: f64,
    pub n_ood_train: usize,
    pub n_test_per_class: usize,
    pub n_ood_test: usize,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            n_max: 500,
            rho: 100.0,
            tail_fraction: 0.5,
            dim: 2,
            id_center_radius: 4.0,
            id_cluster_std: 0.9,
            n_ood_clusters: 10,
            ood_cluster_std: 0.3,
            n_ood_train: 2000,
            n_test_per_class: 100,
            n_ood_test: 1000,
            seed: 0,
        }
    }
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(PasclError::Config(format!("{key}: {why}")));
        if self.classes < 2 {
            return bad("classes", "need at least 2 classes");
        }
        if self.n_max < 1 {
            return bad("n_max", "must be at least 1");
        }
        if !(self.rho >= 1.0) || !self.rho.is_finite() {
            return bad("rho", "imbalance ratio must be a finite value >= 1");
        }
        if !(0.0..=1.0).contains(&self.tail_fraction) {
            return bad("k", "tail fraction must lie in [0, 1]");
        }
        if self.dim < 2 {
            return bad("dim", "OOD clusters need at least 2 dimensions");
        }
        if !(self.id_center_radius > 0.0) {
            return bad("id_center_radius", "must be positive");
        }
        if !(self.id_cluster_std >= 0.0) {
            return bad("id_cluster_std", "must be non-negative");
        }
        if !(self.ood_cluster_std >= 0.0) {
            return bad("ood_cluster_std", "must be non-negative");
        }
        if self.n_ood_clusters < 1 || self.n_ood_clusters > self.classes {
            return bad("n_ood_clusters", "must lie in [1, classes]");
        }
        if self.n_ood_train < 1 {
            return bad("n_ood_train", "must be positive");
        }
        if self.n_test_per_class < 1 {
            return bad("n_test_per_class", "must be positive");
        }
        if self.n_ood_test < 1 {
            return bad("n_ood_test", "must be positive");
        }
        Ok(())
    }
}

/// Per-class training counts with derived priors and tail membership.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub counts: Vec<usize>,
    pub priors: Vec<f64>,
    pub tail_set: BTreeSet<usize>,
}

impl ClassProfile {
    pub fn new(counts: Vec<usize>, tail_fraction: f64) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return invalid("class counts must be non-empty and positive");
        }
        if !(0.0..=1.0).contains(&tail_fraction) {
            return invalid(format!("tail fraction {tail_fraction} outside [0, 1]"));
        }
        let total: usize = counts.iter().sum();
        let priors = counts.iter().map(|&n| n as f64 / total as f64).collect();
        let tail_set = tail_class_set(&counts, tail_fraction);
        Ok(Self { counts, priors, tail_set })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn is_tail(&self, class: usize) -> bool {
        self.tail_set.contains(&class)
    }

    /// Most frequent count over least frequent count.
    pub fn realized_rho(&self) -> f64 {
        let max = *self.counts.iter().max().expect("non-empty");
        let min = *self.counts.iter().min().expect("non-empty");
        max as f64 / min as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    In,
    Out,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Ood,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Ood => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: Label,
    pub domain: Domain,
    pub tail: bool,
}

impl LabeledExample {
    pub fn in_distribution(features: Vec<f64>, class: usize, tail: bool) -> Self {
        Self { features, label: Label::Class(class), domain: Domain::In, tail }
    }

    pub fn ood(features: Vec<f64>) -> Self {
        Self { features, label: Label::Ood, domain: Domain::Out, tail: false }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DatasetSplit {
    pub train_in: Vec<LabeledExample>,
    pub train_out: Vec<LabeledExample>,
    pub test_in: Vec<LabeledExample>,
    pub test_out: Vec<LabeledExample>,
}

/// Exponentially decaying class counts `max(1, round(n_max * rho^(-c/(C-1))))`.
pub fn longtailed_counts(classes: usize, n_max: usize, rho: f64) -> Result<Vec<usize>> {
    if classes < 1 || n_max < 1 {
        return invalid("need at least one class and n_max >= 1");
    }
    if !(rho >= 1.0) || !rho.is_finite() {
        return invalid(format!("imbalance ratio {rho} must be finite and >= 1"));
    }
    if classes == 1 {
        return Ok(vec![n_max]);
    }
    let last = (classes - 1) as f64;
    Ok((0..classes)
        .map(|c| {
            let n = (n_max as f64 * rho.powf(-(c as f64) / last)).round();
            (n as usize).max(1)
        })
        .collect())
}

/// `round_half_up(k * C)` for the tail-class count.
pub fn tail_class_count(classes: usize, tail_fraction: f64) -> usize {
    // the epsilon absorbs representation error in products such as 0.5 * 3
    ((tail_fraction * classes as f64 + 0.5 + 1e-9).floor() as usize).min(classes)
}

/// The `round_half_up(k * C)` classes with the fewest samples, ties to the smaller id.
pub fn tail_class_set(counts: &[usize], tail_fraction: f64) -> BTreeSet<usize> {
    let m = tail_class_count(counts.len(), tail_fraction);
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&c| (counts[c], c));
    order.into_iter().take(m).collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn ring_point(radius: f64, angle: f64, dim: usize) -> Vec<f64> {
    let mut p = vec![0.0; dim];
    p[0] = radius * angle.cos();
    p[1] = radius * angle.sin();
    p
}

fn sample_around(center: &[f64], std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    center
        .iter()
        .map(|&c| {
            let z: f64 = StandardNormal.sample(rng);
            c + std * z
        })
        .collect()
}

/// In-distribution class centers, equally spaced on the ring.
pub fn class_centers(cfg: &DataGenConfig) -> Vec<Vec<f64>> {
    let c = cfg.classes as f64;
    (0..cfg.classes)
        .map(|k| ring_point(cfg.id_center_radius, 2.0 * PI * k as f64 / c, cfg.dim))
        .collect()
}

/// OOD cluster centers at the angular midpoints between neighbouring classes.
pub fn ood_centers(cfg: &DataGenConfig) -> Vec<Vec<f64>> {
    let c = cfg.classes as f64;
    (0..cfg.n_ood_clusters)
        .map(|j| {
            let slot = (j * cfg.classes / cfg.n_ood_clusters) as f64;
            ring_point(cfg.id_center_radius, 2.0 * PI * (slot + 0.5) / c, cfg.dim)
        })
        .collect()
}

/// Draws the four splits; every split uses its own random stream of `cfg.seed`.
pub fn generate_synthetic(cfg: &DataGenConfig) -> Result<(ClassProfile, DatasetSplit)> {
    cfg.validate()?;
    let counts = longtailed_counts(cfg.classes, cfg.n_max, cfg.rho)?;
    let profile = ClassProfile::new(counts, cfg.tail_fraction)?;
    let centers = class_centers(cfg);
    let outliers = ood_centers(cfg);

    let in_samples = |per_class: &dyn Fn(usize) -> usize, stream: u64| {
        let mut rng = stream_rng(cfg.seed, stream);
        let mut out = Vec::new();
        for (class, center) in centers.iter().enumerate() {
            for _ in 0..per_class(class) {
                let x = sample_around(center, cfg.id_cluster_std, &mut rng);
                out.push(LabeledExample::in_distribution(x, class, profile.is_tail(class)));
            }
        }
        out
    };
    let ood_samples = |n: usize, stream: u64| {
        let mut rng = stream_rng(cfg.seed, stream);
        (0..n)
            .map(|i| {
                let center = &outliers[i % outliers.len()];
                LabeledExample::ood(sample_around(center, cfg.ood_cluster_std, &mut rng))
            })
            .collect::<Vec<_>>()
    };

    let split = DatasetSplit {
        train_in: in_samples(&|c| profile.counts[c], 1),
        train_out: ood_samples(cfg.n_ood_train, 2),
        test_in: in_samples(&|_| cfg.n_test_per_class, 3),
        test_out: ood_samples(cfg.n_ood_test, 4),
    };
    Ok((profile, split))
}

/// Row indices of one in-distribution batch paired with OOD row indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPair {
    pub in_rows: Vec<usize>,
    pub out_rows: Vec<usize>,
}

/// Shuffled chunks of `0..n`. A trailing chunk of one row is folded into the
/// previous chunk so every batch can be batch-normalized.
pub fn in_batches(n: usize, batch: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch < 1 {
        return invalid("batch size must be at least 1");
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 11));
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
        let tail = chunks.pop().expect("checked above");
        chunks.last_mut().expect("checked above").extend(tail);
    }
    Ok(chunks)
}

/// One epoch of in-distribution chunks, each paired with `batch_out` OOD rows
/// drawn without replacement from a reshuffled pool of `train_out`.
///
/// `require_out` marks that a loss term consumes OOD rows; an empty OOD pool is
/// then a configuration error, otherwise out-batches are simply empty.
pub fn mixed_batches(
    split: &DatasetSplit,
    batch_in: usize,
    batch_out: usize,
    seed: u64,
    require_out: bool,
) -> Result<Vec<BatchPair>> {
    if batch_in < 1 || batch_out < 1 {
        return invalid("batch sizes must be at least 1");
    }
    if split.train_out.is_empty() && require_out {
        return Err(PasclError::Config(
            "OOD training set is empty but lambda1 or lambda2 is positive".into(),
        ));
    }
    let chunks = in_batches(split.train_in.len(), batch_in, seed)?;
    let n_out = split.train_out.len();
    let mut rng = stream_rng(seed, 12);
    let mut pool: Vec<usize> = Vec::new();
    let mut draw = move || {
        if pool.is_empty() {
            pool = (0..n_out).collect();
            pool.shuffle(&mut rng);
            pool.reverse();
        }
        pool.pop().expect("pool refilled")
    };
    Ok(chunks
        .into_iter()
        .map(|in_rows| {
            let out_rows = if n_out == 0 { Vec::new() } else { (0..batch_out).map(|_| draw()).collect() };
            BatchPair { in_rows, out_rows }
        })
        .collect())
}

#[cfg(test)]
mod tests;
