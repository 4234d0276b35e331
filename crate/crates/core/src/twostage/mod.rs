//! Two-stage training: the main branch on cross-entropy, outlier uniformity and
//! the contrastive term, then auxiliary-branch finetuning with logit-adjusted
//! cross-entropy on in-distribution data only. Also evaluation, ablation grids
//! and embedding export.

mod config;
mod grid;
mod optim;
mod summary;

use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, TensorBuf};
use crate::dualnet::{Branch, DualBranchNetwork, Mode, NetConfig, Stage};
use crate::error::{PasclError, Result};
use crate::metrics::{compute_report, MetricsReport, ScoredExample};
use crate::objectives::{
    logit_adjusted_ce, stage1_loss, ContrastCounts, ContrastSpec, ContrastVariant, LossWeights, ScoreFn,
    Stage1Batch,
};
use crate::scalar::Real;
use crate::synth::{generate_synthetic, in_batches, mixed_batches, ClassProfile, DatasetSplit, Domain, Label, LabeledExample};

pub use config::{ExperimentConfig, CONFIG_KEYS};
pub use grid::{ablation_grid, CellKey, CellOutcome, GridAxes, GridResult, GroupSummary, COMPONENT_ROWS};
pub use optim::{learning_rate, Optimizer, OptimizerKind, Schedule};
pub use summary::{aggregate_summary_csv, format_summary_table, summary_groups_csv, SummaryGroup, GROUP_COLUMNS};

/// Hyper-parameters of both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Stage-one epochs.
    pub n1: usize,
    /// Stage-two epochs; 0 disables auxiliary-branch finetuning.
    pub n2: usize,
    pub optimizer: OptimizerKind,
    pub lr1: f64,
    pub lr2: f64,
    pub schedule: Schedule,
    pub batch_in: usize,
    pub batch_out: usize,
    pub weights: LossWeights,
    pub variant: ContrastVariant,
    pub score_fn: ScoreFn,
    pub width: usize,
    pub depth: usize,
    pub proj_dim: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n1: 50,
            n2: 3,
            optimizer: OptimizerKind::Adam,
            lr1: 1e-3,
            lr2: 5e-4,
            schedule: Schedule::Cosine,
            batch_in: 32,
            batch_out: 32,
            weights: LossWeights::default(),
            variant: ContrastVariant::Pascl,
            score_fn: ScoreFn::Msp,
            width: 64,
            depth: 3,
            proj_dim: 16,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(PasclError::Config(format!("{key}: {why}")));
        if self.n1 < 1 {
            return bad("n1", "need at least one stage-one epoch");
        }
        for (key, lr) in [("lr1", self.lr1), ("lr2", self.lr2)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(key, "learning rate must be positive");
            }
        }
        if self.batch_in < 2 {
            return bad("batch_in", "batch norm needs at least 2 rows");
        }
        if self.batch_out < 1 {
            return bad("batch_out", "must be at least 1");
        }
        self.weights.validate()?;
        self.net_config(2, 2).validate()
    }

    pub fn net_config(&self, input_dim: usize, classes: usize) -> NetConfig {
        NetConfig {
            input_dim,
            width: self.width,
            depth: self.depth,
            proj_dim: self.proj_dim,
            classes,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
        }
    }

    /// Whether stage one feeds OOD rows through the network.
    pub fn uses_ood(&self) -> bool {
        self.weights.lambda1 > 0.0 || (self.weights.lambda2 > 0.0 && self.variant.uses_ood())
    }
}

/// Mean losses of one epoch; terms a stage does not use are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    pub cross_entropy: Option<f64>,
    pub outlier: Option<f64>,
    pub contrastive: Option<f64>,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub epochs: Vec<EpochLoss>,
    /// Embeddings handed to the contrastive term over the whole stage.
    pub contrast_counts: ContrastCounts,
}

impl StageTrace {
    pub fn csv_header() -> &'static str {
        "stage,epoch,loss,cross_entropy,outlier,contrastive,lr"
    }

    pub fn csv_rows(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        self.epochs
            .iter()
            .map(|e| {
                format!(
                    "{},{},{},{},{},{},{}",
                    e.stage,
                    e.epoch,
                    e.loss,
                    opt(e.cross_entropy),
                    opt(e.outlier),
                    opt(e.contrastive),
                    e.lr
                )
            })
            .collect()
    }
}

fn epoch_seed(seed: u64, stage: u64, epoch: usize) -> u64 {
    seed ^ (stage << 56) ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn stack<S: Real>(parts: &[(&[LabeledExample], &[usize])]) -> Result<TensorBuf<S>> {
    let dim = parts
        .iter()
        .find_map(|(ex, rows)| rows.first().map(|&r| ex[r].features.len()))
        .ok_or_else(|| PasclError::InvalidInput("empty batch".into()))?;
    let mut data = Vec::new();
    let mut n = 0;
    for (ex, rows) in parts {
        for &r in *rows {
            let f = &ex[r].features;
            if f.len() != dim {
                return Err(PasclError::Data(format!("example {r} has {} features, expected {dim}", f.len())));
            }
            data.extend(f.iter().map(|&v| S::lit(v)));
            n += 1;
        }
    }
    TensorBuf::new(vec![n, dim], data)
}

fn class_labels(ex: &[LabeledExample], rows: &[usize]) -> Result<Vec<usize>> {
    rows.iter()
        .map(|&r| ex[r].label.class().ok_or_else(|| PasclError::Data(format!("row {r} is not in-distribution"))))
        .collect()
}

fn diverged(stage: u8, epoch: usize, step: usize, e: PasclError) -> PasclError {
    match e {
        PasclError::NumericOverflow(m) => {
            PasclError::Divergence(format!("stage {stage}, epoch {epoch}, step {step}: {m}"))
        }
        other => other,
    }
}

fn gradients<S: Real>(
    tape: &Tape<S>,
    bound: &crate::dualnet::BoundParams,
    ids: &[crate::dualnet::ParamId],
) -> Vec<Vec<S>> {
    ids.iter()
        .map(|id| tape.grad(bound[id]).expect("backward ran").to_vec())
        .collect()
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    let chunks = n.div_ceil(batch);
    if chunks > 1 && n % batch == 1 {
        chunks - 1
    } else {
        chunks
    }
}

/// Trains the main branch for `cfg.n1` epochs over mixed batches.
pub fn run_stage1<S: Real>(
    net: &mut DualBranchNetwork<S>,
    split: &DatasetSplit,
    profile: &ClassProfile,
    cfg: &TrainConfig,
) -> Result<StageTrace> {
    cfg.validate()?;
    let spec = ContrastSpec::new(cfg.variant, profile.tail_set.clone());
    let use_ood = cfg.uses_ood();
    let trainable = net.trainable_parameters(Stage::One)?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let per_epoch = steps_per_epoch(split.train_in.len(), cfg.batch_in);
    let total_steps = per_epoch * cfg.n1;
    let mut trace = StageTrace::default();
    let mut step = 0;
    for epoch in 0..cfg.n1 {
        let batches = mixed_batches(split, cfg.batch_in, cfg.batch_out, epoch_seed(cfg.seed, 1, epoch), use_ood)?;
        let mut sums = [0.0; 4];
        let lr_first = learning_rate(cfg.schedule, cfg.lr1, step, total_steps);
        for pair in &batches {
            let out_rows: &[usize] = if use_ood { &pair.out_rows } else { &[] };
            let n_in = pair.in_rows.len();
            let x = stack::<S>(&[(&split.train_in, &pair.in_rows), (&split.train_out, out_rows)])?;
            let labels = class_labels(&split.train_in, &pair.in_rows)?;
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, &trainable)?;
            let run = |tape: &mut Tape<S>| -> Result<_> {
                let xn = tape.constant(x);
                let out = net.forward_on_tape(tape, &bound, xn, Branch::Main, Mode::Train)?;
                let (in_logits, in_projection, out_logits, out_projection) = if out_rows.is_empty() {
                    (out.logits, out.projection, None, None)
                } else {
                    let total = n_in + out_rows.len();
                    let (ii, oi): (Vec<usize>, Vec<usize>) = ((0..n_in).collect(), (n_in..total).collect());
                    (
                        tape.gather_rows(out.logits, ii.clone())?,
                        tape.gather_rows(out.projection, ii)?,
                        Some(tape.gather_rows(out.logits, oi.clone())?),
                        Some(tape.gather_rows(out.projection, oi)?),
                    )
                };
                let batch = Stage1Batch { in_logits, in_projection, in_labels: &labels, out_logits, out_projection };
                let terms = stage1_loss(tape, &batch, &spec, &cfg.weights)?;
                tape.backward(terms.total)?;
                Ok((out, terms))
            };
            let (out, terms) = run(&mut tape).map_err(|e| diverged(1, epoch, step, e))?;
            let loss = tape.value(terms.total).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(PasclError::Divergence(format!("stage 1, epoch {epoch}, step {step}: loss {loss}")));
            }
            let value = |id: Option<crate::diffcore::NodeId>| id.map_or(0.0, |n| tape.value(n).data()[0].as_f64());
            sums[0] += loss;
            sums[1] += value(Some(terms.cross_entropy));
            sums[2] += value(terms.outlier);
            sums[3] += value(terms.contrastive);
            trace.contrast_counts.accumulate(terms.contrast_counts);

            let grads = gradients(&tape, &bound, &trainable);
            net.update_running_stats(&tape, &out, Branch::Main)?;
            let lr = learning_rate(cfg.schedule, cfg.lr1, step, total_steps);
            opt.step(net, &trainable, &grads, lr);
            step += 1;
        }
        let n = batches.len().max(1) as f64;
        trace.epochs.push(EpochLoss {
            stage: 1,
            epoch,
            loss: sums[0] / n,
            cross_entropy: Some(sums[1] / n),
            outlier: (cfg.weights.lambda1 > 0.0).then_some(sums[2] / n),
            contrastive: (cfg.weights.lambda2 > 0.0).then_some(sums[3] / n),
            lr: lr_first,
        });
    }
    net.mark_stage1_complete();
    Ok(trace)
}

/// Clones the main branch into the auxiliary one and finetunes it for
/// `cfg.n2` epochs on in-distribution data. `n2 = 0` leaves the network as is.
pub fn run_stage2<S: Real>(
    net: &mut DualBranchNetwork<S>,
    split: &DatasetSplit,
    profile: &ClassProfile,
    cfg: &TrainConfig,
) -> Result<StageTrace> {
    cfg.validate()?;
    let mut trace = StageTrace::default();
    if cfg.n2 == 0 {
        return Ok(trace);
    }
    if !net.stage1_complete() {
        return Err(PasclError::State("auxiliary finetuning requested before stage one".into()));
    }
    net.clone_aux_from_main();
    let trainable = net.trainable_parameters(Stage::Two)?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let total_steps = steps_per_epoch(split.train_in.len(), cfg.batch_in) * cfg.n2;
    let mut step = 0;
    for epoch in 0..cfg.n2 {
        let batches = in_batches(split.train_in.len(), cfg.batch_in, epoch_seed(cfg.seed, 2, epoch))?;
        let lr_first = learning_rate(cfg.schedule, cfg.lr2, step, total_steps);
        let mut sum = 0.0;
        for rows in &batches {
            let x = stack::<S>(&[(&split.train_in, rows)])?;
            let labels = class_labels(&split.train_in, rows)?;
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, &trainable)?;
            let run = |tape: &mut Tape<S>| -> Result<_> {
                let xn = tape.constant(x);
                let out = net.forward_on_tape(tape, &bound, xn, Branch::Aux, Mode::Train)?;
                let loss = logit_adjusted_ce(tape, out.logits, &labels, &profile.priors, cfg.weights.tau_la)?;
                tape.backward(loss)?;
                Ok((out, loss))
            };
            let (out, loss) = run(&mut tape).map_err(|e| diverged(2, epoch, step, e))?;
            sum += tape.value(loss).data()[0].as_f64();
            let grads = gradients(&tape, &bound, &trainable);
            net.update_running_stats(&tape, &out, Branch::Aux)?;
            let lr = learning_rate(cfg.schedule, cfg.lr2, step, total_steps);
            opt.step(net, &trainable, &grads, lr);
            step += 1;
        }
        let n = batches.len().max(1) as f64;
        trace.epochs.push(EpochLoss {
            stage: 2,
            epoch,
            loss: sum / n,
            cross_entropy: None,
            outlier: None,
            contrastive: None,
            lr: lr_first,
        });
    }
    Ok(trace)
}

fn argmax<S: Real>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scores `test_in ∪ test_out` with the main branch; class predictions come
/// from the auxiliary branch when `abf_enabled`, else from the main branch.
pub fn evaluate<S: Real>(
    net: &DualBranchNetwork<S>,
    split: &DatasetSplit,
    profile: &ClassProfile,
    score_fn: ScoreFn,
    abf_enabled: bool,
    seed: u64,
    config_hash: &str,
) -> Result<MetricsReport> {
    let in_rows: Vec<usize> = (0..split.test_in.len()).collect();
    let out_rows: Vec<usize> = (0..split.test_out.len()).collect();
    let x_in = stack::<S>(&[(&split.test_in, &in_rows)])?;
    let x_out = stack::<S>(&[(&split.test_out, &out_rows)])?;
    let main_in = net.forward(&x_in, Branch::Main)?;
    let main_out = net.forward(&x_out, Branch::Main)?;
    let class_logits = if abf_enabled { net.forward(&x_in, Branch::Aux)?.logits } else { main_in.logits.clone() };
    let in_scores = score_fn.score(&main_in.logits);
    let out_scores = score_fn.score(&main_out.logits);
    let truth = class_labels(&split.test_in, &in_rows)?;
    let mut examples: Vec<ScoredExample<S>> = in_scores
        .iter()
        .zip(class_logits.row_iter())
        .zip(&truth)
        .map(|((&s, row), &y)| ScoredExample::in_distribution(s, argmax(row), y))
        .collect();
    examples.extend(out_scores.iter().map(|&s| ScoredExample::ood(s)));
    compute_report(&examples, &profile.tail_set, seed, config_hash)
}

/// One evaluation inside a [`RunRecord`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub score_fn: ScoreFn,
    pub abf: bool,
    pub report: MetricsReport,
}

/// Reproducible summary of one run; wall-clock time is kept out of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub stage1: StageTrace,
    pub stage2: StageTrace,
    pub evaluations: Vec<Evaluation>,
}

impl RunRecord {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn evaluation(&self, score_fn: ScoreFn, abf: bool) -> Option<&MetricsReport> {
        self.evaluations
            .iter()
            .find(|e| e.score_fn == score_fn && e.abf == abf)
            .map(|e| &e.report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: RunRecord = serde_json::from_str(text).map_err(|e| PasclError::Data(format!("run record: {e}")))?;
        if r.format_version != Self::FORMAT_VERSION {
            return Err(PasclError::Data(format!("run record version {} is not supported", r.format_version)));
        }
        Ok(r)
    }

    pub fn summary_csv_header() -> String {
        format!("variant,k,lambda1,lambda2,score,abf,{}", MetricsReport::csv_header())
    }

    /// One CSV row per evaluation.
    pub fn summary_csv_rows(&self) -> Vec<String> {
        let t = &self.config.train;
        self.evaluations
            .iter()
            .map(|e| {
                format!(
                    "{},{},{},{},{},{},{}",
                    t.variant,
                    self.config.data.tail_fraction,
                    t.weights.lambda1,
                    t.weights.lambda2,
                    e.score_fn.as_str(),
                    u8::from(e.abf),
                    e.report.to_csv_row()
                )
            })
            .collect()
    }

    /// Stage-one and stage-two epochs as CSV, header included.
    pub fn loss_trace_csv(&self) -> String {
        let mut out = String::from(StageTrace::csv_header());
        out.push('\n');
        for row in self.stage1.csv_rows().into_iter().chain(self.stage2.csv_rows()) {
            out.push_str(&row);
            out.push('\n');
        }
        out
    }
}

/// A trained network with its stage traces.
#[derive(Clone, Debug)]
pub struct TrainedRun<S> {
    pub net: DualBranchNetwork<S>,
    pub stage1: StageTrace,
    pub stage2: StageTrace,
}

/// Builds a network for `split` and runs both stages.
pub fn train<S: Real>(cfg: &TrainConfig, profile: &ClassProfile, split: &DatasetSplit) -> Result<TrainedRun<S>> {
    let input_dim = split
        .train_in
        .first()
        .map(|e| e.features.len())
        .ok_or_else(|| PasclError::Data("training set is empty".into()))?;
    let mut net = DualBranchNetwork::new(cfg.net_config(input_dim, profile.classes()), cfg.seed)?;
    let stage1 = run_stage1(&mut net, split, profile, cfg)?;
    let stage2 = run_stage2(&mut net, split, profile, cfg)?;
    Ok(TrainedRun { net, stage1, stage2 })
}

/// Every score function, with and without ABF when the auxiliary branch exists.
pub fn evaluate_all<S: Real>(
    net: &DualBranchNetwork<S>,
    split: &DatasetSplit,
    profile: &ClassProfile,
    seed: u64,
    config_hash: &str,
) -> Result<Vec<Evaluation>> {
    let mut out = Vec::new();
    for score_fn in [ScoreFn::Msp, ScoreFn::Energy] {
        let abf_states: &[bool] = if net.aux_initialized() { &[false, true] } else { &[false] };
        for &abf in abf_states {
            let report = evaluate(net, split, profile, score_fn, abf, seed, config_hash)?;
            out.push(Evaluation { score_fn, abf, report });
        }
    }
    Ok(out)
}

/// Record, network and timing of one end-to-end run.
#[derive(Clone, Debug)]
pub struct RunOutcome<S> {
    pub record: RunRecord,
    pub net: DualBranchNetwork<S>,
    pub wall_clock: Duration,
}

/// Trains and evaluates on already loaded data.
pub fn run_on_data<S: Real>(
    cfg: &ExperimentConfig,
    profile: &ClassProfile,
    split: &DatasetSplit,
) -> Result<RunOutcome<S>> {
    cfg.validate()?;
    let start = Instant::now();
    let hash = cfg.hash();
    let run = train::<S>(&cfg.train, profile, split)?;
    let evaluations = evaluate_all(&run.net, split, profile, cfg.train.seed, &hash)?;
    let record = RunRecord {
        format_version: RunRecord::FORMAT_VERSION,
        config: cfg.clone(),
        config_hash: hash,
        seed: cfg.train.seed,
        stage1: run.stage1,
        stage2: run.stage2,
        evaluations,
    };
    Ok(RunOutcome { record, net: run.net, wall_clock: start.elapsed() })
}

/// Generates the synthetic benchmark, then trains and evaluates.
pub fn run_experiment<S: Real>(cfg: &ExperimentConfig) -> Result<RunOutcome<S>> {
    cfg.validate()?;
    let (profile, split) = generate_synthetic(&cfg.data)?;
    run_on_data(cfg, &profile, &split)
}

/// Writes penultimate features of `examples` with label, domain and tail columns.
pub fn export_embeddings<S: Real, W: Write>(
    net: &DualBranchNetwork<S>,
    examples: &[LabeledExample],
    branch: Branch,
    writer: W,
) -> Result<()> {
    let width = net.config().width;
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..width).map(|i| format!("h_{i}")).collect();
    header.extend(["label".into(), "domain".into(), "tail".into()]);
    w.write_record(&header).map_err(csv_err)?;
    if !examples.is_empty() {
        let rows: Vec<usize> = (0..examples.len()).collect();
        let h = net.forward(&stack::<S>(&[(examples, &rows)])?, branch)?.penultimate;
        for (e, row) in examples.iter().zip(h.row_iter()) {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{:.16e}", v.as_f64())).collect();
            rec.push(match e.label {
                Label::Class(c) => c.to_string(),
                Label::Ood => "OOD".into(),
            });
            rec.push(match e.domain {
                Domain::In => "IN".into(),
                Domain::Out => "OUT".into(),
            });
            rec.push(u8::from(e.tail).to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> PasclError {
    PasclError::Data(format!("csv: {e}"))
}
