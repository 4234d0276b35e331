//! Feed-forward encoder with a main and an auxiliary branch of batch-norm and
//! classifier parameters.
//!
//! Each block is `relu(bn(x W + b))`. The shared affines and the projection head
//! serve both branches; only the batch-norm layers and the classifier exist
//! twice. The projection head reads the penultimate activations and has no
//! batch norm of its own.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{column_moments, NodeId, Primitive, Tape, TensorBuf};
use crate::error::{invalid, PasclError, Result};
use crate::scalar::Real;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

const INIT_STREAM: u64 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    Main,
    Aux,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Main => "main",
            Branch::Aux => "aux",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Batch statistics; running statistics of the active branch are updated.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
}

/// Training stage a parameter set is requested for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    One,
    Two,
}

/// Shape and batch-norm hyper-parameters of the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub proj_dim: usize,
    pub classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl NetConfig {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Self { input_dim, width: 64, depth: 3, proj_dim: 16, classes, bn_eps: 1e-5, bn_momentum: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(PasclError::Config(format!("{key}: {why}")));
        for (key, v) in [
            ("input_dim", self.input_dim),
            ("width", self.width),
            ("depth", self.depth),
            ("proj_dim", self.proj_dim),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1");
            }
        }
        if self.classes < 2 {
            return bad("classes", "must be at least 2");
        }
        if !(self.bn_eps > 0.0) || !self.bn_eps.is_finite() {
            return bad("bn_eps", "must be positive");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum", "must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Learnable scale and shift plus running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub eps: S,
    pub momentum: S,
}

impl<S: Real> BnParams<S> {
    /// `gamma = 1`, `beta = 0`, running mean 0 and running variance 1.
    pub fn new(features: usize, eps: S, momentum: S) -> Self {
        Self {
            gamma: vec![S::one(); features],
            beta: vec![S::zero(); features],
            running_mean: vec![S::zero(); features],
            running_var: vec![S::one(); features],
            eps,
            momentum,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.gamma.len();
        if self.beta.len() != f || self.running_mean.len() != f || self.running_var.len() != f {
            return invalid("batch-norm vectors differ in length");
        }
        if self.running_var.iter().any(|&v| !(v >= S::zero())) {
            return invalid("running variance must be >= 0");
        }
        if !(self.eps > S::zero()) || !(self.momentum > S::zero() && self.momentum <= S::one()) {
            return invalid("batch-norm eps must be > 0 and momentum in (0, 1]");
        }
        Ok(())
    }

    /// `r <- (1 - m) r + m s`, with the unbiased batch variance.
    pub fn update_running(&mut self, batch_mean: &[S], biased_var: &[S], batch: usize) {
        let m = self.momentum;
        let correction = S::lit(batch as f64 / (batch as f64 - 1.0));
        for (r, &s) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = (S::one() - m) * *r + m * s;
        }
        for (r, &s) in self.running_var.iter_mut().zip(biased_var) {
            *r = (S::one() - m) * *r + m * s * correction;
        }
    }

    fn apply_on_tape(&self, tape: &mut Tape<S>, x: NodeId, gamma: NodeId, beta: NodeId, mode: Mode) -> Result<NodeId> {
        let primitive = match mode {
            Mode::Train => Primitive::BatchNormTrain { eps: self.eps },
            Mode::Eval => Primitive::BatchNormEval {
                mean: self.running_mean.clone(),
                var: self.running_var.clone(),
                eps: self.eps,
            },
        };
        tape.apply(primitive, &[x, gamma, beta])
    }

    /// Normalizes with batch statistics and updates the running statistics.
    pub fn forward_train(&mut self, x: &TensorBuf<S>) -> Result<TensorBuf<S>> {
        let y = self.forward_mode(x, Mode::Train)?;
        let (b, f) = (x.rows(), x.cols());
        let (mean, var) = column_moments(x.data(), b, f);
        self.update_running(&mean, &var, b);
        Ok(y)
    }

    /// Normalizes with the running statistics.
    pub fn forward_eval(&self, x: &TensorBuf<S>) -> Result<TensorBuf<S>> {
        self.forward_mode(x, Mode::Eval)
    }

    fn forward_mode(&self, x: &TensorBuf<S>, mode: Mode) -> Result<TensorBuf<S>> {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let g = tape.constant(TensorBuf::vector(self.gamma.clone())?);
        let b = tape.constant(TensorBuf::vector(self.beta.clone())?);
        let y = self.apply_on_tape(&mut tape, xn, g, b, mode)?;
        Ok(tape.value(y).clone())
    }
}

/// `x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<S> {
    pub weight: TensorBuf<S>,
    pub bias: Vec<S>,
}

impl<S: Real> Affine<S> {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| S::lit(normal.sample(rng))).collect();
        Self {
            weight: TensorBuf::new(vec![fan_in, fan_out], data).expect("dims match data"),
            bias: vec![S::zero(); fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.dims()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<S> {
    pub affine: Affine<S>,
    pub bn_main: BnParams<S>,
    pub bn_aux: BnParams<S>,
}

impl<S> Block<S> {
    pub fn bn(&self, branch: Branch) -> &BnParams<S> {
        match branch {
            Branch::Main => &self.bn_main,
            Branch::Aux => &self.bn_aux,
        }
    }

    fn bn_mut(&mut self, branch: Branch) -> &mut BnParams<S> {
        match branch {
            Branch::Main => &mut self.bn_main,
            Branch::Aux => &mut self.bn_aux,
        }
    }
}

/// Names every learnable tensor of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    BlockWeight(usize),
    BlockBias(usize),
    BnGamma(Branch, usize),
    BnBeta(Branch, usize),
    /// Layer 0 or 1 of the projection head.
    ProjWeight(usize),
    ProjBias(usize),
    ClfWeight(Branch),
    ClfBias(Branch),
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::BlockWeight(i) => write!(f, "block{i}.weight"),
            ParamId::BlockBias(i) => write!(f, "block{i}.bias"),
            ParamId::BnGamma(b, i) => write!(f, "block{i}.bn_{b}.gamma"),
            ParamId::BnBeta(b, i) => write!(f, "block{i}.bn_{b}.beta"),
            ParamId::ProjWeight(i) => write!(f, "proj{i}.weight"),
            ParamId::ProjBias(i) => write!(f, "proj{i}.bias"),
            ParamId::ClfWeight(b) => write!(f, "clf_{b}.weight"),
            ParamId::ClfBias(b) => write!(f, "clf_{b}.bias"),
        }
    }
}

/// Outputs of one forward pass as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs<S> {
    pub logits: TensorBuf<S>,
    pub penultimate: TensorBuf<S>,
    /// Unit-norm rows.
    pub projection: TensorBuf<S>,
}

/// Outputs of one forward pass as tape nodes.
#[derive(Clone, Debug)]
pub struct TapeOutputs {
    pub logits: NodeId,
    pub penultimate: NodeId,
    pub projection: NodeId,
    /// Inputs to each block's batch norm, for running-statistic updates.
    pub bn_inputs: Vec<NodeId>,
}

/// Tape nodes bound to the network's parameters for one step.
pub type BoundParams = BTreeMap<ParamId, NodeId>;

#[derive(Clone, Debug, PartialEq)]
pub struct DualBranchNetwork<S> {
    config: NetConfig,
    blocks: Vec<Block<S>>,
    proj: [Affine<S>; 2],
    clf_main: Affine<S>,
    clf_aux: Affine<S>,
    aux_initialized: bool,
    stage1_complete: bool,
}

impl<S: Real> DualBranchNetwork<S> {
    /// Random He-normal weights, zero biases, identity batch norm. The auxiliary
    /// branch mirrors the main one but stays unusable until cloned.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let (eps, m) = (S::lit(config.bn_eps), S::lit(config.bn_momentum));
        let mut fan_in = config.input_dim;
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let bn = BnParams::new(config.width, eps, m);
            blocks.push(Block { affine: Affine::init(&mut rng, fan_in, config.width), bn_main: bn.clone(), bn_aux: bn });
            fan_in = config.width;
        }
        let proj = [
            Affine::init(&mut rng, config.width, config.width),
            Affine::init(&mut rng, config.width, config.proj_dim),
        ];
        let clf_main = Affine::init(&mut rng, config.width, config.classes);
        let clf_aux = clf_main.clone();
        Ok(Self { config, blocks, proj, clf_main, clf_aux, aux_initialized: false, stage1_complete: false })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block<S>] {
        &self.blocks
    }

    pub fn projection_head(&self) -> &[Affine<S>; 2] {
        &self.proj
    }

    pub fn classifier(&self, branch: Branch) -> &Affine<S> {
        match branch {
            Branch::Main => &self.clf_main,
            Branch::Aux => &self.clf_aux,
        }
    }

    pub fn aux_initialized(&self) -> bool {
        self.aux_initialized
    }

    pub fn stage1_complete(&self) -> bool {
        self.stage1_complete
    }

    pub fn mark_stage1_complete(&mut self) {
        self.stage1_complete = true;
    }

    fn check_branch(&self, branch: Branch) -> Result<()> {
        if branch == Branch::Aux && !self.aux_initialized {
            return Err(PasclError::State("auxiliary branch used before clone_aux_from_main".into()));
        }
        Ok(())
    }

    /// Copies the main batch-norm layers and classifier into the auxiliary branch.
    pub fn clone_aux_from_main(&mut self) {
        for block in &mut self.blocks {
            block.bn_aux = block.bn_main.clone();
        }
        self.clf_aux = self.clf_main.clone();
        self.aux_initialized = true;
    }

    /// Parameters optimized in a stage, in a fixed order.
    pub fn trainable_parameters(&self, stage: Stage) -> Result<Vec<ParamId>> {
        let depth = self.blocks.len();
        let ids = match stage {
            Stage::One => {
                let mut ids = Vec::new();
                for i in 0..depth {
                    ids.extend([
                        ParamId::BlockWeight(i),
                        ParamId::BlockBias(i),
                        ParamId::BnGamma(Branch::Main, i),
                        ParamId::BnBeta(Branch::Main, i),
                    ]);
                }
                ids.extend([ParamId::ProjWeight(0), ParamId::ProjBias(0), ParamId::ProjWeight(1), ParamId::ProjBias(1)]);
                ids.extend([ParamId::ClfWeight(Branch::Main), ParamId::ClfBias(Branch::Main)]);
                ids
            }
            Stage::Two => {
                self.check_branch(Branch::Aux)?;
                let mut ids = Vec::new();
                for i in 0..depth {
                    ids.extend([ParamId::BnGamma(Branch::Aux, i), ParamId::BnBeta(Branch::Aux, i)]);
                }
                ids.extend([ParamId::ClfWeight(Branch::Aux), ParamId::ClfBias(Branch::Aux)]);
                ids
            }
        };
        Ok(ids)
    }

    /// Every parameter of the network, both branches included.
    pub fn all_parameters(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for i in 0..self.blocks.len() {
            ids.extend([ParamId::BlockWeight(i), ParamId::BlockBias(i)]);
            for b in [Branch::Main, Branch::Aux] {
                ids.extend([ParamId::BnGamma(b, i), ParamId::BnBeta(b, i)]);
            }
        }
        ids.extend([ParamId::ProjWeight(0), ParamId::ProjBias(0), ParamId::ProjWeight(1), ParamId::ProjBias(1)]);
        for b in [Branch::Main, Branch::Aux] {
            ids.extend([ParamId::ClfWeight(b), ParamId::ClfBias(b)]);
        }
        ids
    }

    pub fn param_dims(&self, id: ParamId) -> Vec<usize> {
        match id {
            ParamId::BlockWeight(i) => self.blocks[i].affine.weight.dims().to_vec(),
            ParamId::ProjWeight(i) => self.proj[i].weight.dims().to_vec(),
            ParamId::ClfWeight(b) => self.classifier(b).weight.dims().to_vec(),
            _ => vec![self.param(id).len()],
        }
    }

    pub fn param(&self, id: ParamId) -> &[S] {
        match id {
            ParamId::BlockWeight(i) => self.blocks[i].affine.weight.data(),
            ParamId::BlockBias(i) => &self.blocks[i].affine.bias,
            ParamId::BnGamma(b, i) => &self.blocks[i].bn(b).gamma,
            ParamId::BnBeta(b, i) => &self.blocks[i].bn(b).beta,
            ParamId::ProjWeight(i) => self.proj[i].weight.data(),
            ParamId::ProjBias(i) => &self.proj[i].bias,
            ParamId::ClfWeight(b) => self.classifier(b).weight.data(),
            ParamId::ClfBias(b) => &self.classifier(b).bias,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut [S] {
        match id {
            ParamId::BlockWeight(i) => self.blocks[i].affine.weight.data_mut(),
            ParamId::BlockBias(i) => &mut self.blocks[i].affine.bias,
            ParamId::BnGamma(b, i) => &mut self.blocks[i].bn_mut(b).gamma,
            ParamId::BnBeta(b, i) => &mut self.blocks[i].bn_mut(b).beta,
            ParamId::ProjWeight(i) => self.proj[i].weight.data_mut(),
            ParamId::ProjBias(i) => &mut self.proj[i].bias,
            ParamId::ClfWeight(b) => match b {
                Branch::Main => self.clf_main.weight.data_mut(),
                Branch::Aux => self.clf_aux.weight.data_mut(),
            },
            ParamId::ClfBias(b) => match b {
                Branch::Main => &mut self.clf_main.bias,
                Branch::Aux => &mut self.clf_aux.bias,
            },
        }
    }

    /// Number of scalars in a parameter set.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.param(id).len()).sum()
    }

    /// Puts every parameter on `tape`; those in `trainable` become parameter
    /// nodes, the rest constants.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: &[ParamId]) -> Result<BoundParams> {
        let mut bound = BTreeMap::new();
        for id in self.all_parameters() {
            let value = TensorBuf::new(self.param_dims(id), self.param(id).to_vec())?;
            let node = if trainable.contains(&id) { tape.parameter(value) } else { tape.constant(value) };
            bound.insert(id, node);
        }
        Ok(bound)
    }

    /// Builds the forward pass on `tape`. Running statistics are left alone;
    /// see [`DualBranchNetwork::update_running_stats`].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        x: NodeId,
        branch: Branch,
        mode: Mode,
    ) -> Result<TapeOutputs> {
        self.check_branch(branch)?;
        let dims = tape.value(x).dims().to_vec();
        if dims.len() != 2 || dims[1] != self.config.input_dim {
            return invalid(format!("input {dims:?} does not match input width {}", self.config.input_dim));
        }
        let node = |id: ParamId| bound.get(&id).copied().ok_or_else(|| PasclError::State(format!("{id} not bound")));
        let mut h = x;
        let mut bn_inputs = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let a = tape.matmul(h, node(ParamId::BlockWeight(i))?)?;
            let a = tape.add(a, node(ParamId::BlockBias(i))?)?;
            bn_inputs.push(a);
            let gamma = node(ParamId::BnGamma(branch, i))?;
            let beta = node(ParamId::BnBeta(branch, i))?;
            let n = block.bn(branch).apply_on_tape(tape, a, gamma, beta, mode)?;
            h = tape.relu(n)?;
        }
        let logits = tape.matmul(h, node(ParamId::ClfWeight(branch))?)?;
        let logits = tape.add(logits, node(ParamId::ClfBias(branch))?)?;
        let p = tape.matmul(h, node(ParamId::ProjWeight(0))?)?;
        let p = tape.add(p, node(ParamId::ProjBias(0))?)?;
        let p = tape.relu(p)?;
        let p = tape.matmul(p, node(ParamId::ProjWeight(1))?)?;
        let p = tape.add(p, node(ParamId::ProjBias(1))?)?;
        let projection = tape.row_l2_normalize(p)?;
        Ok(TapeOutputs { logits, penultimate: h, projection, bn_inputs })
    }

    /// Momentum update of `branch`'s running statistics from a TRAIN forward.
    pub fn update_running_stats(&mut self, tape: &Tape<S>, outputs: &TapeOutputs, branch: Branch) -> Result<()> {
        self.check_branch(branch)?;
        if outputs.bn_inputs.len() != self.blocks.len() {
            return invalid("forward outputs belong to a different network");
        }
        for (block, &node) in self.blocks.iter_mut().zip(&outputs.bn_inputs) {
            let v = tape.value(node);
            let (mean, var) = column_moments(v.data(), v.rows(), v.cols());
            block.bn_mut(branch).update_running(&mean, &var, v.rows());
        }
        Ok(())
    }

    fn run(&self, x: &TensorBuf<S>, branch: Branch, mode: Mode) -> Result<(Tape<S>, TapeOutputs)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[])?;
        let xn = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, &bound, xn, branch, mode)?;
        Ok((tape, out))
    }

    fn collect(tape: &Tape<S>, out: &TapeOutputs) -> ForwardOutputs<S> {
        ForwardOutputs {
            logits: tape.value(out.logits).clone(),
            penultimate: tape.value(out.penultimate).clone(),
            projection: tape.value(out.projection).clone(),
        }
    }

    /// EVAL-mode forward; never mutates the network.
    pub fn forward(&self, x: &TensorBuf<S>, branch: Branch) -> Result<ForwardOutputs<S>> {
        let (tape, out) = self.run(x, branch, Mode::Eval)?;
        Ok(Self::collect(&tape, &out))
    }

    /// TRAIN-mode forward; updates only `branch`'s running statistics.
    pub fn forward_train(&mut self, x: &TensorBuf<S>, branch: Branch) -> Result<ForwardOutputs<S>> {
        let (tape, out) = self.run(x, branch, Mode::Train)?;
        self.update_running_stats(&tape, &out, branch)?;
        Ok(Self::collect(&tape, &out))
    }

    /// Sum of squared differences between main and auxiliary parameters and
    /// running statistics.
    pub fn branch_distance(&self) -> f64 {
        let sq = |a: &[S], b: &[S]| a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>();
        let mut d = sq(self.clf_main.weight.data(), self.clf_aux.weight.data()) + sq(&self.clf_main.bias, &self.clf_aux.bias);
        for b in &self.blocks {
            d += sq(&b.bn_main.gamma, &b.bn_aux.gamma)
                + sq(&b.bn_main.beta, &b.bn_aux.beta)
                + sq(&b.bn_main.running_mean, &b.bn_aux.running_mean)
                + sq(&b.bn_main.running_var, &b.bn_aux.running_var);
        }
        d
    }

    /// SHA-256 over the bit patterns of every stage-one parameter and the main
    /// running statistics.
    pub fn stage1_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |v: &[S]| {
            for x in v {
                h.update(x.as_f64().to_bits().to_le_bytes());
            }
        };
        for id in self.trainable_parameters(Stage::One).expect("stage one is always available") {
            feed(self.param(id));
        }
        for b in &self.blocks {
            feed(&b.bn_main.running_mean);
            feed(&b.bn_main.running_var);
        }
        hex::encode(h.finalize())
    }
}
