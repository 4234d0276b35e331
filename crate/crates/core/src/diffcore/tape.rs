use std::fmt;

use super::tensor::TensorBuf;
use crate::error::{invalid, PasclError, Result};
use crate::scalar::Real;

/// Added under the square root of `row_l2_normalize`.
pub const L2_NORM_EPS: f64 = 1e-12;

/// Index of a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operations a tape can record.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive<S> {
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// `[m,n] -> [n,m]`
    Transpose,
    /// Same shape, or a `[n]`/`[1,n]` right operand added to every row.
    Add,
    ScaleByConstant(S),
    Relu,
    RowLogSoftmax,
    RowLogSumExp,
    /// Log-sum-exp over the entries whose mask flag is set; every row needs one.
    RowLogSumExpMasked(Vec<bool>),
    RowL2Normalize,
    Exp,
    Log,
    Sum,
    Mean,
    GatherRows(Vec<usize>),
    ConcatRows,
    /// Row-wise inner product of two equally shaped operands, `[m,n] -> [m,1]`.
    DotRows,
    /// Inputs `(x, gamma, beta)`; normalizes with the biased batch statistics.
    BatchNormTrain { eps: S },
    /// Inputs `(x, gamma, beta)`; normalizes with fixed statistics.
    BatchNormEval { mean: Vec<S>, var: Vec<S>, eps: S },
}

impl<S> Primitive<S> {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::ScaleByConstant(_) => "scale",
            Primitive::Relu => "relu",
            Primitive::RowLogSoftmax => "row_log_softmax",
            Primitive::RowLogSumExp => "row_logsumexp",
            Primitive::RowLogSumExpMasked(_) => "row_logsumexp_masked",
            Primitive::RowL2Normalize => "row_l2_normalize",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::ConcatRows => "concat_rows",
            Primitive::DotRows => "dot_rows",
            Primitive::BatchNormTrain { .. } => "batch_norm_train",
            Primitive::BatchNormEval { .. } => "batch_norm_eval",
        }
    }
}

#[derive(Clone, Debug)]
enum NodeKind<S> {
    Constant,
    Parameter,
    Op(Primitive<S>),
}

#[derive(Clone, Debug)]
struct Node<S> {
    kind: NodeKind<S>,
    inputs: Vec<NodeId>,
    value: TensorBuf<S>,
    /// Forward intermediates some backward rules reuse (batch-norm `xhat`, `1/std`).
    saved: Vec<S>,
}

/// Recorded computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every input reference points to
/// an earlier node and the record is a topological order by construction.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> fmt::Display for Tape<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, n) in self.nodes.iter().enumerate() {
            let name = match &n.kind {
                NodeKind::Constant => "const",
                NodeKind::Parameter => "param",
                NodeKind::Op(p) => p.name(),
            };
            let ins: Vec<usize> = n.inputs.iter().map(|id| id.0).collect();
            writeln!(f, "%{i} = {name}{ins:?} {:?}", n.value.dims())?;
        }
        Ok(())
    }
}

fn row_view(dims: &[usize]) -> Result<(usize, usize)> {
    match dims.len() {
        1 => Ok((1, dims[0])),
        2 => Ok((dims[0], dims[1])),
        _ => invalid(format!("row-wise primitive needs rank 1 or 2, got {dims:?}")),
    }
}

fn reduced_dims(dims: &[usize]) -> Vec<usize> {
    if dims.len() == 1 {
        vec![1]
    } else {
        vec![dims[0], 1]
    }
}

fn matrix(dims: &[usize], what: &str) -> Result<(usize, usize)> {
    if dims.len() != 2 {
        return invalid(format!("{what} needs a rank-2 operand, got {dims:?}"));
    }
    Ok((dims[0], dims[1]))
}

/// Per-column mean and biased variance of a `[batch, features]` matrix.
pub fn column_moments<S: Real>(data: &[S], rows: usize, cols: usize) -> (Vec<S>, Vec<S>) {
    let n = S::from_usize(rows).expect("row count fits the scalar");
    let mut mean = vec![S::zero(); cols];
    for r in 0..rows {
        for (m, &v) in mean.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![S::zero(); cols];
    for r in 0..rows {
        for ((s, &v), &m) in var.iter_mut().zip(&data[r * cols..(r + 1) * cols]).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

fn per_feature<S: Real>(buf: &TensorBuf<S>, features: usize, what: &str) -> Result<()> {
    if buf.numel() != features || buf.rows() != 1 {
        return invalid(format!(
            "{what} must be a [{features}] vector, got {:?}",
            buf.dims()
        ));
    }
    Ok(())
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input; it never receives a gradient of interest.
    pub fn constant(&mut self, value: TensorBuf<S>) -> NodeId {
        self.push_leaf(NodeKind::Constant, value)
    }

    /// Records a parameter input whose gradient `backward` fills in.
    pub fn parameter(&mut self, value: TensorBuf<S>) -> NodeId {
        self.push_leaf(NodeKind::Parameter, value)
    }

    fn push_leaf(&mut self, kind: NodeKind<S>, mut value: TensorBuf<S>) -> NodeId {
        value.clear_grad();
        self.nodes.push(Node { kind, inputs: Vec::new(), value, saved: Vec::new() });
        NodeId(self.nodes.len() - 1)
    }

    pub fn is_parameter(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].kind, NodeKind::Parameter)
    }

    pub fn parameters(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, NodeKind::Parameter))
            .map(|(i, _)| NodeId(i))
    }

    pub fn value(&self, id: NodeId) -> &TensorBuf<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].value.grad()
    }

    fn check_ref(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return invalid(format!("node %{} does not exist on this tape", id.0));
        }
        Ok(())
    }

    fn arity(prim: &Primitive<S>, got: usize) -> Result<()> {
        let ok = match prim {
            Primitive::MatMul | Primitive::Add | Primitive::DotRows => got == 2,
            Primitive::BatchNormTrain { .. } | Primitive::BatchNormEval { .. } => got == 3,
            Primitive::ConcatRows => got >= 1,
            _ => got == 1,
        };
        if ok {
            Ok(())
        } else {
            invalid(format!("{} does not accept {got} inputs", prim.name()))
        }
    }

    /// Evaluates `primitive` on `inputs` and appends the result.
    pub fn apply(&mut self, primitive: Primitive<S>, inputs: &[NodeId]) -> Result<NodeId> {
        Self::arity(&primitive, inputs.len())?;
        for &id in inputs {
            self.check_ref(id)?;
        }
        let (value, saved) = self.evaluate(&primitive, inputs)?;
        if !value.all_finite() {
            return Err(PasclError::NumericOverflow(format!(
                "{} produced a non-finite value",
                primitive.name()
            )));
        }
        self.nodes.push(Node {
            kind: NodeKind::Op(primitive),
            inputs: inputs.to_vec(),
            value,
            saved,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn evaluate(&self, prim: &Primitive<S>, inputs: &[NodeId]) -> Result<(TensorBuf<S>, Vec<S>)> {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let x = val(0);
        let out = match prim {
            Primitive::MatMul => {
                let (m, k) = matrix(x.dims(), "matmul")?;
                let (k2, n) = matrix(val(1).dims(), "matmul")?;
                if k != k2 {
                    return invalid(format!(
                        "matmul inner extents differ: {:?} x {:?}",
                        x.dims(),
                        val(1).dims()
                    ));
                }
                let out = matmul(x.data(), val(1).data(), m, k, n);
                TensorBuf::new(vec![m, n], out)?
            }
            Primitive::Transpose => {
                let (m, n) = matrix(x.dims(), "transpose")?;
                TensorBuf::new(vec![n, m], transpose(x.data(), m, n))?
            }
            Primitive::Add => {
                let y = val(1);
                if x.dims() == y.dims() {
                    let data = x.data().iter().zip(y.data()).map(|(&a, &b)| a + b).collect();
                    TensorBuf::new(x.dims().to_vec(), data)?
                } else if x.rank() == 2 && y.rows() == 1 && y.numel() == x.cols() {
                    let c = x.cols();
                    let data = x
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &a)| a + y.data()[i % c])
                        .collect();
                    TensorBuf::new(x.dims().to_vec(), data)?
                } else {
                    return invalid(format!("add shapes differ: {:?} + {:?}", x.dims(), y.dims()));
                }
            }
            Primitive::ScaleByConstant(c) => map(x, |v| v * *c),
            Primitive::Relu => map(x, |v| if v > S::zero() { v } else { S::zero() }),
            Primitive::Exp => map(x, S::exp),
            Primitive::Log => {
                if x.data().iter().any(|&v| v <= S::zero()) {
                    return Err(PasclError::NumericOverflow("log of a non-positive entry".into()));
                }
                map(x, S::ln)
            }
            Primitive::RowLogSoftmax => {
                let (r, c) = row_view(x.dims())?;
                let mut out = Vec::with_capacity(r * c);
                for row in x.row_iter() {
                    let lse = logsumexp(row.iter().copied());
                    out.extend(row.iter().map(|&v| v - lse));
                }
                TensorBuf::new(x.dims().to_vec(), out)?
            }
            Primitive::RowLogSumExp => {
                row_view(x.dims())?;
                let out = x.row_iter().map(|row| logsumexp(row.iter().copied())).collect();
                TensorBuf::new(reduced_dims(x.dims()), out)?
            }
            Primitive::RowLogSumExpMasked(mask) => {
                let (_, c) = row_view(x.dims())?;
                if mask.len() != x.numel() {
                    return invalid("mask length differs from the operand");
                }
                let mut out = Vec::with_capacity(x.rows());
                for (row, m) in x.row_iter().zip(mask.chunks(c)) {
                    if !m.iter().any(|&b| b) {
                        return invalid("masked logsumexp row has no active entry");
                    }
                    let active = row.iter().zip(m).filter(|(_, &b)| b).map(|(&v, _)| v);
                    out.push(logsumexp(active));
                }
                TensorBuf::new(reduced_dims(x.dims()), out)?
            }
            Primitive::RowL2Normalize => {
                row_view(x.dims())?;
                let eps = S::lit(L2_NORM_EPS);
                let mut out = Vec::with_capacity(x.numel());
                for row in x.row_iter() {
                    let norm = (row.iter().fold(S::zero(), |a, &v| a + v * v) + eps).sqrt();
                    out.extend(row.iter().map(|&v| v / norm));
                }
                TensorBuf::new(x.dims().to_vec(), out)?
            }
            Primitive::Sum => TensorBuf::scalar(x.data().iter().fold(S::zero(), |a, &v| a + v)),
            Primitive::Mean => {
                let n = S::from_usize(x.numel()).expect("count fits the scalar");
                TensorBuf::scalar(x.data().iter().fold(S::zero(), |a, &v| a + v) / n)
            }
            Primitive::GatherRows(idx) => {
                let (r, c) = matrix(x.dims(), "gather_rows")?;
                if idx.is_empty() {
                    return invalid("gather_rows needs at least one index");
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
                    return invalid(format!("gather_rows index {bad} out of {r} rows"));
                }
                let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
                TensorBuf::new(vec![idx.len(), c], data)?
            }
            Primitive::ConcatRows => {
                let (_, c) = matrix(x.dims(), "concat_rows")?;
                let mut rows = 0;
                let mut data = Vec::new();
                for i in 0..inputs.len() {
                    let (r, ci) = matrix(val(i).dims(), "concat_rows")?;
                    if ci != c {
                        return invalid("concat_rows operands differ in width");
                    }
                    rows += r;
                    data.extend_from_slice(val(i).data());
                }
                TensorBuf::new(vec![rows, c], data)?
            }
            Primitive::DotRows => {
                let y = val(1);
                if x.dims() != y.dims() {
                    return invalid(format!("dot_rows shapes differ: {:?} . {:?}", x.dims(), y.dims()));
                }
                row_view(x.dims())?;
                let out = x
                    .row_iter()
                    .zip(y.row_iter())
                    .map(|(a, b)| a.iter().zip(b).fold(S::zero(), |s, (&p, &q)| s + p * q))
                    .collect();
                TensorBuf::new(reduced_dims(x.dims()), out)?
            }
            Primitive::BatchNormTrain { eps } => {
                let (b, f) = matrix(x.dims(), "batch_norm")?;
                if b < 2 {
                    return invalid("batch norm in training mode needs at least 2 rows");
                }
                per_feature(val(1), f, "gamma")?;
                per_feature(val(2), f, "beta")?;
                let (mean, var) = column_moments(x.data(), b, f);
                let inv: Vec<S> = var.iter().map(|&v| S::one() / (v + *eps).sqrt()).collect();
                return Ok(bn_apply(x, val(1).data(), val(2).data(), &mean, &inv));
            }
            Primitive::BatchNormEval { mean, var, eps } => {
                let (_, f) = matrix(x.dims(), "batch_norm")?;
                per_feature(val(1), f, "gamma")?;
                per_feature(val(2), f, "beta")?;
                if mean.len() != f || var.len() != f {
                    return invalid("running statistics differ in width from the operand");
                }
                let inv: Vec<S> = var.iter().map(|&v| S::one() / (v + *eps).sqrt()).collect();
                return Ok(bn_apply(x, val(1).data(), val(2).data(), mean, &inv));
            }
        };
        Ok((out, Vec::new()))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every node on the tape receives a gradient buffer (zeros where the loss
    /// does not depend on it). Previous gradients are discarded, so repeated
    /// calls give identical results.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check_ref(loss)?;
        if !self.nodes[loss.0].value.is_scalar() {
            return invalid(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss.0].value.dims()
            ));
        }
        let mut adj: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if let NodeKind::Op(prim) = &self.nodes[i].kind {
                let contributions = self.input_grads(i, prim, &g);
                for (input, contrib) in self.nodes[i].inputs.iter().zip(contributions) {
                    let slot = &mut adj[input.0];
                    match slot {
                        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                        None => *slot = Some(contrib),
                    }
                }
            }
            adj[i] = Some(g);
        }
        for (node, a) in self.nodes.iter_mut().zip(adj) {
            let n = node.value.numel();
            node.value.set_grad(a.unwrap_or_else(|| vec![S::zero(); n]));
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, prim: &Primitive<S>, g: &[S]) -> Vec<Vec<S>> {
        let node = &self.nodes[i];
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        let out = &node.value;
        match prim {
            Primitive::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let (m, k) = (a.dims()[0], a.dims()[1]);
                let n = b.dims()[1];
                let bt = transpose(b.data(), k, n);
                let ga = matmul(g, &bt, m, n, k);
                let at = transpose(a.data(), m, k);
                let gb = matmul(&at, g, k, m, n);
                vec![ga, gb]
            }
            Primitive::Transpose => {
                let (m, n) = (inp(0).dims()[0], inp(0).dims()[1]);
                vec![transpose(g, n, m)]
            }
            Primitive::Add => {
                let (x, y) = (inp(0), inp(1));
                if x.dims() == y.dims() {
                    vec![g.to_vec(), g.to_vec()]
                } else {
                    let c = x.cols();
                    let mut gy = vec![S::zero(); c];
                    for row in g.chunks(c) {
                        gy.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    vec![g.to_vec(), gy]
                }
            }
            Primitive::ScaleByConstant(c) => vec![g.iter().map(|&v| v * *c).collect()],
            Primitive::Relu => vec![inp(0)
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gv)| if x > S::zero() { gv } else { S::zero() })
                .collect()],
            Primitive::Exp => vec![out.data().iter().zip(g).map(|(&y, &gv)| y * gv).collect()],
            Primitive::Log => vec![inp(0).data().iter().zip(g).map(|(&x, &gv)| gv / x).collect()],
            Primitive::RowLogSoftmax => {
                let c = out.cols();
                let mut gx = Vec::with_capacity(g.len());
                for (orow, grow) in out.data().chunks(c).zip(g.chunks(c)) {
                    let gsum = grow.iter().fold(S::zero(), |a, &v| a + v);
                    gx.extend(orow.iter().zip(grow).map(|(&y, &gv)| gv - y.exp() * gsum));
                }
                vec![gx]
            }
            Primitive::RowLogSumExp => {
                let x = inp(0);
                let c = x.cols();
                let mut gx = Vec::with_capacity(x.numel());
                for ((row, &lse), &gv) in x.data().chunks(c).zip(out.data()).zip(g) {
                    gx.extend(row.iter().map(|&v| gv * (v - lse).exp()));
                }
                vec![gx]
            }
            Primitive::RowLogSumExpMasked(mask) => {
                let x = inp(0);
                let c = x.cols();
                let mut gx = Vec::with_capacity(x.numel());
                for (((row, m), &lse), &gv) in
                    x.data().chunks(c).zip(mask.chunks(c)).zip(out.data()).zip(g)
                {
                    gx.extend(row.iter().zip(m).map(|(&v, &on)| {
                        if on {
                            gv * (v - lse).exp()
                        } else {
                            S::zero()
                        }
                    }));
                }
                vec![gx]
            }
            Primitive::RowL2Normalize => {
                let x = inp(0);
                let c = x.cols();
                let eps = S::lit(L2_NORM_EPS);
                let mut gx = Vec::with_capacity(x.numel());
                for ((xrow, yrow), grow) in x.data().chunks(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                    let norm = (xrow.iter().fold(S::zero(), |a, &v| a + v * v) + eps).sqrt();
                    let gy = yrow.iter().zip(grow).fold(S::zero(), |a, (&y, &gv)| a + y * gv);
                    gx.extend(yrow.iter().zip(grow).map(|(&y, &gv)| (gv - y * gy) / norm));
                }
                vec![gx]
            }
            Primitive::Sum => vec![vec![g[0]; inp(0).numel()]],
            Primitive::Mean => {
                let n = inp(0).numel();
                let share = g[0] / S::from_usize(n).expect("count fits the scalar");
                vec![vec![share; n]]
            }
            Primitive::GatherRows(idx) => {
                let x = inp(0);
                let c = x.cols();
                let mut gx = vec![S::zero(); x.numel()];
                for (&r, grow) in idx.iter().zip(g.chunks(c)) {
                    gx[r * c..(r + 1) * c].iter_mut().zip(grow).for_each(|(a, &v)| *a += v);
                }
                vec![gx]
            }
            Primitive::ConcatRows => {
                let mut offset = 0;
                node.inputs
                    .iter()
                    .map(|id| {
                        let n = self.nodes[id.0].value.numel();
                        let part = g[offset..offset + n].to_vec();
                        offset += n;
                        part
                    })
                    .collect()
            }
            Primitive::DotRows => {
                let (a, b) = (inp(0), inp(1));
                let c = a.cols();
                let mut ga = Vec::with_capacity(a.numel());
                let mut gb = Vec::with_capacity(b.numel());
                for ((arow, brow), &gv) in a.data().chunks(c).zip(b.data().chunks(c)).zip(g) {
                    ga.extend(brow.iter().map(|&v| gv * v));
                    gb.extend(arow.iter().map(|&v| gv * v));
                }
                vec![ga, gb]
            }
            Primitive::BatchNormTrain { .. } => {
                let (b, f) = (out.dims()[0], out.dims()[1]);
                let (xhat, inv) = node.saved.split_at(b * f);
                let gamma = inp(1).data();
                let (gg, gb) = bn_param_grads(g, xhat, f);
                let n = S::from_usize(b).expect("count fits the scalar");
                let mut sum_d = vec![S::zero(); f];
                let mut sum_dx = vec![S::zero(); f];
                for r in 0..b {
                    for j in 0..f {
                        let d = g[r * f + j] * gamma[j];
                        sum_d[j] += d;
                        sum_dx[j] += d * xhat[r * f + j];
                    }
                }
                let mut gx = vec![S::zero(); b * f];
                for r in 0..b {
                    for j in 0..f {
                        let d = g[r * f + j] * gamma[j];
                        gx[r * f + j] = inv[j] / n * (n * d - sum_d[j] - xhat[r * f + j] * sum_dx[j]);
                    }
                }
                vec![gx, gg, gb]
            }
            Primitive::BatchNormEval { .. } => {
                let (b, f) = (out.dims()[0], out.dims()[1]);
                let (xhat, inv) = node.saved.split_at(b * f);
                let gamma = inp(1).data();
                let (gg, gb) = bn_param_grads(g, xhat, f);
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * gamma[i % f] * inv[i % f])
                    .collect();
                vec![gx, gg, gb]
            }
        }
    }

    // Convenience wrappers over `apply`.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -S::one())?;
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        self.apply(Primitive::ScaleByConstant(c), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::RowLogSoftmax, &[a])
    }

    pub fn row_logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::RowLogSumExp, &[a])
    }

    pub fn row_logsumexp_masked(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        self.apply(Primitive::RowLogSumExpMasked(mask), &[a])
    }

    pub fn row_l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::RowL2Normalize, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        self.apply(Primitive::GatherRows(rows), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::ConcatRows, parts)
    }

    pub fn dot_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::DotRows, &[a, b])
    }
}

fn map<S: Real>(x: &TensorBuf<S>, f: impl Fn(S) -> S) -> TensorBuf<S> {
    let data = x.data().iter().map(|&v| f(v)).collect();
    TensorBuf::new(x.dims().to_vec(), data).expect("shape preserved")
}

/// Max-shifted log-sum-exp of a non-empty sequence.
pub(crate) fn logsumexp<S: Real>(values: impl Iterator<Item = S> + Clone) -> S {
    let max = values.clone().fold(S::neg_infinity(), S::max);
    if max.is_infinite() {
        return max;
    }
    let sum = values.fold(S::zero(), |a, v| a + (v - max).exp());
    max + sum.ln()
}

fn matmul<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose<S: Real>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn bn_apply<S: Real>(
    x: &TensorBuf<S>,
    gamma: &[S],
    beta: &[S],
    mean: &[S],
    inv: &[S],
) -> (TensorBuf<S>, Vec<S>) {
    let f = gamma.len();
    let mut xhat = Vec::with_capacity(x.numel());
    let mut out = Vec::with_capacity(x.numel());
    for (i, &v) in x.data().iter().enumerate() {
        let j = i % f;
        let h = (v - mean[j]) * inv[j];
        xhat.push(h);
        out.push(gamma[j] * h + beta[j]);
    }
    let mut saved = xhat;
    saved.extend_from_slice(inv);
    (TensorBuf::new(x.dims().to_vec(), out).expect("shape preserved"), saved)
}

fn bn_param_grads<S: Real>(g: &[S], xhat: &[S], f: usize) -> (Vec<S>, Vec<S>) {
    let mut gg = vec![S::zero(); f];
    let mut gb = vec![S::zero(); f];
    for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
        gg[i % f] += gv * h;
        gb[i % f] += gv;
    }
    (gg, gb)
}
