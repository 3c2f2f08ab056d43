//! Tape-based reverse-mode differentiation.
//!
//! Every forward operator appends a node holding its output value and enough
//! context to replay the adjoint. [`Tape::backward`] walks the nodes in exact
//! reverse order, so a value's gradient is complete before it is consumed.

use std::collections::HashMap;
use std::str::FromStr;

use rand::Rng;

use crate::array::{matmul_at_into, matmul_bt_into, matmul_into, DenseArray};
use crate::error::{NumError, Result};
use crate::params::{ParamId, ParamStore};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-12;
/// Variance stabilizer used by [`Tape::layer_norm_rows`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl FromStr for Activation {
    type Err = NumError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            other => Err(NumError::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Cross entropy of `softmax(pred)` against a target distribution.
    CeSoftmax,
    /// Mean binary cross entropy; `pred` holds probabilities.
    Bce,
    /// Mean squared error.
    Mse,
}

impl FromStr for LossKind {
    type Err = NumError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce_softmax" => Ok(Self::CeSoftmax),
            "bce" => Ok(Self::Bce),
            "mse" => Ok(Self::Mse),
            other => Err(NumError::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Matmul(Var, Var),
    MatmulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    ScaleConst(Var, f64),
    Act(Activation, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    ScaleRows(Var, Var),
    MeanPoolRows(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    AddN(Vec<Var>),
    SumAll(Var),
    Loss {
        kind: LossKind,
        pred: Var,
        target: DenseArray,
        /// softmax probabilities (ce) or clamped probabilities (bce)
        aux: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "constant",
            Op::Param(_) => "param",
            Op::Matmul(..) => "matmul",
            Op::MatmulBt(..) => "matmul_bt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::ScaleConst(..) => "scale",
            Op::Act(kind, _) => match kind {
                Activation::Sigmoid => "sigmoid",
                Activation::Tanh => "tanh",
                Activation::Relu => "relu",
            },
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm_rows",
            Op::Dropout(..) => "dropout",
            Op::ScaleRows(..) => "scale_rows",
            Op::MeanPoolRows(_) => "mean_pool_rows",
            Op::Reshape(_) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::GatherCols(..) => "gather_cols",
            Op::Concat(_) => "concat",
            Op::StackRows(_) => "stack_rows",
            Op::AddN(_) => "add_n",
            Op::SumAll(_) => "sum_all",
            Op::Loss { .. } => "loss",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: DenseArray,
    op: Op,
}

/// Gradients of one scalar with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<DenseArray> {
        self.grads[var.0]
            .as_ref()
            .map(|g| DenseArray::from_parts(self.shapes[var.0].clone(), g.clone()))
    }
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &DenseArray {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.values()[0]
    }

    /// First recorded value holding NaN or ±∞, with the producing op's name.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.all_finite())
            .map(|i| (Var(i), self.nodes[i].op.name()))
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: DenseArray, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a trainable parameter. Repeated calls for the same id return
    /// the same node, so gradient fan-out accumulates in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    /// `a · bᵀ` for matrices `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(NumError::dim("matmul_bt", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        matmul_bt_into(av.values(), bv.values(), &mut out, m, k, n);
        Ok(self.push(DenseArray::from_parts(vec![m, n], out), Op::MatmulBt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(NumError::dim("transpose", self.shape(a), &[0, 0]));
        }
        let value = self.value(a).transpose();
        Ok(self.push(value, Op::Transpose(a)))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DenseArray> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NumError::dim(name, av.shape(), bv.shape()));
        }
        let values = av
            .values()
            .iter()
            .zip(bv.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(DenseArray::from_parts(av.shape().to_vec(), values))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a length-c bias to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape().len() != 1 || bv.len() != xv.cols() {
            return Err(NumError::dim("add_row_bias", xv.shape(), bv.shape()));
        }
        let c = xv.cols();
        let mut values = xv.values().to_vec();
        for row in values.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.values()) {
                *o += b;
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(DenseArray::from_parts(shape, values), Op::AddRowBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|v| v * c);
        self.push(v, Op::ScaleConst(x, c))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let v = self.value(x).map(|v| kind.apply(v));
        self.push(v, Op::Act(kind, x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    /// Row-wise softmax with max subtraction. A rank-1 input is one row.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut values = xv.values().to_vec();
        for row in values.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = xv.shape().to_vec();
        self.push(DenseArray::from_parts(shape, values), Op::SoftmaxRows(x))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if c < 2 {
            return Err(NumError::dim("layer_norm_rows", xv.shape(), &[2]));
        }
        if gv.len() != c || bv.len() != c {
            return Err(NumError::dim("layer_norm_rows", xv.shape(), gv.shape()));
        }
        let r = xv.rows();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.values()[j] + bv.values()[j];
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(
            DenseArray::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Inverted dropout. Eval mode (or `rate == 0`) is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: DropoutMode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumError::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        let n = self.value(x).len();
        let mask = if mode == DropoutMode::Eval || rate == 0.0 {
            vec![1.0; n]
        } else {
            let keep = 1.0 / (1.0 - rate);
            (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect::<Vec<_>>()
        };
        let xv = self.value(x);
        let values = xv.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(DenseArray::from_parts(shape, values), Op::Dropout(x, mask)))
    }

    /// Row i of the result is `x[i]` times row i of `w`.
    pub fn scale_rows(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        if wv.shape().len() != 2 || xv.len() != wv.rows() {
            return Err(NumError::dim("scale_rows", wv.shape(), xv.shape()));
        }
        let c = wv.cols();
        let mut values = wv.values().to_vec();
        for (row, &s) in values.chunks_mut(c).zip(xv.values()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let shape = wv.shape().to_vec();
        Ok(self.push(DenseArray::from_parts(shape, values), Op::ScaleRows(w, x)))
    }

    /// Column-wise mean, returned as a rank-1 array.
    pub fn mean_pool_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if r == 0 {
            return Err(NumError::EmptyInput("mean_pool_rows"));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        Ok(self.push(DenseArray::from_parts(vec![c], out), Op::MeanPoolRows(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Selects rows `idx` of a matrix, in the given order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= xv.rows()) {
            return Err(NumError::dim("gather_rows", xv.shape(), &[idx.len()]));
        }
        let c = xv.cols();
        let mut values = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            values.extend_from_slice(xv.row(i));
        }
        Ok(self.push(
            DenseArray::from_parts(vec![idx.len(), c], values),
            Op::GatherRows(x, idx.to_vec()),
        ))
    }

    /// Selects columns `idx` of a matrix, in the given order.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || idx.is_empty() || idx.iter().any(|&j| j >= xv.cols()) {
            return Err(NumError::dim("gather_cols", xv.shape(), &[idx.len()]));
        }
        let r = xv.rows();
        let mut values = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = xv.row(i);
            values.extend(idx.iter().map(|&j| row[j]));
        }
        Ok(self.push(
            DenseArray::from_parts(vec![r, idx.len()], values),
            Op::GatherCols(x, idx.to_vec()),
        ))
    }

    /// Concatenates the flattened values of `parts` into one rank-1 array.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumError::EmptyInput("concat"));
        }
        let mut values = Vec::new();
        for &p in parts {
            values.extend_from_slice(self.value(p).values());
        }
        let n = values.len();
        Ok(self.push(DenseArray::from_parts(vec![n], values), Op::Concat(parts.to_vec())))
    }

    /// Stacks equal-length rank-1 arrays into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or(NumError::EmptyInput("stack_rows"))?;
        let c = self.value(*first).len();
        let mut values = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            let rv = self.value(r);
            if rv.len() != c {
                return Err(NumError::dim("stack_rows", &[c], rv.shape()));
            }
            values.extend_from_slice(rv.values());
        }
        Ok(self.push(
            DenseArray::from_parts(vec![rows.len(), c], values),
            Op::StackRows(rows.to_vec()),
        ))
    }

    /// Elementwise sum of same-shaped values.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let first = terms.first().ok_or(NumError::EmptyInput("add_n"))?;
        let shape = self.shape(*first).to_vec();
        let mut values = vec![0.0; self.value(*first).len()];
        for &t in terms {
            let tv = self.value(t);
            if tv.shape() != shape.as_slice() {
                return Err(NumError::dim("add_n", &shape, tv.shape()));
            }
            for (o, v) in values.iter_mut().zip(tv.values()) {
                *o += v;
            }
        }
        Ok(self.push(DenseArray::from_parts(shape, values), Op::AddN(terms.to_vec())))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(DenseArray::scalar(s), Op::SumAll(x))
    }

    /// Mean of scalar values.
    pub fn mean_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let total = self.add_n(terms)?;
        Ok(self.scale(total, 1.0 / terms.len() as f64))
    }

    pub fn loss(&mut self, kind: LossKind, pred: Var, target: &DenseArray) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(NumError::dim("loss", pv.shape(), target.shape()));
        }
        let n = pv.len() as f64;
        let (loss, aux) = match kind {
            LossKind::CeSoftmax => {
                let total: f64 = target.values().iter().sum();
                if target.values().iter().any(|&t| t < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return Err(NumError::Validation(format!(
                        "ce_softmax target must be a distribution (sum {total})"
                    )));
                }
                let mut p = pv.values().to_vec();
                softmax_in_place(&mut p);
                let loss = -p
                    .iter()
                    .zip(target.values())
                    .filter(|(_, &t)| t != 0.0)
                    .map(|(&q, &t)| t * q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln())
                    .sum::<f64>();
                (loss, p)
            }
            LossKind::Bce => {
                if target.values().iter().any(|t| !(0.0..=1.0).contains(t)) {
                    return Err(NumError::Validation("bce target outside [0,1]".into()));
                }
                let p: Vec<f64> = pv
                    .values()
                    .iter()
                    .map(|q| q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
                    .collect();
                let loss = p
                    .iter()
                    .zip(target.values())
                    .map(|(&q, &t)| -(t * q.ln() + (1.0 - t) * (1.0 - q).ln()))
                    .sum::<f64>()
                    / n;
                (loss, p)
            }
            LossKind::Mse => {
                let loss = pv
                    .values()
                    .iter()
                    .zip(target.values())
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum::<f64>()
                    / n;
                (loss, Vec::new())
            }
        };
        Ok(self.push(
            DenseArray::scalar(loss),
            Op::Loss {
                kind,
                pred,
                target: target.clone(),
                aux,
            },
        ))
    }

    /// Reverse sweep from a scalar `output`. Parameter gradients are added to
    /// the matching entries of `store`.
    pub fn backward(&self, output: Var, store: &mut ParamStore) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(NumError::Contract("output is not recorded on this tape".into()));
        }
        if self.value(output).len() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads, store)?;
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) -> Result<()> {
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, &self.nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let p = store.get_mut(*id);
                for (dst, src) in p.gradient.values_mut().iter_mut().zip(g) {
                    *dst += src;
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                matmul_bt_into(g, bv.values(), acc!(*a), m, n, k);
                matmul_at_into(av.values(), g, acc!(*b), m, k, n);
            }
            Op::MatmulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                matmul_into(g, bv.values(), acc!(*a), m, n, k);
                matmul_at_into(g, av.values(), acc!(*b), m, n, k);
            }
            Op::Transpose(a) => {
                let av = self.value(*a);
                let (r, c) = (av.rows(), av.cols());
                let da = acc!(*a);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc!(*a), g);
                add_into(acc!(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(acc!(*a), g);
                acc!(*b).iter_mut().zip(g).for_each(|(d, s)| *d -= s);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(bv))
                    .for_each(|(d, (s, y))| *d += s * y);
                acc!(*b)
                    .iter_mut()
                    .zip(g.iter().zip(av))
                    .for_each(|(d, (s, x))| *d += s * x);
            }
            Op::AddRowBias(x, bias) => {
                add_into(acc!(*x), g);
                let c = self.value(*bias).len();
                let db = acc!(*bias);
                for row in g.chunks(c) {
                    add_into(db, row);
                }
            }
            Op::ScaleConst(x, c) => {
                acc!(*x).iter_mut().zip(g).for_each(|(d, s)| *d += s * c);
            }
            Op::Act(kind, x) => {
                let y = node.value.values();
                let xv = self.value(*x).values();
                let dx = acc!(*x);
                for i in 0..g.len() {
                    let local = match kind {
                        Activation::Sigmoid => y[i] * (1.0 - y[i]),
                        Activation::Tanh => 1.0 - y[i] * y[i],
                        Activation::Relu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    dx[i] += g[i] * local;
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.values();
                let c = node.value.cols();
                let dx = acc!(*x);
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gv = self.value(*gain).values().to_vec();
                {
                    let dg = acc!(*gain);
                    for (hr, gr) in xhat.chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            dg[j] += hr[j] * gr[j];
                        }
                    }
                }
                {
                    let db = acc!(*bias);
                    for gr in g.chunks(c) {
                        add_into(db, gr);
                    }
                }
                let dx = acc!(*x);
                for (i, ((hr, gr), dr)) in xhat
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(dx.chunks_mut(c))
                    .enumerate()
                {
                    let dh: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                    let mean_dh = dh.iter().sum::<f64>() / c as f64;
                    let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dr[j] += rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
            Op::Dropout(x, mask) => {
                acc!(*x)
                    .iter_mut()
                    .zip(g.iter().zip(mask))
                    .for_each(|(d, (s, m))| *d += s * m);
            }
            Op::ScaleRows(w, x) => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let c = wv.cols();
                {
                    let dw = acc!(*w);
                    for ((dr, gr), &s) in dw.chunks_mut(c).zip(g.chunks(c)).zip(xv.values()) {
                        if s != 0.0 {
                            dr.iter_mut().zip(gr).for_each(|(d, v)| *d += v * s);
                        }
                    }
                }
                let dx = acc!(*x);
                for (i, (gr, wr)) in g.chunks(c).zip(wv.values().chunks(c)).enumerate() {
                    dx[i] += gr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::MeanPoolRows(x) => {
                let r = self.value(*x).rows() as f64;
                let c = g.len();
                for dr in acc!(*x).chunks_mut(c) {
                    dr.iter_mut().zip(g).for_each(|(d, s)| *d += s / r);
                }
            }
            Op::Reshape(x) => add_into(acc!(*x), g),
            Op::GatherRows(x, idx) => {
                let c = node.value.cols();
                let dx = acc!(*x);
                for (&i, gr) in idx.iter().zip(g.chunks(c)) {
                    add_into(&mut dx[i * c..(i + 1) * c], gr);
                }
            }
            Op::GatherCols(x, idx) => {
                let c = self.value(*x).cols();
                let k = idx.len();
                let dx = acc!(*x);
                for (i, gr) in g.chunks(k).enumerate() {
                    for (&j, v) in idx.iter().zip(gr) {
                        dx[i * c + j] += v;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    add_into(acc!(p), &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::StackRows(rows) => {
                let c = node.value.cols();
                for (&r, gr) in rows.iter().zip(g.chunks(c)) {
                    add_into(acc!(r), gr);
                }
            }
            Op::AddN(terms) => {
                for &t in terms {
                    add_into(acc!(t), g);
                }
            }
            Op::SumAll(x) => {
                let s = g[0];
                acc!(*x).iter_mut().for_each(|d| *d += s);
            }
            Op::Loss {
                kind,
                pred,
                target,
                aux,
            } => {
                let s = g[0];
                let t = target.values();
                let dp = acc!(*pred);
                match kind {
                    LossKind::CeSoftmax => {
                        for i in 0..dp.len() {
                            dp[i] += s * (aux[i] - t[i]);
                        }
                    }
                    LossKind::Bce => {
                        let n = dp.len() as f64;
                        for i in 0..dp.len() {
                            let q = aux[i];
                            dp[i] += s * (-t[i] / q + (1.0 - t[i]) / (1.0 - q)) / n;
                        }
                    }
                    LossKind::Mse => {
                        let pv = self.nodes[pred.0].value.values();
                        let n = dp.len() as f64;
                        for i in 0..dp.len() {
                            dp[i] += s * 2.0 * (pv[i] - t[i]) / n;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let n = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
