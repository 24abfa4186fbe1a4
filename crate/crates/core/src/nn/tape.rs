//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in exact reverse order and accumulates gradients into the
//! inputs of each node that requires them. Parameters enter the tape through
//! [`Tape::param`], which records the leaf once per tape so that reuse across
//! timesteps sums into a single gradient.

use std::collections::{HashMap, HashSet};

use super::contrast::{contrast, ContrastKind};
use super::tensor::gemm_acc;
use super::{NnError, ParamId, Parameter, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pooling extent along the time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolWindow {
    /// Non-overlapping windows of this many steps.
    Size(usize),
    /// Collapse the whole time axis.
    Full,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    SliceCols { input: Var, start: usize },
    TimeStep { input: Var, t: usize },
    SliceTime { input: Var, start: usize },
    StackTime(Vec<Var>),
    Reshape(Var),
    Conv1d { input: Var, weight: Var, kernel: usize, dilation: usize },
    MaxPoolTime { input: Var, argmax: Vec<usize> },
    SoftmaxRows(Var),
    Mix { weights: Var, experts: Vec<Var> },
    L1Loss { pred: Var, target: Tensor },
    Sum(Var),
    Mean(Var),
    Contrast { r: Var, r2: Var, kind: ContrastKind },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; never share one mutably.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn for_param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient reaching an arbitrary node, if any.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }

    /// Node indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> NnError {
    NnError::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<(), NnError> {
    if t.rank() != rank {
        return Err(NnError::InvalidInput(format!(
            "{op} expects a rank-{rank} tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Output time length of a pooling pass.
pub fn pooled_len(time: usize, window: PoolWindow, drop_remainder: bool) -> usize {
    match window {
        PoolWindow::Full => 1,
        PoolWindow::Size(w) if drop_remainder => (time / w).max(1),
        PoolWindow::Size(w) => time.div_ceil(w),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Reads a parameter; repeated calls on one tape return the same leaf.
    /// Parameters marked with [`Tape::freeze`] enter as constants.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let trainable = !self.frozen.contains(&p.id());
        let op = if trainable { Op::Param } else { Op::Constant };
        let v = self.push(p.value().clone(), op, trainable);
        self.params.insert(p.id(), v);
        v
    }

    /// Makes later [`Tape::param`] reads of `p` gradient-free. Must precede
    /// the first read.
    pub fn freeze(&mut self, p: &Parameter) {
        debug_assert!(!self.params.contains_key(&p.id()), "freeze after first read");
        self.frozen.insert(p.id());
    }

    /// Reads a parameter as a constant: no gradient flows back to it.
    pub fn frozen(&mut self, p: &Parameter) -> Var {
        self.constant(p.value().clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm_acc(m, k, n, ta.data(), false, tb.data(), false, out.data_mut());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Adds a `[n]` bias along the last axis of any tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = tb.len();
        if tb.rank() != 1 || ta.last_dim() != n || ta.rank() == 0 {
            return Err(dim_err("add_bias", ta, tb));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a fixed tensor (masks, scalings).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var, NnError> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(dim_err("mul_const", ta, &c));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let ta = self.value(a);
        require_rank("slice_cols", ta, 2)?;
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        if start + len > cols {
            return Err(NnError::InvalidInput(format!(
                "slice_cols {start}..{} out of {cols} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols { input: a, start }, rg))
    }

    /// Step `t` of a `[batch × time × dim]` tensor as `[batch × dim]`.
    pub fn time_step(&mut self, a: Var, t: usize) -> Result<Var, NnError> {
        let ta = self.value(a);
        require_rank("time_step", ta, 3)?;
        let (b, time, d) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        if t >= time {
            return Err(NnError::InvalidInput(format!("time_step {t} of {time}")));
        }
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            let off = (i * time + t) * d;
            data.extend_from_slice(&ta.data()[off..off + d]);
        }
        let out = Tensor::new(vec![b, d], data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::TimeStep { input: a, t }, rg))
    }

    /// Steps `start..start+len` of a `[batch × time × dim]` tensor.
    pub fn slice_time(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let ta = self.value(a);
        require_rank("slice_time", ta, 3)?;
        let (b, time, d) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        if start + len > time || len == 0 {
            return Err(NnError::InvalidInput(format!(
                "slice_time {start}..{} of {time}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(b * len * d);
        for i in 0..b {
            let off = (i * time + start) * d;
            data.extend_from_slice(&ta.data()[off..off + len * d]);
        }
        let out = Tensor::new(vec![b, len, d], data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceTime { input: a, start }, rg))
    }

    /// Stacks `[batch × dim]` steps into `[batch × time × dim]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var, NnError> {
        let first = steps
            .first()
            .ok_or_else(|| NnError::InvalidInput("stack_time of zero steps".into()))?;
        let shape = self.value(*first).shape().to_vec();
        if shape.len() != 2 {
            return Err(NnError::InvalidInput(format!(
                "stack_time expects [batch × dim] steps, got {shape:?}"
            )));
        }
        let (b, d, time) = (shape[0], shape[1], steps.len());
        let mut out = Tensor::zeros(&[b, time, d]);
        for (t, &s) in steps.iter().enumerate() {
            let ts = self.value(s);
            if ts.shape() != shape.as_slice() {
                return Err(dim_err("stack_time", self.value(*first), ts));
            }
            for i in 0..b {
                let off = (i * time + t) * d;
                out.data_mut()[off..off + d].copy_from_slice(ts.row(i));
            }
        }
        let rg = steps.iter().any(|&s| self.rg(s));
        Ok(self.push(out, Op::StackTime(steps.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NnError> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Same-length, zero-padded, non-causal 1-D convolution.
    ///
    /// `input` is `[batch × time × c_in]`; `weight` is `[kernel·c_in × c_out]`
    /// with tap `j` occupying rows `j·c_in..(j+1)·c_in`. Tap `j` reads
    /// `input[t + (j − kernel/2)·dilation]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        kernel: usize,
        dilation: usize,
    ) -> Result<Var, NnError> {
        if kernel.is_multiple_of(2) {
            return Err(NnError::Config(format!("kernel size must be odd, got {kernel}")));
        }
        if dilation == 0 {
            return Err(NnError::Config("dilation must be at least 1".into()));
        }
        let (tx, tw) = (self.value(input), self.value(weight));
        require_rank("conv1d", tx, 3)?;
        let (b, time, c_in) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if tw.rank() != 2 || tw.shape()[0] != kernel * c_in {
            return Err(dim_err("conv1d", tx, tw));
        }
        let c_out = tw.shape()[1];
        let mut out = Tensor::zeros(&[b, time, c_out]);
        for_each_tap(time, kernel, dilation, |j, src, dst, rows| {
            let w = &tw.data()[j * c_in * c_out..(j + 1) * c_in * c_out];
            for i in 0..b {
                let x0 = (i * time + src) * c_in;
                let o0 = (i * time + dst) * c_out;
                gemm_acc(
                    rows,
                    c_in,
                    c_out,
                    &tx.data()[x0..x0 + rows * c_in],
                    false,
                    w,
                    false,
                    &mut out.data_mut()[o0..o0 + rows * c_out],
                );
            }
        });
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(
            out,
            Op::Conv1d {
                input,
                weight,
                kernel,
                dilation,
            },
            rg,
        ))
    }

    /// Elementwise max over non-overlapping windows of the time axis of a
    /// `[batch × time × dim]` tensor. A trailing partial window is pooled as
    /// is unless `drop_remainder` is set, in which case it is discarded.
    /// Gradients route to the earliest maximal element.
    pub fn max_pool_time(
        &mut self,
        input: Var,
        window: PoolWindow,
        drop_remainder: bool,
    ) -> Result<Var, NnError> {
        let tx = self.value(input);
        require_rank("max_pool_time", tx, 3)?;
        let (b, time, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if time == 0 {
            return Err(NnError::InvalidInput("max_pool_time over empty time axis".into()));
        }
        let w = match window {
            PoolWindow::Full => time,
            PoolWindow::Size(0) => {
                return Err(NnError::Config("pool window must be positive".into()))
            }
            PoolWindow::Size(w) => w.min(time),
        };
        let out_t = pooled_len(time, window, drop_remainder);
        let mut out = Tensor::zeros(&[b, out_t, d]);
        let mut argmax = vec![0usize; b * out_t * d];
        for i in 0..b {
            for p in 0..out_t {
                let start = p * w;
                let end = (start + w).min(time);
                for k in 0..d {
                    let mut best_idx = (i * time + start) * d + k;
                    let mut best = tx.data()[best_idx];
                    for t in start + 1..end {
                        let idx = (i * time + t) * d + k;
                        if tx.data()[idx] > best {
                            best = tx.data()[idx];
                            best_idx = idx;
                        }
                    }
                    let o = (i * out_t + p) * d + k;
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaxPoolTime { input, argmax }, rg))
    }

    /// Row-wise softmax of a rank-2 tensor with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NnError> {
        let ta = self.value(a);
        require_rank("softmax_rows", ta, 2)?;
        let n = ta.shape()[1];
        if n == 0 {
            return Err(NnError::InvalidInput("softmax over zero logits".into()));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// `out[b, :] = Σ_k weights[b, k] · experts[k][b, :]`.
    pub fn mix(&mut self, weights: Var, experts: &[Var]) -> Result<Var, NnError> {
        let tw = self.value(weights);
        require_rank("mix", tw, 2)?;
        let (b, k) = (tw.shape()[0], tw.shape()[1]);
        if k != experts.len() || k == 0 {
            return Err(NnError::InvalidInput(format!(
                "mix has {k} weight columns for {} experts",
                experts.len()
            )));
        }
        let shape = self.value(experts[0]).shape().to_vec();
        if shape.len() != 2 || shape[0] != b {
            return Err(dim_err("mix", tw, self.value(experts[0])));
        }
        let p = shape[1];
        let mut out = Tensor::zeros(&[b, p]);
        for (j, &e) in experts.iter().enumerate() {
            let te = self.value(e);
            if te.shape() != shape.as_slice() {
                return Err(dim_err("mix", self.value(experts[0]), te));
            }
            for i in 0..b {
                let w = tw.data()[i * k + j];
                for (o, &y) in out.data_mut()[i * p..(i + 1) * p].iter_mut().zip(te.row(i)) {
                    *o += w * y;
                }
            }
        }
        let rg = self.rg(weights) || experts.iter().any(|&e| self.rg(e));
        Ok(self.push(
            out,
            Op::Mix {
                weights,
                experts: experts.to_vec(),
            },
            rg,
        ))
    }

    /// Mean absolute difference against a fixed target.
    pub fn l1_loss(&mut self, pred: Var, target: Tensor) -> Result<Var, NnError> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(dim_err("l1_loss", tp, &target));
        }
        let n = tp.len().max(1) as f64;
        let loss = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::L1Loss { pred, target }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Temporal or instance contrastive loss between two `[batch × time × dim]`
    /// views sharing their time indices.
    pub fn contrast(&mut self, r: Var, r2: Var, kind: ContrastKind) -> Result<Var, NnError> {
        let (tr, tr2) = (self.value(r), self.value(r2));
        if tr.shape() != tr2.shape() {
            return Err(dim_err("contrast", tr, tr2));
        }
        require_rank("contrast", tr, 3)?;
        let s = tr.shape();
        let (loss, _) = contrast(kind, tr.data(), tr2.data(), s[0], s[1], s[2], None);
        let rg = self.rg(r) || self.rg(r2);
        Ok(self.push(Tensor::scalar(loss), Op::Contrast { r, r2, kind }, rg))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NnError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut visited = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited.push(idx);
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = HashMap::new();
        for (&id, &v) in &self.params {
            if let Some(g) = grads[v.0].as_ref() {
                params.insert(id, g.clone());
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
            visited,
        })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$t:ident| $body:expr) => {
                if let Some($t) = grad_slot(grads, nodes, $v) {
                    $body;
                }
            };
        }
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                with_grad!(*a, |ga| gemm_acc(m, n, k, g.data(), false, tb.data(), true, ga.data_mut()));
                with_grad!(*b, |gb| gemm_acc(k, m, n, ta.data(), true, g.data(), false, gb.data_mut()));
            }
            Op::AddBias(a, bias) => {
                with_grad!(*a, |ga| ga.add_assign(g));
                with_grad!(*bias, |gb| {
                    let n = gb.len();
                    for row in g.data().chunks(n) {
                        for (x, y) in gb.data_mut().iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| ga.add_assign(g));
                with_grad!(*b, |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| ga.add_assign(g));
                with_grad!(*b, |gb| {
                    for (x, y) in gb.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                with_grad!(*a, |ga| {
                    for ((x, gy), bv) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *x += gy * bv;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((x, gy), av) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *x += gy * av;
                    }
                });
            }
            Op::MulConst(a, c) => {
                with_grad!(*a, |ga| {
                    for ((x, gy), cv) in ga.data_mut().iter_mut().zip(g.data()).zip(c.data()) {
                        *x += gy * cv;
                    }
                });
            }
            Op::Scale(a, c) => {
                with_grad!(*a, |ga| {
                    for (x, gy) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += gy * c;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                with_grad!(*a, |ga| {
                    for ((x, gy), s) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *x += gy * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                with_grad!(*a, |ga| {
                    for ((x, gy), t) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *x += gy * (1.0 - t * t);
                    }
                });
            }
            Op::Gelu(a) => {
                let xin = val(*a);
                with_grad!(*a, |ga| {
                    for ((x, gy), v) in ga.data_mut().iter_mut().zip(g.data()).zip(xin.data()) {
                        *x += gy * gelu_grad(*v);
                    }
                });
            }
            Op::Relu(a) => {
                let xin = val(*a);
                with_grad!(*a, |ga| {
                    for ((x, gy), v) in ga.data_mut().iter_mut().zip(g.data()).zip(xin.data()) {
                        if *v > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::SliceCols { input, start } => {
                let cols = val(*input).shape()[1];
                let len = node.value.shape()[1];
                with_grad!(*input, |ga| {
                    for (r, grow) in g.data().chunks(len).enumerate() {
                        let dst = &mut ga.data_mut()[r * cols + start..r * cols + start + len];
                        for (x, y) in dst.iter_mut().zip(grow) {
                            *x += y;
                        }
                    }
                });
            }
            Op::TimeStep { input, t } => {
                let s = val(*input).shape();
                let (time, d) = (s[1], s[2]);
                with_grad!(*input, |ga| {
                    for (i, grow) in g.data().chunks(d).enumerate() {
                        let off = (i * time + t) * d;
                        for (x, y) in ga.data_mut()[off..off + d].iter_mut().zip(grow) {
                            *x += y;
                        }
                    }
                });
            }
            Op::SliceTime { input, start } => {
                let s = val(*input).shape();
                let (time, d) = (s[1], s[2]);
                let len = node.value.shape()[1];
                with_grad!(*input, |ga| {
                    for (i, gblock) in g.data().chunks(len * d).enumerate() {
                        let off = (i * time + start) * d;
                        for (x, y) in ga.data_mut()[off..off + len * d].iter_mut().zip(gblock) {
                            *x += y;
                        }
                    }
                });
            }
            Op::StackTime(steps) => {
                let s = node.value.shape();
                let (b, time, d) = (s[0], s[1], s[2]);
                for (t, &step) in steps.iter().enumerate() {
                    with_grad!(step, |gs| {
                        for i in 0..b {
                            let off = (i * time + t) * d;
                            for (x, y) in gs.data_mut()[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(&g.data()[off..off + d])
                            {
                                *x += y;
                            }
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                with_grad!(*a, |ga| {
                    for (x, y) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                });
            }
            Op::Conv1d {
                input,
                weight,
                kernel,
                dilation,
            } => {
                let (tx, tw) = (val(*input), val(*weight));
                let (b, time, c_in) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let c_out = tw.shape()[1];
                with_grad!(*input, |gx| {
                    for_each_tap(time, *kernel, *dilation, |j, src, dst, rows| {
                        let w = &tw.data()[j * c_in * c_out..(j + 1) * c_in * c_out];
                        for i in 0..b {
                            let x0 = (i * time + src) * c_in;
                            let o0 = (i * time + dst) * c_out;
                            gemm_acc(
                                rows,
                                c_out,
                                c_in,
                                &g.data()[o0..o0 + rows * c_out],
                                false,
                                w,
                                true,
                                &mut gx.data_mut()[x0..x0 + rows * c_in],
                            );
                        }
                    })
                });
                with_grad!(*weight, |gw| {
                    for_each_tap(time, *kernel, *dilation, |j, src, dst, rows| {
                        let gwj = &mut gw.data_mut()[j * c_in * c_out..(j + 1) * c_in * c_out];
                        for i in 0..b {
                            let x0 = (i * time + src) * c_in;
                            let o0 = (i * time + dst) * c_out;
                            gemm_acc(
                                c_in,
                                rows,
                                c_out,
                                &tx.data()[x0..x0 + rows * c_in],
                                true,
                                &g.data()[o0..o0 + rows * c_out],
                                false,
                                gwj,
                            );
                        }
                    })
                });
            }
            Op::MaxPoolTime { input, argmax } => {
                with_grad!(*input, |ga| {
                    for (o, &src) in argmax.iter().enumerate() {
                        ga.data_mut()[src] += g.data()[o];
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = y.shape()[1];
                with_grad!(*a, |ga| {
                    for ((grow, yrow), dst) in g
                        .data()
                        .chunks(n)
                        .zip(y.data().chunks(n))
                        .zip(ga.data_mut().chunks_mut(n))
                    {
                        let dotp: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((x, gy), yv) in dst.iter_mut().zip(grow).zip(yrow) {
                            *x += yv * (gy - dotp);
                        }
                    }
                });
            }
            Op::Mix { weights, experts } => {
                let tw = val(*weights);
                let (b, k) = (tw.shape()[0], tw.shape()[1]);
                let p = node.value.shape()[1];
                with_grad!(*weights, |gw| {
                    for (j, &e) in experts.iter().enumerate() {
                        let te = val(e);
                        for i in 0..b {
                            let s: f64 = g.data()[i * p..(i + 1) * p]
                                .iter()
                                .zip(te.row(i))
                                .map(|(a, c)| a * c)
                                .sum();
                            gw.data_mut()[i * k + j] += s;
                        }
                    }
                });
                for (j, &e) in experts.iter().enumerate() {
                    with_grad!(e, |ge| {
                        for i in 0..b {
                            let w = tw.data()[i * k + j];
                            for (x, gy) in ge.data_mut()[i * p..(i + 1) * p]
                                .iter_mut()
                                .zip(&g.data()[i * p..(i + 1) * p])
                            {
                                *x += w * gy;
                            }
                        }
                    });
                }
            }
            Op::L1Loss { pred, target } => {
                let tp = val(*pred);
                let scale = g.item() / tp.len().max(1) as f64;
                with_grad!(*pred, |gp| {
                    for ((x, a), b) in gp.data_mut().iter_mut().zip(tp.data()).zip(target.data()) {
                        let d = a - b;
                        if d > 0.0 {
                            *x += scale;
                        } else if d < 0.0 {
                            *x -= scale;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = g.item();
                with_grad!(*a, |ga| ga.data_mut().iter_mut().for_each(|x| *x += s));
            }
            Op::Mean(a) => {
                let s = g.item() / val(*a).len().max(1) as f64;
                with_grad!(*a, |ga| ga.data_mut().iter_mut().for_each(|x| *x += s));
            }
            Op::Contrast { r, r2, kind } => {
                let (tr, tr2) = (val(*r), val(*r2));
                let s = tr.shape();
                let (_, gr) = contrast(*kind, tr.data(), tr2.data(), s[0], s[1], s[2], Some(g.item()));
                let (gr, gr2) = gr.expect("gradients requested");
                with_grad!(*r, |ga| {
                    for (x, y) in ga.data_mut().iter_mut().zip(&gr) {
                        *x += y;
                    }
                });
                with_grad!(*r2, |gb| {
                    for (x, y) in gb.data_mut().iter_mut().zip(&gr2) {
                        *x += y;
                    }
                });
            }
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> Option<&'a mut Tensor> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape())))
}

/// Visits each tap of a same-length convolution with the contiguous row range
/// it touches: `f(tap, first_source_row, first_output_row, rows)`.
fn for_each_tap(time: usize, kernel: usize, dilation: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let half = (kernel / 2) as isize;
    for j in 0..kernel {
        let shift = (j as isize - half) * dilation as isize;
        let dst_start = (-shift).max(0) as usize;
        let dst_end = (time as isize - shift).min(time as isize);
        if dst_end <= dst_start as isize {
            continue;
        }
        let rows = dst_end as usize - dst_start;
        let src_start = (dst_start as isize + shift) as usize;
        f(j, src_start, dst_start, rows);
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
