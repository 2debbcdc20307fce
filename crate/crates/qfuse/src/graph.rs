//! Reverse-mode automatic differentiation over a per-forward-pass graph.
//!
//! A [`Graph`] records ops in creation order (so the node list is already a
//! topological order) and replays them in reverse for the backward pass.
//! Parameters are bound into the graph by name via [`Graph::param`]; binding
//! the same name twice returns the same node, so shared weights accumulate
//! gradients correctly.
//!
//! A graph and its tensors stay on one thread; finished tensors are plain
//! values and may be shared read-only.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::TensorError;
use crate::survival;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node in a specific graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    /// Elementwise add; the second input may be a vector broadcast over rows.
    Add(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Concat {
        axis: usize,
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    MeanPool(Var),
    Sum(Var),
    Reshape(Var),
    /// y = x @ w^T (+ b); w is stored (out_dim, in_dim).
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// Negative log Cox partial likelihood of a batch of risk scores.
    CoxNll {
        etas: Var,
        times: Vec<f64>,
        events: Vec<bool>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Epsilon inside the layernorm variance square root.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Op kinds accepted by the generic [`Graph::forward_op`] dispatcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Matmul,
    Add,
    Hadamard,
    Sigmoid,
    Softmax,
    LayerNorm,
    Concat { axis: usize },
    MeanPool,
    Linear,
    Scale { factor: f64 },
}

impl OpKind {
    /// All kinds, with canonical parameters for generic sweeps.
    pub fn all() -> Vec<OpKind> {
        vec![
            OpKind::Matmul,
            OpKind::Add,
            OpKind::Hadamard,
            OpKind::Sigmoid,
            OpKind::Softmax,
            OpKind::LayerNorm,
            OpKind::Concat { axis: 0 },
            OpKind::Concat { axis: 1 },
            OpKind::MeanPool,
            OpKind::Linear,
            OpKind::Scale { factor: 2.5 },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Hadamard => "hadamard",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layernorm",
            OpKind::Concat { .. } => "concat",
            OpKind::MeanPool => "mean_pool",
            OpKind::Linear => "linear",
            OpKind::Scale { .. } => "scale",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "matmul" => Ok(OpKind::Matmul),
            "add" => Ok(OpKind::Add),
            "hadamard" => Ok(OpKind::Hadamard),
            "sigmoid" => Ok(OpKind::Sigmoid),
            "softmax" => Ok(OpKind::Softmax),
            "layernorm" => Ok(OpKind::LayerNorm),
            "concat" => Ok(OpKind::Concat { axis: 0 }),
            "mean_pool" => Ok(OpKind::MeanPool),
            "linear" => Ok(OpKind::Linear),
            "scale" => Ok(OpKind::Scale { factor: 2.5 }),
            other => Err(TensorError::UnknownKind(other.to_string())),
        }
    }
}

/// Reverse-mode autodiff graph.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    bound_order: Vec<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bound: HashMap::new(),
            bound_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite output from {:?}",
            std::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.graph, self.id, "Var from a different graph");
        &self.nodes[v.idx]
    }

    fn needs(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Insert a value as a leaf. Gradient tracking follows `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Insert a constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    /// Bind a named parameter. The first call copies the tensor in; later
    /// calls with the same name return the existing node so gradients
    /// accumulate across uses.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.bound.get(name) {
            debug_assert_eq!(self.node(v).value.shape(), t.shape());
            return v;
        }
        let mut copy = t.clone();
        copy.requires_grad = trainable;
        copy.grad = None;
        let v = self.push(copy, Op::Leaf, trainable);
        self.bound.insert(name.to_string(), v);
        self.bound_order.push(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    /// Gradient buffer of a node, once backward has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Detach a node's value from the graph.
    pub fn detach(&self, v: Var) -> Tensor {
        let mut t = self.node(v).value.clone();
        t.requires_grad = false;
        t.grad = None;
        t
    }

    /// Named trainable parameters and their gradients, sorted by name.
    /// Parameters the loss never touched report zero gradients.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        let mut names: Vec<&String> = self.bound_order.iter().collect();
        names.sort();
        names
            .into_iter()
            .filter_map(|name| {
                let v = self.bound[name];
                let node = self.node(v);
                if !node.needs_grad {
                    return None;
                }
                let g = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                Some((name.clone(), g))
            })
            .collect()
    }

    // ── ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.node(a).value, &self.node(b).value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_kernel(ta.data(), tb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::Matmul(a, b),
            needs,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = &self.node(a).value;
        if ta.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "transpose on shape {:?}",
                ta.shape()
            )));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data()[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), needs))
    }

    /// Elementwise add. The only broadcast allowed is a 1-D bias over the
    /// rows of a 2-D left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.node(a).value, &self.node(b).value);
        let bias_broadcast =
            ta.shape().len() == 2 && tb.shape().len() == 1 && tb.numel() == ta.cols();
        if !bias_broadcast && ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "add {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.data().to_vec();
        if bias_broadcast {
            let cols = ta.cols();
            for (i, o) in out.iter_mut().enumerate() {
                *o += tb.data()[i % cols];
            }
        } else {
            for (o, x) in out.iter_mut().zip(tb.data()) {
                *o += x;
            }
        }
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), needs))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.node(a).value, &self.node(b).value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "hadamard {:?} * {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Hadamard(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let ta = &self.node(a).value;
        let out: Vec<f64> = ta.data().iter().map(|x| x * factor).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale(a, factor), needs))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = &self.node(a).value;
        let out: Vec<f64> = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sigmoid(a), needs))
    }

    /// Row-wise softmax of a 2-D tensor, max-subtracted for overflow safety.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = &self.node(a).value;
        if ta.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "softmax on shape {:?}",
                ta.shape()
            )));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Softmax(a), needs))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (
            &self.node(x).value,
            &self.node(gamma).value,
            &self.node(beta).value,
        );
        if tx.shape().len() != 2 || tg.numel() != tx.cols() || tb.numel() != tx.cols() {
            return Err(TensorError::ShapeMismatch(format!(
                "layernorm x {:?}, gamma {:?}, beta {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let (mean, inv_std) = row_moments(row);
            for j in 0..c {
                let xhat = (row[j] - mean) * inv_std;
                out[i * c + j] = tg.data()[j] * xhat + tb.data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm { x, gamma, beta },
            needs,
        ))
    }

    /// Concatenate 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "concat needs parts and axis 0|1, got {} parts, axis {axis}",
                parts.len()
            )));
        }
        let first = self.node(parts[0]).value.shape().to_vec();
        if first.len() != 2 {
            return Err(TensorError::ShapeMismatch(
                "concat expects 2-d tensors".into(),
            ));
        }
        let fixed_axis = 1 - axis;
        for &p in parts {
            let s = self.node(p).value.shape();
            if s.len() != 2 || s[fixed_axis] != first[fixed_axis] {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat axis {axis}: {:?} vs {:?}",
                    s, first
                )));
            }
        }
        let total: usize = parts
            .iter()
            .map(|&p| self.node(p).value.shape()[axis])
            .sum();
        let (rows, cols) = if axis == 0 {
            (total, first[1])
        } else {
            (first[0], total)
        };
        let mut out = vec![0.0; rows * cols];
        if axis == 0 {
            let mut off = 0;
            for &p in parts {
                let d = self.node(p).value.data();
                out[off..off + d.len()].copy_from_slice(d);
                off += d.len();
            }
        } else {
            let mut col_off = 0;
            for &p in parts {
                let t = &self.node(p).value;
                let pc = t.cols();
                for i in 0..rows {
                    out[i * cols + col_off..i * cols + col_off + pc]
                        .copy_from_slice(&t.data()[i * pc..(i + 1) * pc]);
                }
                col_off += pc;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Contiguous slice of a 2-D tensor along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = &self.node(x).value;
        if tx.shape().len() != 2 || axis > 1 || start + len > tx.shape()[axis] || len == 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "slice axis {axis} [{start}, {start}+{len}) of {:?}",
                tx.shape()
            )));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let (or, oc) = if axis == 0 { (len, c) } else { (r, len) };
        let mut out = vec![0.0; or * oc];
        if axis == 0 {
            out.copy_from_slice(&tx.data()[start * c..(start + len) * c]);
        } else {
            for i in 0..r {
                out[i * len..(i + 1) * len]
                    .copy_from_slice(&tx.data()[i * c + start..i * c + start + len]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::matrix(or, oc, out)?,
            Op::Slice { x, axis, start, len },
            needs,
        ))
    }

    /// Mean over the rows of a 2-D tensor, keeping a leading axis of 1.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = &self.node(x).value;
        if tx.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "mean_pool on shape {:?}",
                tx.shape()
            )));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += tx.data()[i * c + j];
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(1, c, out)?, Op::MeanPool(x), needs))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let total: f64 = self.node(x).value.data().iter().sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), needs))
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let tx = &self.node(x).value;
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                tx.shape(),
                shape
            )));
        }
        let data = tx.data().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape(x), needs))
    }

    /// Affine map y = x @ w^T + b with w stored (out_dim, in_dim).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (tx, tw) = (&self.node(x).value, &self.node(w).value);
        if tx.shape().len() != 2 || tw.shape().len() != 2 || tx.cols() != tw.cols() {
            return Err(TensorError::ShapeMismatch(format!(
                "linear x {:?}, w {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (t, din, dout) = (tx.rows(), tx.cols(), tw.rows());
        if let Some(bv) = b {
            let tb = &self.node(bv).value;
            if tb.numel() != dout {
                return Err(TensorError::ShapeMismatch(format!(
                    "linear bias {:?} for out dim {dout}",
                    tb.shape()
                )));
            }
        }
        let mut out = vec![0.0; t * dout];
        for i in 0..t {
            let xrow = &tx.data()[i * din..(i + 1) * din];
            for j in 0..dout {
                let wrow = &tw.data()[j * din..(j + 1) * din];
                let mut acc = 0.0;
                for p in 0..din {
                    acc += xrow[p] * wrow[p];
                }
                out[i * dout + j] = acc;
            }
        }
        if let Some(bv) = b {
            let tb = self.node(bv).value.data().to_vec();
            for i in 0..t {
                for j in 0..dout {
                    out[i * dout + j] += tb[j];
                }
            }
        }
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        Ok(self.push(
            Tensor::matrix(t, dout, out)?,
            Op::Linear { x, w, b },
            needs,
        ))
    }

    /// Cox negative log partial likelihood (Breslow ties) over a batch of
    /// risk scores. `etas` must hold one entry per record.
    pub fn cox_nll(
        &mut self,
        etas: Var,
        times: &[f64],
        events: &[bool],
    ) -> Result<Var, TensorError> {
        let te = &self.node(etas).value;
        if te.numel() != times.len() || times.len() != events.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "cox_nll etas {:?} vs {} records",
                te.shape(),
                times.len()
            )));
        }
        let (loss, _) = survival::cox_nll_value_grad(te.data(), times, events);
        let needs = self.needs(etas);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CoxNll {
                etas,
                times: times.to_vec(),
                events: events.to_vec(),
            },
            needs,
        ))
    }

    /// Generic dispatcher over the named op kinds.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, TensorError> {
        let arity = |n: usize| -> Result<(), TensorError> {
            if inputs.len() != n {
                Err(TensorError::ShapeMismatch(format!(
                    "{} expects {n} inputs, got {}",
                    kind.name(),
                    inputs.len()
                )))
            } else {
                Ok(())
            }
        };
        match kind {
            OpKind::Matmul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Hadamard => {
                arity(2)?;
                self.hadamard(inputs[0], inputs[1])
            }
            OpKind::Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            OpKind::Softmax => {
                arity(1)?;
                self.softmax(inputs[0])
            }
            OpKind::LayerNorm => {
                arity(3)?;
                self.layernorm(inputs[0], inputs[1], inputs[2])
            }
            OpKind::Concat { axis } => self.concat(axis, inputs),
            OpKind::MeanPool => {
                arity(1)?;
                self.mean_pool(inputs[0])
            }
            OpKind::Linear => {
                if inputs.len() == 2 {
                    self.linear(inputs[0], inputs[1], None)
                } else {
                    arity(3)?;
                    self.linear(inputs[0], inputs[1], Some(inputs[2]))
                }
            }
            OpKind::Scale { factor } => {
                arity(1)?;
                self.scale(inputs[0], factor)
            }
        }
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Backward from a scalar loss, seeding d loss / d loss = 1.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.backward_seeded(loss, &[1.0])
    }

    /// Backward from any node with an explicit upstream gradient. Resets
    /// all gradients first, so repeated calls are reproducible.
    pub fn backward_seeded(&mut self, output: Var, seed: &[f64]) -> Result<(), TensorError> {
        if output.graph != self.id || output.idx >= self.nodes.len() {
            return Err(TensorError::DetachedLoss);
        }
        let out_numel = self.nodes[output.idx].value.numel();
        if seed.len() == 1 && out_numel != 1 {
            return Err(TensorError::NotScalarLoss(out_numel));
        }
        if seed.len() != out_numel {
            return Err(TensorError::ShapeMismatch(format!(
                "seed length {} vs output {}",
                seed.len(),
                out_numel
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
            node.value.grad = None;
        }
        if !self.nodes[output.idx].needs_grad {
            // Output does not depend on any tracked leaf; all grads are zero.
            self.finalize_leaf_grads();
            return Ok(());
        }
        self.nodes[output.idx].grad = Some(seed.to_vec());
        for idx in (0..=output.idx).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx);
        }
        self.finalize_leaf_grads();
        Ok(())
    }

    /// Give every tracked leaf a grad buffer (zeros if untouched) and mirror
    /// it into the tensor.
    fn finalize_leaf_grads(&mut self) {
        for node in self.nodes.iter_mut() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = node
                    .grad
                    .get_or_insert_with(|| vec![0.0; node.value.numel()]);
                node.value.grad = Some(g.clone());
            }
        }
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.idx].needs_grad {
            return;
        }
        let numel = self.nodes[v.idx].value.numel();
        debug_assert_eq!(delta.len(), numel);
        let slot = self.nodes[v.idx]
            .grad
            .get_or_insert_with(|| vec![0.0; numel]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    fn backward_node(&mut self, idx: usize) {
        let op = self.nodes[idx].op.clone();
        let dy = self.nodes[idx].grad.clone().expect("grad present");
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let t = &self.nodes[a.idx].value;
                    (t.rows(), t.cols())
                };
                let n = self.nodes[b.idx].value.cols();
                if self.nodes[a.idx].needs_grad {
                    // dA = dY @ B^T
                    let bd = self.nodes[b.idx].value.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += dy[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.nodes[b.idx].needs_grad {
                    // dB = A^T @ dY
                    let ad = self.nodes[a.idx].value.data().to_vec();
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * dy[i * n + j];
                            }
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = {
                    let t = &self.nodes[a.idx].value;
                    (t.rows(), t.cols())
                };
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = dy[j * r + i];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Add(a, b) => {
                self.accumulate(a, &dy);
                let tb_numel = self.nodes[b.idx].value.numel();
                if tb_numel == dy.len() {
                    self.accumulate(b, &dy);
                } else {
                    // bias broadcast: sum over rows
                    let cols = tb_numel;
                    let mut db = vec![0.0; cols];
                    for (i, g) in dy.iter().enumerate() {
                        db[i % cols] += g;
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Hadamard(a, b) => {
                if self.nodes[a.idx].needs_grad {
                    let bd = self.nodes[b.idx].value.data();
                    let da: Vec<f64> = dy.iter().zip(bd).map(|(g, x)| g * x).collect();
                    self.accumulate(a, &da);
                }
                if self.nodes[b.idx].needs_grad {
                    let ad = self.nodes[a.idx].value.data();
                    let db: Vec<f64> = dy.iter().zip(ad).map(|(g, x)| g * x).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Scale(a, factor) => {
                let da: Vec<f64> = dy.iter().map(|g| g * factor).collect();
                self.accumulate(a, &da);
            }
            Op::Sigmoid(a) => {
                let yd = self.nodes[idx].value.data();
                let da: Vec<f64> = dy
                    .iter()
                    .zip(yd)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let (r, c) = (y.rows(), y.cols());
                let yd = y.data();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += dy[i * c + j] * yd[i * c + j];
                    }
                    for j in 0..c {
                        da[i * c + j] = yd[i * c + j] * (dy[i * c + j] - dot);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let tx = self.nodes[x.idx].value.clone();
                let tg = self.nodes[gamma.idx].value.data().to_vec();
                let (r, c) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..r {
                    let row = &tx.data()[i * c..(i + 1) * c];
                    let (mean, inv_std) = row_moments(row);
                    let xhat: Vec<f64> =
                        row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dyr = &dy[i * c..(i + 1) * c];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        dg[j] += dyr[j] * xhat[j];
                        db[j] += dyr[j];
                        let dxh = dyr[j] * tg[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let dxh = dyr[j] * tg[j];
                        dx[i * c + j] = inv_std
                            * (dxh - sum_dxhat / cf - xhat[j] * sum_dxhat_xhat / cf);
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dg);
                self.accumulate(beta, &db);
            }
            Op::Concat { axis, parts } => {
                let cols = self.nodes[idx].value.cols();
                if axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.idx].value.numel();
                        let dp = dy[off..off + n].to_vec();
                        self.accumulate(p, &dp);
                        off += n;
                    }
                } else {
                    let rows = self.nodes[idx].value.rows();
                    let mut col_off = 0;
                    for p in parts {
                        let pc = self.nodes[p.idx].value.cols();
                        let mut dp = vec![0.0; rows * pc];
                        for i in 0..rows {
                            dp[i * pc..(i + 1) * pc].copy_from_slice(
                                &dy[i * cols + col_off..i * cols + col_off + pc],
                            );
                        }
                        self.accumulate(p, &dp);
                        col_off += pc;
                    }
                }
            }
            Op::Slice { x, axis, start, len } => {
                let (r, c) = {
                    let t = &self.nodes[x.idx].value;
                    (t.rows(), t.cols())
                };
                let mut dx = vec![0.0; r * c];
                if axis == 0 {
                    dx[start * c..(start + len) * c].copy_from_slice(&dy);
                } else {
                    for i in 0..r {
                        dx[i * c + start..i * c + start + len]
                            .copy_from_slice(&dy[i * len..(i + 1) * len]);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::MeanPool(x) => {
                let (r, c) = {
                    let t = &self.nodes[x.idx].value;
                    (t.rows(), t.cols())
                };
                let inv = 1.0 / r as f64;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dy[j] * inv;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.idx].value.numel();
                let dx = vec![dy[0]; n];
                self.accumulate(x, &dx);
            }
            Op::Reshape(x) => {
                self.accumulate(x, &dy);
            }
            Op::Linear { x, w, b } => {
                let (t, din) = {
                    let tx = &self.nodes[x.idx].value;
                    (tx.rows(), tx.cols())
                };
                let dout = self.nodes[w.idx].value.rows();
                if self.nodes[x.idx].needs_grad {
                    // dX = dY @ W
                    let wd = self.nodes[w.idx].value.data();
                    let mut dx = vec![0.0; t * din];
                    for i in 0..t {
                        for j in 0..dout {
                            let g = dy[i * dout + j];
                            let wrow = &wd[j * din..(j + 1) * din];
                            for p in 0..din {
                                dx[i * din + p] += g * wrow[p];
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.nodes[w.idx].needs_grad {
                    // dW = dY^T @ X
                    let xd = self.nodes[x.idx].value.data().to_vec();
                    let mut dw = vec![0.0; dout * din];
                    for i in 0..t {
                        for j in 0..dout {
                            let g = dy[i * dout + j];
                            let xrow = &xd[i * din..(i + 1) * din];
                            for p in 0..din {
                                dw[j * din + p] += g * xrow[p];
                            }
                        }
                    }
                    self.accumulate(w, &dw);
                }
                if let Some(bv) = b {
                    if self.nodes[bv.idx].needs_grad {
                        let mut db = vec![0.0; dout];
                        for i in 0..t {
                            for j in 0..dout {
                                db[j] += dy[i * dout + j];
                            }
                        }
                        self.accumulate(bv, &db);
                    }
                }
            }
            Op::CoxNll { etas, times, events } => {
                let ed = self.nodes[etas.idx].value.data();
                let (_, grad) = survival::cox_nll_value_grad(ed, &times, &events);
                let da: Vec<f64> = grad.iter().map(|g| g * dy[0]).collect();
                self.accumulate(etas, &da);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + LAYERNORM_EPS).sqrt())
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>, grad: bool) -> Var {
        let mut t = Tensor::new(shape, data).unwrap();
        t.requires_grad = grad;
        g.leaf(t)
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![0.0], false);
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn hadamard_elementwise() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![3], vec![1.0, 2.0, 3.0], false);
        let b = leaf(&mut g, vec![3], vec![0.0, 1.0, 2.0], false);
        let y = g.hadamard(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0, 6.0]);
    }

    // Independent O(n^3) triple-loop oracle.
    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut s = crate::rng::Stream::new(5);
        let (m, k, n) = (2, 3, 4);
        let a: Vec<f64> = (0..m * k).map(|_| s.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| s.normal()).collect();
        let mut g = Graph::new();
        let va = leaf(&mut g, vec![m, k], a.clone(), false);
        let vb = leaf(&mut g, vec![k, n], b.clone(), false);
        let y = g.matmul(va, vb).unwrap();
        assert_eq!(g.value(y).shape(), &[m, n]);
        let oracle = naive_matmul(&a, &b, m, k, n);
        for (x, o) in g.value(y).data().iter().zip(&oracle) {
            assert!((x - o).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 3], vec![0.0; 6], false);
        let b = leaf(&mut g, vec![2, 3], vec![0.0; 6], false);
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn unknown_kind_errors() {
        let e = "gelu".parse::<OpKind>();
        assert!(matches!(e, Err(TensorError::UnknownKind(_))));
        assert_eq!("matmul".parse::<OpKind>().unwrap(), OpKind::Matmul);
    }

    #[test]
    fn backward_sigmoid_at_zero_quarter() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![0.0], true);
        let y = g.sigmoid(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], true);
        let c = g.constant(Tensor::scalar(7.0));
        // x participates in the graph but not in the loss
        let _unused = g.sum(x).unwrap();
        g.backward(c).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn sum_of_matmul_grads_match_finite_differences() {
        let mut s = crate::rng::Stream::new(8);
        let b_data: Vec<f64> = (0..12).map(|_| s.normal()).collect();
        let point = Tensor::matrix(2, 3, (0..6).map(|_| s.normal()).collect()).unwrap();
        let b_fixed = b_data.clone();
        let report = grad_check(
            move |g, a| {
                let b = g.constant(Tensor::matrix(3, 4, b_fixed.clone()).unwrap());
                let y = g.matmul(a, b)?;
                g.sum(y)
            },
            &point,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_identity_is_exact() {
        // dyadic point and step keep the central difference exact in f64
        let point = Tensor::scalar(0.5);
        let report = grad_check(|g, x| g.sum(x), &point, 0.25, 1e-12).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn grad_check_layernorm_8_vector() {
        let mut s = crate::rng::Stream::new(21);
        let point = Tensor::matrix(1, 8, (0..8).map(|_| s.normal()).collect()).unwrap();
        let w: Vec<f64> = (0..8).map(|_| s.normal()).collect();
        let report = grad_check(
            move |g, x| {
                let gamma = g.constant(Tensor::vector(vec![1.0; 8]));
                let beta = g.constant(Tensor::vector(vec![0.0; 8]));
                let y = g.layernorm(x, gamma, beta)?;
                // weight the outputs so the scalar target is not constant
                let wv = g.constant(Tensor::matrix(1, 8, w.clone()).unwrap());
                let z = g.hadamard(y, wv)?;
                g.sum(z)
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_stay_positive() {
        let mut s = crate::rng::Stream::new(33);
        for _ in 0..50 {
            let (r, c) = (1 + (s.uniform() * 5.0) as usize, 1 + (s.uniform() * 7.0) as usize);
            let data: Vec<f64> = (0..r * c).map(|_| s.normal() * 50.0).collect();
            let mut g = Graph::new();
            let x = leaf(&mut g, vec![r, c], data, false);
            let y = g.softmax(x).unwrap();
            for i in 0..r {
                let row = &g.value(y).data()[i * c..(i + 1) * c];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
                assert!(row.iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn concat_then_slice_reproduces_inputs_exactly() {
        let mut s = crate::rng::Stream::new(44);
        let a_data: Vec<f64> = (0..6).map(|_| s.normal()).collect();
        let b_data: Vec<f64> = (0..9).map(|_| s.normal()).collect();
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 3], a_data.clone(), false);
        let b = leaf(&mut g, vec![3, 3], b_data.clone(), false);
        let cat = g.concat(0, &[a, b]).unwrap();
        let sa = g.slice(cat, 0, 0, 2).unwrap();
        let sb = g.slice(cat, 0, 2, 3).unwrap();
        assert_eq!(g.value(sa).data(), &a_data[..]);
        assert_eq!(g.value(sb).data(), &b_data[..]);

        // and along the channel axis
        let c = leaf(&mut g, vec![2, 2], vec![9.0, 8.0, 7.0, 6.0], false);
        let cat1 = g.concat(1, &[a, c]).unwrap();
        let sa1 = g.slice(cat1, 1, 0, 3).unwrap();
        let sc1 = g.slice(cat1, 1, 3, 2).unwrap();
        assert_eq!(g.value(sa1).data(), &a_data[..]);
        assert_eq!(g.value(sc1).data(), &[9.0, 8.0, 7.0, 6.0]);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut s = crate::rng::Stream::new(55);
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3, 3], (0..9).map(|_| s.normal()).collect(), true);
        let w = leaf(&mut g, vec![3, 3], (0..9).map(|_| s.normal()).collect(), true);
        let h = g.matmul(x, w).unwrap();
        let sg = g.sigmoid(h).unwrap();
        let prod = g.hadamard(sg, h).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        let gx1 = g.grad(x).unwrap().to_vec();
        let gw1 = g.grad(w).unwrap().to_vec();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &gx1[..]);
        assert_eq!(g.grad(w).unwrap(), &gw1[..]);
    }

    #[test]
    fn detached_and_non_scalar_losses_error() {
        let mut g1 = Graph::new();
        let x = leaf(&mut g1, vec![2], vec![1.0, 2.0], true);
        let mut g2 = Graph::new();
        let y = leaf(&mut g2, vec![2], vec![1.0, 2.0], true);
        assert!(matches!(g2.backward(x), Err(TensorError::DetachedLoss)));
        assert!(matches!(g2.backward(y), Err(TensorError::NotScalarLoss(2))));
        let _ = g1;
    }

    #[test]
    fn bias_broadcast_add_over_rows() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
        let b = leaf(&mut g, vec![3], vec![10.0, 20.0, 30.0], true);
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn param_binding_is_shared_and_grads_accumulate() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 2], vec![1.0, 2.0], false);
        let w1 = g.param("w", &w, true);
        let w2 = g.param("w", &w, true);
        assert_eq!(w1, w2);
        let y1 = g.linear(x, w1, None).unwrap();
        let y2 = g.linear(y1, w2, None).unwrap();
        let loss = g.sum(y2).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads.len(), 1);
        // identity weight, so dW = x^T * 1 twice through the chain
        assert_eq!(grads[0].0, "w");
        assert_eq!(grads[0].1, vec![2.0, 4.0, 2.0, 4.0]);
    }

    #[test]
    fn linear_matches_matmul_transpose_route() {
        let mut s = crate::rng::Stream::new(66);
        let x = Tensor::matrix(3, 4, (0..12).map(|_| s.normal()).collect()).unwrap();
        let w = Tensor::matrix(2, 4, (0..8).map(|_| s.normal()).collect()).unwrap();
        let b = Tensor::vector(vec![0.5, -0.5]);

        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w.clone());
        let bv = g.leaf(b.clone());
        let y = g.linear(xv, wv, Some(bv)).unwrap();

        let wt = g.transpose(wv).unwrap();
        let mm = g.matmul(xv, wt).unwrap();
        let alt = g.add(mm, bv).unwrap();
        assert_eq!(g.value(y).data(), g.value(alt).data());
    }

    #[test]
    fn cox_nll_matches_pure_function() {
        use crate::survival::{cox_partial_likelihood, SurvivalRecord};
        let etas = [0.3, -0.2, 1.1, 0.0];
        let times = [2.0, 1.0, 4.0, 3.0];
        let events = [true, true, false, true];
        let mut g = Graph::new();
        let e = leaf(&mut g, vec![4, 1], etas.to_vec(), false);
        let loss = g.cox_nll(e, &times, &events).unwrap();
        let records: Vec<SurvivalRecord> = times
            .iter()
            .zip(&events)
            .map(|(&t, &ev)| SurvivalRecord::new(t, ev))
            .collect();
        let pure = cox_partial_likelihood(&etas, &records).unwrap();
        assert_eq!(g.value(loss).data()[0], pure);
    }
}
