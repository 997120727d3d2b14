//! Wengert-list reverse mode over [`Tensor`] values.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the backward sweep. Nodes are only ever appended, so node ids
//! are already a topological order and the backward pass is a single reverse
//! scan.

use super::params::{ParamId, ParamStore};
use super::rng::RngStream;
use super::tensor::{numel, Tensor};
use crate::error::{Result, SpgError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// The closed set of differentiable primitives (dropout is recorded
/// separately because it needs a random stream).
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// same shape elementwise sum
    Add,
    /// same shape elementwise product
    Mul,
    /// `[m, n] + [n] -> [m, n]`
    AddBias,
    Relu,
    /// log-softmax over the last axis
    LogSoftmax,
    /// `[rows, classes] -> [rows]`, one class index per row
    Gather(Vec<usize>),
    /// table `[vocab, e]` looked up at `rows * window` indices, giving
    /// `[rows, window * e]` with each row's embeddings concatenated
    Embedding { indices: Vec<usize>, window: usize },
    /// sum over the listed axes, which are removed from the shape
    Sum(Vec<usize>),
    /// mean over the listed axes, which are removed from the shape
    Mean(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::AddBias => "add_bias",
            Primitive::Relu => "relu",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Gather(_) => "gather",
            Primitive::Embedding { .. } => "embedding",
            Primitive::Sum(_) => "sum",
            Primitive::Mean(_) => "mean",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Mul | Primitive::AddBias => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    Embedding(Var, Vec<usize>),
    /// `map[i]` is the output slot of input element `i`
    Reduce { x: Var, map: Vec<usize>, mean: bool },
    /// per-element multiplier: 0 or 1/(1-p)
    Dropout(Var, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Store each registered parameter's gradient on its tensor. Parameters the
    /// loss does not depend on receive an all-zero gradient.
    pub fn write_to(&self, tape: &Tape, store: &mut ParamStore) {
        for &(pid, var) in &tape.params {
            let t = store.get_mut(pid);
            let g = match self.get(var) {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.len()],
            };
            t.grad = Some(g);
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SpgError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> SpgError {
    SpgError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Draw a keep-mask of `n` elements: each element is dropped with probability
/// `p`. Consumes exactly `n` words of the stream.
pub fn dropout_mask(n: usize, p: f64, rng: &mut RngStream) -> Vec<bool> {
    (0..n).map(|_| rng.next_f64() >= p).collect()
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(SpgError::invalid(format!(
            "dropout rate must lie in [0, 1), got {p}"
        )));
    }
    Ok(())
}

/// Inverted dropout on a plain tensor: survivors are scaled by `1/(1-p)`,
/// evaluation mode is the identity.
pub fn dropout(input: &Tensor, p: f64, rng: &mut RngStream, mode: Mode) -> Result<Tensor> {
    check_rate(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(input.clone());
    }
    let scale = 1.0 / (1.0 - p);
    let mask = dropout_mask(input.len(), p, rng);
    let data = input
        .data()
        .iter()
        .zip(&mask)
        .map(|(&x, &k)| if k { x * scale } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

fn reduce_map(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= rank) || axes.is_empty() {
        return Err(SpgError::invalid(format!(
            "reduction axes {axes:?} invalid for shape {shape:?}"
        )));
    }
    let out_shape: Vec<usize> = (0..rank)
        .filter(|d| !sorted.contains(d))
        .map(|d| shape[d])
        .collect();
    // output strides for the kept axes, zero for reduced axes
    let mut out_stride = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        if !sorted.contains(&d) {
            out_stride[d] = s;
            s *= shape[d];
        }
    }
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&out_stride).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out_shape, map))
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

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, requires_grad: bool) -> Result<Var> {
        check_finite(op, value.data())?;
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf. Its gradient is tracked when `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        let rg = tensor.requires_grad;
        let mut value = tensor;
        value.grad = None;
        self.push("leaf", value, Op::Leaf, rg)
    }

    /// Record a constant (never differentiated).
    pub fn constant(&mut self, mut tensor: Tensor) -> Result<Var> {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Register a parameter. Repeated registration of the same id within one
    /// tape returns the same node, so every use accumulates into one adjoint.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return Ok(v);
        }
        let mut t = store.get(id).clone();
        t.requires_grad = true;
        let v = self.leaf(t)?;
        self.params.push((id, v));
        Ok(v)
    }

    pub fn registered_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().copied()
    }

    /// Apply a primitive by kind.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != prim.arity() {
            return Err(SpgError::invalid(format!(
                "{} takes {} inputs, got {}",
                prim.name(),
                prim.arity(),
                inputs.len()
            )));
        }
        match prim {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::AddBias => self.add_bias(inputs[0], inputs[1]),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::LogSoftmax => self.log_softmax(inputs[0]),
            Primitive::Gather(c) => self.gather(inputs[0], c),
            Primitive::Embedding { indices, window } => self.embedding(inputs[0], indices, *window),
            Primitive::Sum(axes) => self.sum(inputs[0], axes),
            Primitive::Mean(axes) => self.mean(inputs[0], axes),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(name, t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(shape_err("add_bias", &sx, &sb));
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_bias", Tensor::new(sx, data)?, Op::AddBias(x, bias), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push("relu", t, Op::Relu(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let Some(&cols) = shape.last() else {
            return Err(shape_err("log_softmax", &shape, &[]));
        };
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let rg = self.rg(x);
        self.push("log_softmax", Tensor::new(shape, out)?, Op::LogSoftmax(x), rg)
    }

    pub fn gather(&mut self, x: Var, classes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != classes.len() {
            return Err(shape_err("gather", &shape, &[classes.len()]));
        }
        let cols = shape[1];
        if let Some(&bad) = classes.iter().find(|&&c| c >= cols) {
            return Err(SpgError::OutOfRange {
                what: "gather class",
                index: bad,
                bound: cols,
            });
        }
        let d = self.value(x).data();
        let out = classes.iter().enumerate().map(|(r, &c)| d[r * cols + c]).collect();
        let rg = self.rg(x);
        self.push(
            "gather",
            Tensor::new(vec![classes.len()], out)?,
            Op::Gather(x, classes.to_vec()),
            rg,
        )
    }

    pub fn embedding(&mut self, table: Var, indices: &[usize], window: usize) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || window == 0 || indices.is_empty() || !indices.len().is_multiple_of(window) {
            return Err(shape_err("embedding", &shape, &[indices.len(), window]));
        }
        let (vocab, e) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(SpgError::OutOfRange {
                what: "embedding row",
                index: bad,
                bound: vocab,
            });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            out.extend_from_slice(&t[i * e..(i + 1) * e]);
        }
        let rows = indices.len() / window;
        let rg = self.rg(table);
        self.push(
            "embedding",
            Tensor::new(vec![rows, window * e], out)?,
            Op::Embedding(table, indices.to_vec()),
            rg,
        )
    }

    fn reduce(&mut self, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (out_shape, map) = reduce_map(&shape, axes)?;
        let n_out = numel(&out_shape);
        let mut out = vec![0.0; n_out];
        for (&v, &slot) in self.value(x).data().iter().zip(&map) {
            out[slot] += v;
        }
        if mean {
            let inv = 1.0 / (map.len() / n_out) as f64;
            for o in &mut out {
                *o *= inv;
            }
        }
        let rg = self.rg(x);
        let name = if mean { "mean" } else { "sum" };
        self.push(name, Tensor::new(out_shape, out)?, Op::Reduce { x, map, mean }, rg)
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.sum(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.mean(x, &axes)
    }

    /// Inverted dropout. Evaluation mode and `p == 0` return `x` itself
    /// without recording a node or consuming randomness.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngStream, mode: Mode) -> Result<Var> {
        check_rate(p)?;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let scale: Vec<f64> = dropout_mask(t.len(), p, rng)
            .into_iter()
            .map(|k| if k { keep } else { 0.0 })
            .collect();
        let data = t.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push("dropout", t, Op::Dropout(x, scale), rg)
    }

    /// The keep-multipliers a dropout node applied, if `v` is one.
    pub fn dropout_scale(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Dropout(_, s) => Some(s),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(SpgError::Shape {
                op: "backward",
                lhs: lt.shape().to_vec(),
                rhs: Vec::new(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            // leaves keep their adjoint for the caller
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.rg(*a) {
                        // dA = G B^T
                        let bv = self.value(*b).data();
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bv[p * n + j];
                                }
                                da[i * k + p] = s;
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        // dB = A^T G
                        let av = self.value(*a).data();
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let x = av[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += x * g[i * n + j];
                                }
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let bv = self.value(*b).data();
                        accumulate(&mut grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    }
                    if self.rg(*b) {
                        let av = self.value(*a).data();
                        accumulate(&mut grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.rg(*bias) {
                        let n = self.shape(*bias)[0];
                        let mut db = vec![0.0; n];
                        for (i, v) in g.iter().enumerate() {
                            db[i % n] += v;
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().unwrap_or(&1);
                    let mut dx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(cols).zip(g.chunks(cols)) {
                        let gs: f64 = gr.iter().sum();
                        dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| gv - yv.exp() * gs));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather(x, classes) => {
                    let cols = self.shape(*x)[1];
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (r, &c) in classes.iter().enumerate() {
                        dx[r * cols + c] += g[r];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Embedding(table, indices) => {
                    let e = self.shape(*table)[1];
                    let mut dt = vec![0.0; self.value(*table).len()];
                    for (slot, &i) in indices.iter().enumerate() {
                        let src = &g[slot * e..(slot + 1) * e];
                        for (d, s) in dt[i * e..(i + 1) * e].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Reduce { x, map, mean } => {
                    let scale = if *mean {
                        1.0 / (map.len() / g.len()) as f64
                    } else {
                        1.0
                    };
                    let dx = map
                        .iter()
                        .map(|&slot| if *mean { g[slot] * scale } else { g[slot] })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dropout(x, scale) => {
                    let dx = g.iter().zip(scale).map(|(a, b)| a * b).collect();
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
