//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every forward op appends a node holding its output value and the ids of
//! its inputs; [`Tape::backward`] walks the nodes in reverse creation order,
//! which is a valid reverse topological order since inputs always precede
//! their consumers.
//!
//! Parameters are not copied onto the tape. A parameter leaf reads its
//! value straight out of the borrowed [`ParamStore`], and gradients for
//! parameters come back in a [`Gradients`] record that the caller folds into
//! the store with [`ParamStore::accumulate`]. Row gathers from a parameter
//! (embedding lookups) produce sparse row gradients so a large vocabulary
//! table is never densely materialised per sentence.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Ew {
        kind: EwKind,
        a: Var,
        b: Var,
    },
    MulRows {
        a: Var,
        v: Var,
    },
    Scale {
        a: Var,
        s: f64,
    },
    Act {
        kind: Activation,
        a: Var,
    },
    Softmax {
        a: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Slice {
        a: Var,
        start: usize,
    },
    Row {
        a: Var,
        index: usize,
    },
    Stack {
        parts: Vec<Var>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
    Sum {
        a: Var,
    },
    Interpolate {
        mem: Var,
        weights: Var,
        write: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Gradient for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    Dense(Vec<f64>),
    /// Row-sparse gradient of a matrix parameter with `cols` columns.
    Rows {
        cols: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl ParamGrad {
    pub fn to_dense(&self, numel: usize) -> Vec<f64> {
        match self {
            ParamGrad::Dense(g) => g.clone(),
            ParamGrad::Rows { cols, rows } => {
                let mut out = vec![0.0; numel];
                for (&r, g) in rows {
                    for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                        *o += v;
                    }
                }
                out
            }
        }
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, ParamGrad>,
}

impl Gradients {
    /// Gradient of the loss with respect to a non-parameter node.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&ParamGrad> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ParamGrad)> {
        self.params.iter().map(|(&id, g)| (id, g))
    }
}

impl ParamStore {
    /// Adds a backward result into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (&id, g) in &grads.params {
            let t = self.get_mut(id);
            let numel = t.numel();
            let buf = t.grad.get_or_insert_with(|| vec![0.0; numel]);
            match g {
                ParamGrad::Dense(d) => {
                    for (b, v) in buf.iter_mut().zip(d) {
                        *b += v;
                    }
                }
                ParamGrad::Rows { cols, rows } => {
                    for (&r, d) in rows {
                        for (b, v) in buf[r * cols..(r + 1) * cols].iter_mut().zip(d) {
                            *b += v;
                        }
                    }
                }
            }
        }
    }
}

/// Recording context for one forward/backward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    stochastic: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-softmax of a slice.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            bound: HashMap::new(),
            stochastic: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once any training-mode dropout has been recorded.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn store(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => &self.params.get(*id).data,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        match s.len() {
            1 => (1, s[0]),
            _ => (s[0], s[1]),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Gradients are tracked when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        self.nodes.push(Node {
            shape: tensor.shape,
            value: Value::Owned(tensor.data),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let shape = self.params.get(id).shape.clone();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// Matrix product. A rank-1 right operand is a column vector and a
    /// rank-1 left operand a row vector, so `matmul` doubles as
    /// matrix-vector, vector-matrix and dot product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (2, 1) => (sa[0], sa[1], 1, vec![sa[0]]),
            (1, 2) => (1, sa[0], sb[1], vec![sb[1]]),
            (1, 1) => (1, sa[0], 1, vec![1]),
            _ => return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let kb = sb[0];
        if k != kb {
            return Err(Error::dim(
                "matmul",
                format!("inner dims differ: {sa:?} x {sb:?}"),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &x) in arow.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "matmul",
            out_shape,
            out,
            Op::MatMul { a, b, m, k, n },
            needs,
        )
    }

    /// Elementwise binary op. `b` may also be a vector broadcast over the
    /// rows of a matrix `a`.
    pub fn ew(&mut self, kind: EwKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let broadcast = sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0];
        if sa != sb && !broadcast {
            return Err(Error::dim("ew", format!("{sa:?} vs {sb:?}")));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let width = bv.len();
        let f = match kind {
            EwKind::Add => |x: f64, y: f64| x + y,
            EwKind::Sub => |x: f64, y: f64| x - y,
            EwKind::Mul => |x: f64, y: f64| x * y,
        };
        let out: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % width]))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push("ew", sa, out, Op::Ew { kind, a, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(EwKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(EwKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(EwKind::Mul, a, b)
    }

    /// Scales row `i` of matrix `a` by `v[i]`.
    pub fn mul_rows(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(a);
        if self.shape(a).len() != 2 || self.shape(v) != [m] {
            return Err(Error::dim(
                "mul_rows",
                format!("{:?} by {:?}", self.shape(a), self.shape(v)),
            ));
        }
        let av = self.value(a);
        let vv = self.value(v);
        let out: Vec<f64> = av.iter().enumerate().map(|(i, &x)| x * vv[i / n]).collect();
        let needs = self.needs(a) || self.needs(v);
        self.push("mul_rows", vec![m, n], out, Op::MulRows { a, v }, needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push("scale", shape, out, Op::Scale { a, s }, needs)
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var> {
        let out: Vec<f64> = match kind {
            Activation::Sigmoid => self.value(a).iter().map(|&x| sigmoid(x)).collect(),
            Activation::Tanh => self.value(a).iter().map(|x| x.tanh()).collect(),
        };
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push("activation", shape, out, Op::Act { kind, a }, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Tanh, a)
    }

    /// Row-wise softmax; a vector is treated as a single row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(a);
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            softmax_into(&av[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push("softmax_rows", shape, out, Op::Softmax { a }, needs)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat", format!("{sa:?} with {sb:?}")));
        }
        let (m, p) = self.rows_cols(a);
        let (_, q) = self.rows_cols(b);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = p + q;
        let needs = self.needs(a) || self.needs(b);
        self.push("concat", shape, out, Op::Concat { a, b }, needs)
    }

    /// Contiguous sub-vector `a[start..start + len]` of a rank-1 node.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 1 || len == 0 || start + len > s[0] {
            return Err(Error::dim(
                "slice",
                format!("[{start}..{}] of {s:?}", start + len),
            ));
        }
        let out = self.value(a)[start..start + len].to_vec();
        let needs = self.needs(a);
        self.push("slice", vec![len], out, Op::Slice { a, start }, needs)
    }

    /// Row `index` of a matrix as a vector.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let (m, n) = self.rows_cols(a);
        if self.shape(a).len() != 2 {
            return Err(Error::dim(
                "row",
                format!("rank-1 input {:?}", self.shape(a)),
            ));
        }
        if index >= m {
            return Err(Error::Index { index, size: m });
        }
        let out = self.value(a)[index * n..(index + 1) * n].to_vec();
        let needs = self.needs(a);
        self.push("row", vec![n], out, Op::Row { a, index }, needs)
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("stack_rows", "no rows"))?;
        let n = self.shape(first)[0];
        let mut out = Vec::with_capacity(parts.len() * n);
        for &p in parts {
            if self.shape(p) != [n] {
                return Err(Error::dim(
                    "stack_rows",
                    format!("row {:?} vs [{n}]", self.shape(p)),
                ));
            }
            out.extend_from_slice(self.value(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "stack_rows",
            vec![parts.len(), n],
            out,
            Op::Stack {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    /// Embedding lookup: row `t` of the result is `table[ids[t]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.rows_cols(table);
        if self.shape(table).len() != 2 {
            return Err(Error::dim("gather_rows", "table must be a matrix"));
        }
        if ids.is_empty() {
            return Err(Error::dim("gather_rows", "empty id list"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, size: v });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(
            "gather_rows",
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("{:?} to {shape:?}", self.shape(a)),
            ));
        }
        let out = self.value(a).to_vec();
        let needs = self.needs(a);
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a }, needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::dim("transpose", format!("{:?}", self.shape(a))));
        }
        let (m, n) = self.rows_cols(a);
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.push("transpose", vec![n, m], out, Op::Transpose { a }, needs)
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        self.stochastic = true;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push("dropout", shape, out, Op::Dropout { a, mask }, needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let needs = self.needs(a);
        self.push("sum", vec![1], vec![s], Op::Sum { a }, needs)
    }

    /// Per-row interpolation toward a shared vector:
    /// `out[i] = (1 - weights[i]) * mem[i] + weights[i] * write`.
    ///
    /// Each output coordinate is clamped into the interval spanned by its
    /// two endpoints so rounding never leaves the convex hull.
    pub fn interpolate_rows(&mut self, mem: Var, weights: Var, write: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(mem);
        if self.shape(mem).len() != 2 || self.shape(weights) != [m] || self.shape(write) != [n] {
            return Err(Error::dim(
                "interpolate_rows",
                format!(
                    "{:?}, {:?}, {:?}",
                    self.shape(mem),
                    self.shape(weights),
                    self.shape(write)
                ),
            ));
        }
        let mv = self.value(mem);
        let wv = self.value(weights);
        let xv = self.value(write);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let s = wv[i];
            for j in 0..n {
                let a = mv[i * n + j];
                let b = xv[j];
                let v = (1.0 - s) * a + s * b;
                out[i * n + j] = v.clamp(a.min(b), a.max(b));
            }
        }
        let needs = self.needs(mem) || self.needs(weights) || self.needs(write);
        self.push(
            "interpolate_rows",
            vec![m, n],
            out,
            Op::Interpolate {
                mem,
                weights,
                write,
            },
            needs,
        )
    }

    /// Mean token cross-entropy. `logits` is `[T x V]`; positions whose
    /// `mask` entry is false are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.rows_cols(logits);
        if self.shape(logits).len() != 2 || targets.len() != t || mask.len() != t {
            return Err(Error::Usage(format!(
                "cross_entropy: logits {:?}, {} targets, {} mask entries",
                self.shape(logits),
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Usage(
                "cross_entropy: every target position is padding".into(),
            ));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        let mut kept = Vec::with_capacity(t);
        for r in 0..t {
            if !mask[r] {
                kept.push(usize::MAX);
                continue;
            }
            let y = targets[r];
            if y >= v {
                return Err(Error::Index { index: y, size: v });
            }
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            kept.push(y);
        }
        let loss = total / count as f64;
        let needs = self.needs(logits);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: kept,
                count,
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut sparse: BTreeMap<ParamId, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads, &mut sparse);
            grads[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (&id, &var) in &self.bound {
            let dense = grads[var.0].take();
            let rows = sparse.remove(&id);
            let entry = match (dense, rows) {
                (Some(mut d), Some(rows)) => {
                    let cols = self.params.get(id).cols();
                    for (r, g) in rows {
                        add_into(&mut d[r * cols..(r + 1) * cols], &g);
                    }
                    ParamGrad::Dense(d)
                }
                (Some(d), None) => ParamGrad::Dense(d),
                (None, Some(rows)) => ParamGrad::Rows {
                    cols: self.params.get(id).cols(),
                    rows,
                },
                (None, None) => continue,
            };
            params.insert(id, entry);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn param_of(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].value {
            Value::Param(id) => Some(id),
            Value::Owned(_) => None,
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(target) {
            return;
        }
        let len = self.value(target).len();
        let buf = grads[target.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        sparse: &mut BTreeMap<ParamId, BTreeMap<usize, Vec<f64>>>,
    ) {
        let out = self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let av = self.value(a);
                let bv = self.value(b);
                self.acc(grads, a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.acc(grads, b, |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * gv;
                            }
                        }
                    }
                });
            }
            &Op::Ew { kind, a, b } => {
                let av = self.value(a);
                let bv = self.value(b);
                let w = bv.len();
                match kind {
                    EwKind::Add | EwKind::Sub => {
                        let sign = if kind == EwKind::Add { 1.0 } else { -1.0 };
                        self.acc(grads, a, |da| add_into(da, g));
                        self.acc(grads, b, |db| {
                            for (i, gv) in g.iter().enumerate() {
                                db[i % w] += sign * gv;
                            }
                        });
                    }
                    EwKind::Mul => {
                        self.acc(grads, a, |da| {
                            for (i, gv) in g.iter().enumerate() {
                                da[i] += gv * bv[i % w];
                            }
                        });
                        self.acc(grads, b, |db| {
                            for (i, gv) in g.iter().enumerate() {
                                db[i % w] += gv * av[i];
                            }
                        });
                    }
                }
            }
            &Op::MulRows { a, v } => {
                let (_, n) = self.rows_cols(a);
                let av = self.value(a);
                let vv = self.value(v);
                self.acc(grads, a, |da| {
                    for (i, gv) in g.iter().enumerate() {
                        da[i] += gv * vv[i / n];
                    }
                });
                self.acc(grads, v, |dv| {
                    for (i, gv) in g.iter().enumerate() {
                        dv[i / n] += gv * av[i];
                    }
                });
            }
            &Op::Scale { a, s } => self.acc(grads, a, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += s * gv;
                }
            }),
            &Op::Act { kind, a } => self.acc(grads, a, |da| {
                for ((d, gv), y) in da.iter_mut().zip(g).zip(out) {
                    *d += match kind {
                        Activation::Sigmoid => gv * y * (1.0 - y),
                        Activation::Tanh => gv * (1.0 - y * y),
                    };
                }
            }),
            &Op::Softmax { a } => {
                let (m, n) = self.rows_cols(a);
                self.acc(grads, a, |da| {
                    for r in 0..m {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            da[r * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            &Op::Concat { a, b } => {
                let (m, p) = self.rows_cols(a);
                let (_, q) = self.rows_cols(b);
                self.acc(grads, a, |da| {
                    for r in 0..m {
                        add_into(
                            &mut da[r * p..(r + 1) * p],
                            &g[r * (p + q)..r * (p + q) + p],
                        );
                    }
                });
                self.acc(grads, b, |db| {
                    for r in 0..m {
                        add_into(
                            &mut db[r * q..(r + 1) * q],
                            &g[r * (p + q) + p..(r + 1) * (p + q)],
                        );
                    }
                });
            }
            &Op::Slice { a, start } => {
                self.acc(grads, a, |da| add_into(&mut da[start..start + g.len()], g));
            }
            &Op::Row { a, index } => {
                let n = g.len();
                self.acc(grads, a, |da| {
                    add_into(&mut da[index * n..(index + 1) * n], g)
                });
            }
            Op::Stack { parts } => {
                let n = self.value(parts[0]).len();
                for (r, &p) in parts.iter().enumerate() {
                    self.acc(grads, p, |dp| add_into(dp, &g[r * n..(r + 1) * n]));
                }
            }
            Op::Gather { table, ids } => {
                let (_, d) = self.rows_cols(*table);
                if let Some(pid) = self.param_of(*table) {
                    let rows = sparse.entry(pid).or_default();
                    for (t, &id) in ids.iter().enumerate() {
                        let row = rows.entry(id).or_insert_with(|| vec![0.0; d]);
                        add_into(row, &g[t * d..(t + 1) * d]);
                    }
                } else {
                    self.acc(grads, *table, |dt| {
                        for (t, &id) in ids.iter().enumerate() {
                            add_into(&mut dt[id * d..(id + 1) * d], &g[t * d..(t + 1) * d]);
                        }
                    });
                }
            }
            &Op::Reshape { a } => self.acc(grads, a, |da| add_into(da, g)),
            &Op::Transpose { a } => {
                let (m, n) = self.rows_cols(a);
                self.acc(grads, a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => self.acc(grads, *a, |da| {
                for ((d, gv), mv) in da.iter_mut().zip(g).zip(mask) {
                    *d += gv * mv;
                }
            }),
            &Op::Sum { a } => self.acc(grads, a, |da| da.iter_mut().for_each(|d| *d += g[0])),
            &Op::Interpolate {
                mem,
                weights,
                write,
            } => {
                let (m, n) = self.rows_cols(mem);
                let mv = self.value(mem);
                let wv = self.value(weights);
                let xv = self.value(write);
                self.acc(grads, mem, |dm| {
                    for i in 0..m {
                        for j in 0..n {
                            dm[i * n + j] += (1.0 - wv[i]) * g[i * n + j];
                        }
                    }
                });
                self.acc(grads, weights, |dw| {
                    for i in 0..m {
                        for j in 0..n {
                            dw[i] += g[i * n + j] * (xv[j] - mv[i * n + j]);
                        }
                    }
                });
                self.acc(grads, write, |dx| {
                    for i in 0..m {
                        for j in 0..n {
                            dx[j] += wv[i] * g[i * n + j];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                count,
            } => {
                let (_, v) = self.rows_cols(*logits);
                let lv = self.value(*logits);
                let scale = g[0] / *count as f64;
                self.acc(grads, *logits, |dl| {
                    for (r, &y) in targets.iter().enumerate() {
                        if y == usize::MAX {
                            continue;
                        }
                        let row = &lv[r * v..(r + 1) * v];
                        let mut p = vec![0.0; v];
                        softmax_into(row, &mut p);
                        p[y] -= 1.0;
                        for (d, pv) in dl[r * v..(r + 1) * v].iter_mut().zip(&p) {
                            *d += scale * pv;
                        }
                    }
                });
            }
        }
    }
}
