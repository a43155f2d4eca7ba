//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the ids of
//! its inputs. Node ids grow monotonically, so the tape is always in
//! topological order and a single reverse sweep visits each node once.

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};
use crate::ssm::recurrence;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    Gelu(Var),
    Sum(Var),
    Mse(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SsmScan {
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        h: Var,
        states: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

// tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_rows(x: &[f64], rows: usize, n: usize, causal: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let limit = if causal { (r + 1).min(n) } else { n };
        let row = &x[r * n..r * n + limit];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * n..r * n + limit];
        let mut total = 0.0;
        for (oi, xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            total += *oi;
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Numerically stable softmax over the last axis of a plain tensor.
pub fn softmax(x: &Tensor) -> Tensor {
    let n = x.cols();
    let rows = x.numel() / n;
    Tensor::from_parts(x.shape().to_vec(), softmax_rows(x.data(), rows, n, false))
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a tensor as an input. Gradients flow to it iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        self.push("matmul", vec![m, n], value, Op::MatMul(a, b), rg)
    }

    /// Pointwise `a ∘ b`, where `b` may broadcast over leading axes of `a`
    /// when its shape is a suffix of `a`'s shape.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(Error::dim("elementwise", sa, sb));
        }
        let shape = sa.to_vec();
        let (da, db) = (self.data(a), self.data(b));
        let m = db.len();
        let value: Vec<f64> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = db[i % m];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        let rg = self.requires(a) || self.requires(b);
        self.push("elementwise", shape, value, Op::Binary(kind, a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.data(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push("scale", shape, value, Op::Scale(a, s), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::contract("transpose needs a 2-D tensor"));
        }
        let (r, c) = (s[0], s[1]);
        let value = transpose_raw(self.data(a), r, c);
        let rg = self.requires(a);
        self.push("transpose", vec![c, r], value, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(a).len() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let value = self.data(a).to_vec();
        let rg = self.requires(a);
        self.push("reshape", shape.to_vec(), value, Op::Reshape(a), rg)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax of a 2-D score matrix where row `i` only attends to
    /// columns `0..=i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::contract("causal softmax needs a 2-D tensor"));
        }
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let rows = self.data(x).len() / n;
        let value = softmax_rows(self.data(x), rows, n, causal);
        let rg = self.requires(x);
        self.push("softmax", shape, value, Op::Softmax(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.data(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push("gelu", shape, value, Op::Gelu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = vec![self.data(x).iter().sum()];
        let rg = self.requires(x);
        self.push("sum", vec![1], value, Op::Sum(x), rg)
    }

    /// `(1/T) Σ_t ‖pred_t − target_t‖²` over the rows of `[T×d]` operands.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(Error::dim("mse", sp, st));
        }
        let t = if sp.len() >= 2 { sp[0] } else { 1 };
        let value = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / t as f64;
        let rg = self.requires(pred) || self.requires(target);
        self.push("mse", vec![1], vec![value], Op::Mse(pred, target), rg)
    }

    /// Mean over rows of `−log softmax(logits_t)[targets_t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::dim("cross_entropy", shape, &[targets.len()]));
        }
        let (t, v) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                bound: v,
            });
        }
        let data = self.data(logits);
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &id)| -log_softmax_row(&data[r * v..(r + 1) * v])[id])
            .sum();
        let rg = self.requires(logits);
        self.push(
            "cross_entropy",
            vec![1],
            vec![total / t as f64],
            Op::CrossEntropy(logits, targets.to_vec()),
            rg,
        )
    }

    /// Selects rows of a 2-D table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 || ids.is_empty() {
            return Err(Error::contract("gather_rows needs a 2-D table and ids"));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                bound: rows,
            });
        }
        let data = self.data(table);
        let value = ids
            .iter()
            .flat_map(|&id| data[id * d..(id + 1) * d].iter().copied())
            .collect();
        let rg = self.requires(table);
        self.push(
            "gather_rows",
            vec![ids.len(), d],
            value,
            Op::GatherRows(table, ids.to_vec()),
            rg,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || len == 0 || start + len > s[0] {
            return Err(Error::dim("slice_rows", s, &[start, len]));
        }
        let d = s[1];
        let value = self.data(a)[start * d..(start + len) * d].to_vec();
        let rg = self.requires(a);
        self.push("slice_rows", vec![len, d], value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::dim("slice_cols", s, &[start, len]));
        }
        let (r, c) = (s[0], s[1]);
        let data = self.data(a);
        let value = (0..r)
            .flat_map(|i| data[i * c + start..i * c + start + len].iter().copied())
            .collect();
        let rg = self.requires(a);
        self.push("slice_cols", vec![r, len], value, Op::SliceCols(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("empty concat"))?;
        let d = self.shape(*first)[1];
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(Error::dim("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            value.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push("concat_rows", vec![rows, d], value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("empty concat"))?;
        let r = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != r {
                return Err(Error::dim("concat_cols", self.shape(*first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push("concat_cols", vec![r, total], value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Linear state space recurrence run over the rows of `h`:
    /// `y_t = C s_t + D h_t`, `s_{t+1} = A s_t + B h_t`, `s_0 = 0`.
    pub fn ssm_scan(&mut self, a: Var, b: Var, c: Var, d: Var, h: Var) -> Result<Var> {
        let dims = recurrence::check_dims(self.shape(a), self.shape(b), self.shape(c), self.shape(d), self.shape(h))?;
        let (y, states) = recurrence::forward(
            self.data(a),
            self.data(b),
            self.data(c),
            self.data(d),
            self.data(h),
            dims,
        );
        let rg = [a, b, c, d, h].iter().any(|&v| self.requires(v));
        self.push(
            "ssm_scan",
            vec![dims.steps, dims.width],
            y,
            Op::SsmScan {
                a,
                b,
                c,
                d,
                h,
                states,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires(*a) {
                    let bt = transpose_raw(self.data(*b), k, n);
                    add_into(&mut grads[a.0], &matmul_raw(g, &bt, m, n, k));
                }
                if self.requires(*b) {
                    let at = transpose_raw(self.data(*a), m, k);
                    add_into(&mut grads[b.0], &matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Binary(kind, a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let m = db.len();
                if self.requires(*a) {
                    let ga: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => g.iter().enumerate().map(|(i, gi)| gi * db[i % m]).collect(),
                    };
                    add_into(&mut grads[a.0], &ga);
                }
                if self.requires(*b) {
                    let mut gb = vec![0.0; m];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % m] += match kind {
                            BinaryKind::Add => *gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * da[i],
                        };
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Transpose(a) => {
                let s = &node.shape;
                add_into(&mut grads[a.0], &transpose_raw(g, s[0], s[1]));
            }
            Op::Reshape(a) => add_into(&mut grads[a.0], g),
            Op::Softmax(x) => {
                let n = *node.shape.last().unwrap();
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let span = r * n..(r + 1) * n;
                    let dot: f64 = y[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                    for i in span {
                        gx[i] = y[i] * (g[i] - dot);
                    }
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::Gelu(x) => {
                let gx: Vec<f64> = self.data(*x).iter().zip(g).map(|(&v, gi)| gi * gelu_grad(v)).collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.data(*x).len()];
                add_into(&mut grads[x.0], &gx);
            }
            Op::Mse(p, q) => {
                let sp = self.shape(*p);
                let t = if sp.len() >= 2 { sp[0] } else { 1 };
                let coef = 2.0 * g[0] / t as f64;
                let diff: Vec<f64> = self.data(*p).iter().zip(self.data(*q)).map(|(a, b)| coef * (a - b)).collect();
                if self.requires(*p) {
                    add_into(&mut grads[p.0], &diff);
                }
                if self.requires(*q) {
                    let neg: Vec<f64> = diff.iter().map(|x| -x).collect();
                    add_into(&mut grads[q.0], &neg);
                }
            }
            Op::CrossEntropy(logits, targets) => {
                let s = self.shape(*logits);
                let (t, v) = (s[0], s[1]);
                let data = self.data(*logits);
                let probs = softmax_rows(data, t, v, false);
                let coef = g[0] / t as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * coef).collect();
                for (r, &id) in targets.iter().enumerate() {
                    gl[r * v + id] -= coef;
                }
                add_into(&mut grads[logits.0], &gl);
            }
            Op::GatherRows(table, ids) => {
                let d = node.shape[1];
                let mut gt = vec![0.0; self.data(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
                add_into(&mut grads[table.0], &gt);
            }
            Op::SliceRows(a, start) => {
                let d = node.shape[1];
                let mut ga = vec![0.0; self.data(*a).len()];
                ga[start * d..start * d + g.len()].copy_from_slice(g);
                add_into(&mut grads[a.0], &ga);
            }
            Op::SliceCols(a, start) => {
                let (r, len) = (node.shape[0], node.shape[1]);
                let c = self.shape(*a)[1];
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.data(*p).len();
                    if self.requires(*p) {
                        add_into(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let r = node.shape[0];
                let total = node.shape[1];
                let mut col = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if self.requires(*p) {
                        let gp: Vec<f64> = (0..r)
                            .flat_map(|i| g[i * total + col..i * total + col + w].iter().copied())
                            .collect();
                        add_into(&mut grads[p.0], &gp);
                    }
                    col += w;
                }
            }
            Op::SsmScan {
                a,
                b,
                c,
                d,
                h,
                states,
            } => {
                let dims = recurrence::check_dims(self.shape(*a), self.shape(*b), self.shape(*c), self.shape(*d), self.shape(*h))
                    .expect("validated at record time");
                let pg = recurrence::backward(
                    self.data(*a),
                    self.data(*b),
                    self.data(*c),
                    self.data(*d),
                    self.data(*h),
                    states,
                    g,
                    dims,
                );
                for (var, grad) in [(a, pg.a), (b, pg.b), (c, pg.c), (d, pg.d), (h, pg.h)] {
                    if self.requires(*var) {
                        add_into(&mut grads[var.0], &grad);
                    }
                }
            }
        }
    }
}
