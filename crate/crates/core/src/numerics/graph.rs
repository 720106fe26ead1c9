//! Tape-based reverse-mode differentiation over [`DenseArray`] values.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! reverse topological traversal. A node only carries gradient when one of its
//! inputs does; [`Graph::stop_gradient`] cuts that flag, which makes every
//! parameter reachable solely through it receive an exact zero.

use std::collections::BTreeMap;

use super::array::{matmul, matmul_a_bt, matmul_at_b, normalize_slice, DenseArray};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Parameter(usize),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    Silu(Var),
    RmsRows(Var),
    GatherRows(Var, Vec<usize>),
    StopGradient,
    L1Mean(Var, Var),
    CosineRows(Var, Var),
    Sum(Var),
    WeightedSum(Vec<(f32, Var)>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: DenseArray,
    // Per-row inverse rms for `RmsRows`; per-row (dot, |a|, |b|) for `CosineRows`.
    cache: Vec<f64>,
    tracked: bool,
}

/// Recorded computation. Build it forward, then call [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    eps: f32,
}

/// Gradients keyed by parameter index.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<usize, DenseArray>,
}

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&DenseArray> {
        self.by_param.get(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &DenseArray)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }

    pub fn into_map(self) -> BTreeMap<usize, DenseArray> {
        self.by_param
    }
}

impl Graph {
    /// `rms_eps` is the stabiliser used by [`Graph::rms_normalize_rows`].
    pub fn new(rms_eps: f32) -> Self {
        Self {
            nodes: Vec::new(),
            eps: rms_eps,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value.values()[0]
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, op: Op, value: DenseArray, cache: Vec<f64>, tracked: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            cache,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(Op::Constant, value, Vec::new(), false)
    }

    /// Trainable leaf; its gradient is reported under `index`.
    pub fn parameter(&mut self, index: usize, value: DenseArray) -> Var {
        self.push(Op::Parameter(index), value, Vec::new(), true)
    }

    /// `[n×k] · [k×m]`; 1-D left operands are treated as a single row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 {
            return Err(Error::Shape(format!("matmul rhs must be 2-D, got {:?}", bv.shape())));
        }
        let (n, k) = (av.rows(), av.cols());
        let (k2, m) = (bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims {:?} · {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = DenseArray::new(vec![n, m], matmul(av.values(), bv.values(), n, k, m))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::MatMul(a, b), out, Vec::new(), tracked))
    }

    /// Adds a length-`m` bias to every row of an `[n×m]` array.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let m = xv.cols();
        if bv.len() != m {
            return Err(Error::Shape(format!(
                "bias of {} for rows of {m}",
                bv.len()
            )));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bv.values()) {
                *o += b;
            }
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(Op::AddRowBias(x, bias), out, Vec::new(), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Add(a, b), out, Vec::new(), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Sub(a, b), out, Vec::new(), tracked))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).scale(c);
        let tracked = self.tracked(a);
        self.push(Op::Scale(a, c), out, Vec::new(), tracked)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let tracked = self.tracked(a);
        self.push(Op::Silu(a), out, Vec::new(), tracked)
    }

    /// Row-wise RMS normalisation with the graph's epsilon and no gain.
    pub fn rms_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cache = (0..out.rows())
            .map(|i| normalize_slice(out.row_mut(i), self.eps))
            .collect();
        let tracked = self.tracked(a);
        self.push(Op::RmsRows(a), out, cache, tracked)
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(table).select_rows(indices)?;
        let tracked = self.tracked(table);
        Ok(self.push(
            Op::GatherRows(table, indices.to_vec()),
            out,
            Vec::new(),
            tracked,
        ))
    }

    /// Identity in the forward pass, zero gradient in the backward pass.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(Op::StopGradient, out, Vec::new(), false)
    }

    /// `mean |a − b|` over all elements.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.ensure_same_shape(bv, "l1 operands")?;
        let total: f64 = av
            .values()
            .iter()
            .zip(bv.values())
            .map(|(&x, &y)| f64::from((x - y).abs()))
            .sum();
        let out = DenseArray::scalar((total / av.len() as f64) as f32);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::L1Mean(a, b), out, Vec::new(), tracked))
    }

    /// Mean over rows of `1 − cos(a_i, b_i)`.
    pub fn cosine_loss_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.ensure_same_shape(bv, "cosine operands")?;
        let rows = av.rows();
        let mut cache = Vec::with_capacity(rows * 3);
        let mut total = 0.0f64;
        for i in 0..rows {
            let (x, y) = (av.row(i), bv.row(i));
            let (dot, nx, ny) = dot_norms(x, y);
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::Degenerate(format!(
                    "cosine loss of a zero vector (row {i})"
                )));
            }
            total += 1.0 - dot / (nx * ny);
            cache.extend_from_slice(&[dot, nx, ny]);
        }
        let out = DenseArray::scalar((total / rows as f64) as f32);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::CosineRows(a, b), out, cache, tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).values().iter().map(|&v| f64::from(v)).sum();
        let tracked = self.tracked(a);
        self.push(Op::Sum(a), DenseArray::scalar(total as f32), Vec::new(), tracked)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes. Terms with zero weight are not attached,
    /// so nothing behind them is visited by the backward pass.
    pub fn weighted_sum(&mut self, terms: &[(f32, Var)]) -> Result<Var> {
        let mut total = 0.0f64;
        let mut kept = Vec::new();
        for &(w, v) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::Shape("weighted_sum expects scalar terms".into()));
            }
            if w != 0.0 {
                total += f64::from(w) * f64::from(self.scalar(v));
                kept.push((w, v));
            }
        }
        let tracked = kept.iter().any(|&(_, v)| self.tracked(v));
        Ok(self.push(
            Op::WeightedSum(kept),
            DenseArray::scalar(total as f32),
            Vec::new(),
            tracked,
        ))
    }

    /// Reverse pass from a scalar root. Every parameter leaf on the tape gets
    /// an entry, zero when no tracked path connects it to `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        if self.tracked(root) {
            grads[root.0] = Some(vec![1.0]);
        }
        let mut out = Gradients::default();
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if let Op::Parameter(index) = node.op {
                let entry = out
                    .by_param
                    .entry(index)
                    .or_insert_with(|| DenseArray::zeros(node.value.shape()));
                if let Some(g) = grads[id].take() {
                    entry.accumulate(&g);
                }
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for node in &self.nodes[root.0 + 1..] {
            if let Op::Parameter(index) = node.op {
                out.by_param
                    .entry(index)
                    .or_insert_with(|| DenseArray::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut send = |v: Var, contribution: Vec<f32>| {
            if !self.tracked(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contribution) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Constant | Op::Parameter(_) | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.shape()[1]);
                if self.tracked(*a) {
                    send(*a, matmul_a_bt(g, bv.values(), n, k, m));
                }
                if self.tracked(*b) {
                    send(*b, matmul_at_b(av.values(), g, n, k, m));
                }
            }
            Op::AddRowBias(x, bias) => {
                send(*x, g.to_vec());
                if self.tracked(*bias) {
                    let m = self.value(*bias).len();
                    let mut gb = vec![0.0f32; m];
                    for row in g.chunks(m) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(*bias, gb);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::Silu(a) => {
                let x = self.value(*a).values();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                send(*a, d);
            }
            Op::RmsRows(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut d = vec![0.0f32; x.len()];
                for (i, &inv) in node.cache.iter().enumerate() {
                    let xr = x.row(i);
                    let gr = &g[i * c..(i + 1) * c];
                    let gx: f64 = xr
                        .iter()
                        .zip(gr)
                        .map(|(&xv, &gv)| f64::from(xv) * f64::from(gv))
                        .sum();
                    let k = inv * inv * inv * gx / c as f64;
                    for j in 0..c {
                        d[i * c + j] =
                            (inv * f64::from(gr[j]) - k * f64::from(xr[j])) as f32;
                    }
                }
                send(*a, d);
            }
            Op::GatherRows(table, indices) => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut d = vec![0.0f32; tv.len()];
                for (i, &r) in indices.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += g[i * c + j];
                    }
                }
                send(*table, d);
            }
            Op::L1Mean(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = g[0] / av.len() as f32;
                let d: Vec<f32> = av
                    .values()
                    .iter()
                    .zip(bv.values())
                    .map(|(&x, &y)| sign(x - y) * scale)
                    .collect();
                if self.tracked(*b) {
                    send(*b, d.iter().map(|v| -v).collect());
                }
                send(*a, d);
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let rows = av.rows();
                let c = av.cols();
                let scale = f64::from(g[0]) / rows as f64;
                let mut da = vec![0.0f32; av.len()];
                let mut db = vec![0.0f32; bv.len()];
                for i in 0..rows {
                    let (dot, na, nb) = (node.cache[3 * i], node.cache[3 * i + 1], node.cache[3 * i + 2]);
                    let cos = dot / (na * nb);
                    let (x, y) = (av.row(i), bv.row(i));
                    for j in 0..c {
                        let (xj, yj) = (f64::from(x[j]), f64::from(y[j]));
                        // d(1 − cos)/dx = −(y/(|x||y|) − cos·x/|x|²)
                        da[i * c + j] = (-scale * (yj / (na * nb) - cos * xj / (na * na))) as f32;
                        db[i * c + j] = (-scale * (xj / (na * nb) - cos * yj / (nb * nb))) as f32;
                    }
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                send(*a, vec![g[0]; n]);
            }
            Op::WeightedSum(terms) => {
                for &(w, v) in terms {
                    send(v, vec![w * g[0]]);
                }
            }
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dot_norms(x: &[f32], y: &[f32]) -> (f64, f64, f64) {
    let (mut dot, mut xx, mut yy) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    (dot, xx.sqrt(), yy.sqrt())
}
