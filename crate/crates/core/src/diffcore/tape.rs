//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] walks the nodes
//! in reverse and returns a [`Gradients`] map keyed by parameter. Nodes that
//! cannot reach a trainable parameter are skipped during the backward pass,
//! so data tensors and frozen networks cost nothing beyond their forward
//! evaluation.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::special::{digamma, ln_gamma, trigamma};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors owned by one model component.
///
/// The `tag` distinguishes stores in a [`Gradients`] map when several stores
/// feed the same tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tag: u32,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(tag: u32) -> Self {
        Self {
            tag,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn tag(&self) -> u32 {
        self.tag
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    DivCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    LogClamp(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    SoftmaxRows(usize),
    Sqrt(usize),
    Square(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    Reshape(usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    Lgamma(usize),
    Digamma(usize),
    Partials2(usize, usize, Box<(Tensor, Tensor)>),
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<(u32, ParamId)>,
    needs_grad: bool,
}

/// Recorded computation graph. Single-threaded; build one per batch.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    clamp_events: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by `(store tag, param)`.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: HashMap<(u32, ParamId), Tensor>,
}

impl Gradients {
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.map.get(&(store.tag(), id))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains_store(&self, store: &ParamStore) -> bool {
        self.map.keys().any(|(t, _)| *t == store.tag())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            clamp_events: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `log_clamp` evaluations that hit the floor.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.idx
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf reading the current value of `id` from `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes[v.idx].param = Some((store.tag(), id));
        v
    }

    /// Leaf for a parameter that should receive no gradient.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Var {
        let ia = self.idx(a);
        let value = self.nodes[ia].value.map(f);
        let ng = self.ng(ia);
        self.push(value, op(ia), ng)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let value = self.nodes[ia].value.zip_map(&self.nodes[ib].value, name, f)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(value, op(ia, ib), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(value, Op::MatMul(ia, ib), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn broadcast(
        &mut self,
        a: Var,
        b: Var,
        by_row: bool,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let av = &self.nodes[ia].value;
        let bv = &self.nodes[ib].value;
        let [n, m] = av.shape();
        let expected = if by_row { [1, m] } else { [n, 1] };
        if bv.shape() != expected {
            return Err(Error::Shape {
                op: name,
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut out = av.data().to_vec();
        let bd = bv.data();
        for i in 0..n {
            for j in 0..m {
                let o = &mut out[i * m + j];
                *o = f(*o, if by_row { bd[j] } else { bd[i] });
            }
        }
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(Tensor::new(n, m, out)?, op(ia, ib), ng))
    }

    /// `a[n,m] + row[1,m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast(a, row, true, "add_row", |x, y| x + y, Op::AddRow)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast(a, row, true, "mul_row", |x, y| x * y, Op::MulRow)
    }

    /// `a[n,m] + col[n,1]` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.broadcast(a, col, false, "add_col", |x, y| x + y, Op::AddCol)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.broadcast(a, col, false, "mul_col", |x, y| x * y, Op::MulCol)
    }

    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.broadcast(a, col, false, "div_col", |x, y| x / y, Op::DivCol)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, |i| Op::Scale(i, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log)
    }

    /// `ln(max(a, floor))`; values at the floor pass no gradient and are
    /// counted in [`Tape::clamp_events`].
    pub fn log_clamp(&mut self, a: Var, floor: f64) -> Var {
        let ia = self.idx(a);
        let hits = self.nodes[ia].value.data().iter().filter(|&&x| x < floor).count();
        self.clamp_events += hits;
        self.unary(a, |x| x.max(floor).ln(), |i| Op::LogClamp(i, floor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn lgamma(&mut self, a: Var) -> Var {
        self.unary(a, ln_gamma, Op::Lgamma)
    }

    pub fn digamma(&mut self, a: Var) -> Var {
        self.unary(a, digamma, Op::Digamma)
    }

    /// Elementwise node `value = f(a, b)` whose partials `∂f/∂a`, `∂f/∂b`
    /// the caller has already evaluated. All four tensors share one shape.
    pub fn with_partials(&mut self, a: Var, b: Var, value: Tensor, da: Tensor, db: Tensor) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let shape = value.shape();
        for t in [&self.nodes[ia].value, &self.nodes[ib].value, &da, &db] {
            if t.shape() != shape {
                return Err(Error::Shape {
                    op: "with_partials",
                    left: shape,
                    right: t.shape(),
                });
            }
        }
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(value, Op::Partials2(ia, ib, Box::new((da, db))), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let value = softmax_rows(&self.nodes[ia].value);
        let ng = self.ng(ia);
        self.push(value, Op::SoftmaxRows(ia), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let value = Tensor::scalar(self.nodes[ia].value.sum());
        let ng = self.ng(ia);
        self.push(value, Op::SumAll(ia), ng)
    }

    /// Row sums: `[n, m] -> [n, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let av = &self.nodes[ia].value;
        let sums: Vec<f64> = (0..av.rows()).map(|r| av.row_slice(r).iter().sum()).collect();
        let ng = self.ng(ia);
        self.push(Tensor::column(sums), Op::SumRows(ia), ng)
    }

    /// Column sums: `[n, m] -> [1, m]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let av = &self.nodes[ia].value;
        let mut sums = vec![0.0; av.cols()];
        for r in 0..av.rows() {
            for (s, x) in sums.iter_mut().zip(av.row_slice(r)) {
                *s += x;
            }
        }
        let ng = self.ng(ia);
        self.push(Tensor::row(sums), Op::SumCols(ia), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ia = self.idx(a);
        let value = self.nodes[ia].value.clone().reshape(rows, cols)?;
        let ng = self.ng(ia);
        Ok(self.push(value, Op::Reshape(ia), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let value = self.nodes[ia].value.transpose();
        let ng = self.ng(ia);
        self.push(value, Op::Transpose(ia), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idxs: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect();
        let rows = self.nodes[idxs[0]].value.rows();
        let mut total = 0;
        for &i in &idxs {
            let v = &self.nodes[i].value;
            if v.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.nodes[idxs[0]].value.shape(),
                    right: v.shape(),
                });
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idxs {
                data.extend_from_slice(self.nodes[i].value.row_slice(r));
            }
        }
        let ng = idxs.iter().any(|&i| self.ng(i));
        Ok(self.push(Tensor::new(rows, total, data)?, Op::ConcatCols(idxs), ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::Tape("loss is not recorded on this tape".into()));
        }
        if self.nodes[loss.idx].value.shape() != [1, 1] {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let val = &node.value;
            match &node.op {
                Op::Leaf => {
                    if let Some(key) = node.param {
                        match out.map.get_mut(&key) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                out.map.insert(key, g);
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let [m, k] = av.shape();
                    let n = bv.cols();
                    if self.ng(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                        accumulate(&mut grads, *a, Tensor::new(m, k, da)?);
                    }
                    if self.ng(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                        accumulate(&mut grads, *b, Tensor::new(k, n, db)?);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.zip_map(bv, "mul", |x, y| x * y)?);
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.zip_map(av, "mul", |x, y| x * y)?);
                    }
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[*b].value;
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.zip_map(bv, "div", |x, y| x / y)?);
                    }
                    if self.ng(*b) {
                        // d(a/b)/db = -(a/b)/b
                        let q = val.zip_map(bv, "div", |o, y| -o / y)?;
                        accumulate(&mut grads, *b, g.zip_map(&q, "div", |x, y| x * y)?);
                    }
                }
                Op::AddRow(a, r) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*r) {
                        accumulate(&mut grads, *r, col_sums(&g));
                    }
                }
                Op::MulRow(a, r) => {
                    let av = &self.nodes[*a].value;
                    let rv = &self.nodes[*r].value;
                    let [n, m] = g.shape();
                    if self.ng(*a) {
                        let mut d = g.data().to_vec();
                        for i in 0..n {
                            for j in 0..m {
                                d[i * m + j] *= rv.data()[j];
                            }
                        }
                        accumulate(&mut grads, *a, Tensor::new(n, m, d)?);
                    }
                    if self.ng(*r) {
                        let prod = g.zip_map(av, "mul_row", |x, y| x * y)?;
                        accumulate(&mut grads, *r, col_sums(&prod));
                    }
                }
                Op::AddCol(a, c) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*c) {
                        accumulate(&mut grads, *c, row_sums(&g));
                    }
                }
                Op::MulCol(a, c) => {
                    let av = &self.nodes[*a].value;
                    let cv = &self.nodes[*c].value;
                    let [n, m] = g.shape();
                    if self.ng(*a) {
                        let mut d = g.data().to_vec();
                        for i in 0..n {
                            let s = cv.data()[i];
                            for x in &mut d[i * m..(i + 1) * m] {
                                *x *= s;
                            }
                        }
                        accumulate(&mut grads, *a, Tensor::new(n, m, d)?);
                    }
                    if self.ng(*c) {
                        let prod = g.zip_map(av, "mul_col", |x, y| x * y)?;
                        accumulate(&mut grads, *c, row_sums(&prod));
                    }
                }
                Op::DivCol(a, c) => {
                    let cv = &self.nodes[*c].value;
                    let [n, m] = g.shape();
                    if self.ng(*a) {
                        let mut d = g.data().to_vec();
                        for i in 0..n {
                            let s = cv.data()[i];
                            for x in &mut d[i * m..(i + 1) * m] {
                                *x /= s;
                            }
                        }
                        accumulate(&mut grads, *a, Tensor::new(n, m, d)?);
                    }
                    if self.ng(*c) {
                        // d(a/c)/dc = -out/c
                        let mut d = vec![0.0; n];
                        for (i, di) in d.iter_mut().enumerate() {
                            let s = cv.data()[i];
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g.data()[i * m + j] * val.data()[i * m + j];
                            }
                            *di = -acc / s;
                        }
                        accumulate(&mut grads, *c, Tensor::column(d));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|x| x * s));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, g.zip_map(val, "exp", |x, y| x * y)?);
                }
                Op::Log(a) => {
                    let av = &self.nodes[*a].value;
                    accumulate(&mut grads, *a, g.zip_map(av, "ln", |x, y| x / y)?);
                }
                Op::LogClamp(a, floor) => {
                    let av = &self.nodes[*a].value;
                    let f = *floor;
                    let d = g.zip_map(av, "log_clamp", |x, y| if y >= f { x / y } else { 0.0 })?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let av = &self.nodes[*a].value;
                    let d = g.zip_map(av, "relu", |x, y| if y > 0.0 { x } else { 0.0 })?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(val, "sigmoid", |x, s| x * s * (1.0 - s))?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let av = &self.nodes[*a].value;
                    let d = g.zip_map(av, "softplus", |x, y| x * sigmoid(y))?;
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let [n, m] = val.shape();
                    let mut d = vec![0.0; n * m];
                    for i in 0..n {
                        let y = val.row_slice(i);
                        let gi = g.row_slice(i);
                        let dot: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            d[i * m + j] = y[j] * (gi[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(n, m, d)?);
                }
                Op::Sqrt(a) => {
                    // gradient taken as 0 at the origin
                    let d = g.zip_map(val, "sqrt", |x, s| if s > 0.0 { 0.5 * x / s } else { 0.0 })?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let av = &self.nodes[*a].value;
                    accumulate(&mut grads, *a, g.zip_map(av, "square", |x, y| 2.0 * x * y)?);
                }
                Op::SumAll(a) => {
                    let [n, m] = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, Tensor::full(n, m, g.item()));
                }
                Op::SumRows(a) => {
                    let [n, m] = self.nodes[*a].value.shape();
                    let mut d = vec![0.0; n * m];
                    for i in 0..n {
                        let gi = g.data()[i];
                        d[i * m..(i + 1) * m].iter_mut().for_each(|x| *x = gi);
                    }
                    accumulate(&mut grads, *a, Tensor::new(n, m, d)?);
                }
                Op::SumCols(a) => {
                    let [n, m] = self.nodes[*a].value.shape();
                    let mut d = Vec::with_capacity(n * m);
                    for _ in 0..n {
                        d.extend_from_slice(g.data());
                    }
                    accumulate(&mut grads, *a, Tensor::new(n, m, d)?);
                }
                Op::Reshape(a) => {
                    let [n, m] = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, g.reshape(n, m)?);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::ConcatCols(parts) => {
                    let n = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        if self.ng(p) {
                            let mut d = Vec::with_capacity(n * w);
                            for r in 0..n {
                                d.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                            }
                            accumulate(&mut grads, p, Tensor::new(n, w, d)?);
                        }
                        offset += w;
                    }
                }
                Op::Lgamma(a) => {
                    let av = &self.nodes[*a].value;
                    accumulate(&mut grads, *a, g.zip_map(av, "lgamma", |x, y| x * digamma(y))?);
                }
                Op::Digamma(a) => {
                    let av = &self.nodes[*a].value;
                    accumulate(&mut grads, *a, g.zip_map(av, "digamma", |x, y| x * trigamma(y))?);
                }
                Op::Partials2(a, b, p) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.zip_map(&p.0, "partials", |x, y| x * y)?);
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.zip_map(&p.1, "partials", |x, y| x * y)?);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut s = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (a, b) in s.iter_mut().zip(t.row_slice(r)) {
            *a += b;
        }
    }
    Tensor::row(s)
}

fn row_sums(t: &Tensor) -> Tensor {
    Tensor::column((0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = out.row_slice_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_weight_has_unit_gradient() {
        let mut store = ParamStore::new(0);
        let w = store.insert("w", Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.sum(wv);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(&store, w).unwrap(), &Tensor::ones(2, 2));
    }

    #[test]
    fn sigmoid_derivative_at_zero_is_quarter() {
        let mut store = ParamStore::new(0);
        let w = store.insert("w", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let x = tape.constant(Tensor::scalar(1.0));
        let z = tape.matmul(wv, x).unwrap();
        let s = tape.sigmoid(z);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(&store, w).unwrap().item(), 0.25);
    }

    #[test]
    fn loss_from_another_tape_is_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let _ = t1.constant(Tensor::scalar(1.0));
        let v2 = t2.constant(Tensor::scalar(1.0));
        assert!(matches!(t1.backward(v2), Err(Error::Tape(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::zeros(2, 1));
        assert!(t.backward(v).is_err());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new(3);
        let w = store.insert("w", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let wv = tape.frozen(&store, w);
        let y = tape.square(wv);
        let grads = tape.backward(y).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![100.0, -50.0, 3.0]]).unwrap();
        let s = softmax_rows(&t);
        for r in 0..2 {
            let total: f64 = s.row_slice(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!((s.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn log_clamp_counts_floor_hits() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row(vec![1e-320, 0.5, 0.0]));
        let l = tape.log_clamp(v, 1e-300);
        assert_eq!(tape.clamp_events(), 2);
        assert_eq!(tape.value(l).data()[0], 1e-300f64.ln());
    }
}
