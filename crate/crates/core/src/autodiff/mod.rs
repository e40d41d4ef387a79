//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] is built define-by-run: every builder call evaluates its node
//! immediately and appends it, so node order is a topological order by
//! construction. [`Tape::backward`] walks the nodes in exact reverse order and
//! returns the gradient of a scalar root with respect to every registered
//! parameter. Values can be changed in place on leaf nodes and the whole tape
//! re-evaluated with [`Tape::forward`], which is what the finite-difference
//! checker relies on.
//!
//! Batches are rows: an affine node maps `B x in` to `B x out` with weights
//! stored `out x in`.

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::matrix::{gemm_into, Matrix};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Location of a parameter matrix inside an external flat parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef {
    /// Caller-defined block id (one block per network, gain matrix, ...).
    pub block: usize,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamRef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Constant,
    Parameter,
    Affine,
    Tanh,
    Relu,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Square,
    Mean,
    Sum,
    Scale,
    Concat,
    Slice,
    GatherRows,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Constant,
    Parameter,
    Affine { x: Var, w: Var, b: Option<Var> },
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Mean(Var),
    Sum(Var),
    Scale(Var, S),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, len: usize },
    GatherRows { x: Var, rows: Vec<usize> },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Parameter => OpKind::Parameter,
            Op::Affine { .. } => OpKind::Affine,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Square(_) => OpKind::Square,
            Op::Mean(_) => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
            Op::Scale(..) => OpKind::Scale,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::GatherRows { .. } => OpKind::GatherRows,
        }
    }
}

#[derive(Debug, Clone)]
struct Node<S> {
    op: Op<S>,
    value: Matrix<S>,
}

/// Gradients of a scalar root with respect to registered parameters, in
/// registration order.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    entries: Vec<(ParamRef, Matrix<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn entries(&self) -> &[(ParamRef, Matrix<S>)] {
        &self.entries
    }

    pub fn get(&self, param: ParamRef) -> Option<&Matrix<S>> {
        self.entries
            .iter()
            .find(|(p, _)| *p == param)
            .map(|(_, g)| g)
    }

    /// Adds every entry into `blocks[param.block][param.range()]`.
    pub fn accumulate_into(&self, blocks: &mut [Vec<S>]) {
        for (p, g) in &self.entries {
            let dst = &mut blocks[p.block][p.range()];
            for (d, &v) in dst.iter_mut().zip(g.as_slice()) {
                *d += v;
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: Vec<(ParamRef, Var)>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    /// Drops every node and parameter registration.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Parents of `v`, all of which precede it on the tape.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Constant | Op::Parameter => vec![],
            Op::Affine { x, w, b } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Scale(a, _) => vec![*a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Slice { x, .. } | Op::GatherRows { x, .. } => vec![*x],
        }
    }

    pub fn registered_params(&self) -> &[(ParamRef, Var)] {
        &self.params
    }

    fn push(&mut self, op: Op<S>) -> Var {
        let value = eval(&self.nodes, &op);
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes
            .get(v.0)
            .map(|n| n.value.shape())
            .ok_or_else(|| Error::graph(format!("unknown node {}", v.0)))
    }

    pub fn constant(&mut self, value: Matrix<S>) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter matrix whose gradient is reported by
    /// [`Tape::backward`].
    pub fn param(&mut self, param: ParamRef, values: &[S]) -> Result<Var> {
        if values.len() != param.len() {
            return Err(Error::graph(format!(
                "parameter {param:?} expects {} values, got {}",
                param.len(),
                values.len()
            )));
        }
        let value = Matrix::from_vec(param.rows, param.cols, values.to_vec())?;
        self.nodes.push(Node {
            op: Op::Parameter,
            value,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((param, v));
        Ok(v)
    }

    /// Overwrites the value of a leaf node (constant or parameter). Call
    /// [`Tape::forward`] afterwards to refresh dependent nodes.
    pub fn set_leaf(&mut self, v: Var, value: Matrix<S>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Constant | Op::Parameter) {
            return Err(Error::contract("set_leaf on a non-leaf node"));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::graph("set_leaf changes the node shape"));
        }
        node.value = value;
        Ok(())
    }

    /// `x * w^T + b` with `x: B x in`, `w: out x in`, `b: 1 x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (_, xin) = self.check(x)?;
        let (wout, win) = self.check(w)?;
        if xin != win {
            return Err(Error::graph(format!(
                "affine: input has {xin} columns, weight expects {win}"
            )));
        }
        if let Some(b) = b {
            let bs = self.check(b)?;
            if bs != (1, wout) {
                return Err(Error::graph(format!(
                    "affine: bias shape {bs:?}, expected (1, {wout})"
                )));
            }
        }
        Ok(self.push(Op::Affine { x, w, b }))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        Ok(self.push(Op::Tanh(a)))
    }

    /// Rectifier; the subgradient at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        Ok(self.push(Op::Relu(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        Ok(self.push(Op::Sigmoid(a)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        if sa != sb {
            return Err(Error::graph(format!("{what}: shapes {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        Ok(self.push(Op::Square(a)))
    }

    /// Mean over all elements, `1 x 1`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check(a)?;
        if r * c == 0 {
            return Err(Error::graph("mean of an empty node"));
        }
        Ok(self.push(Op::Mean(a)))
    }

    /// Sum over all elements, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        Ok(self.push(Op::Sum(a)))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Result<Var> {
        self.check(a)?;
        Ok(self.push(Op::Scale(a, factor)))
    }

    /// Column-wise concatenation of nodes with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::graph("concat of zero nodes"))?;
        let rows = self.check(*first)?.0;
        for p in parts {
            let (r, _) = self.check(*p)?;
            if r != rows {
                return Err(Error::graph(format!(
                    "concat: row counts {rows} and {r} differ"
                )));
            }
        }
        Ok(self.push(Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (_, c) = self.check(x)?;
        if start + len > c || len == 0 {
            return Err(Error::graph(format!(
                "slice {start}..{} out of {c} columns",
                start + len
            )));
        }
        Ok(self.push(Op::Slice { x, start, len }))
    }

    /// Selects rows of `x` (with repetition allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, _) = self.check(x)?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::graph(format!("gather row {bad} out of {r}")));
        }
        Ok(self.push(Op::GatherRows {
            x,
            rows: rows.to_vec(),
        }))
    }

    /// Re-evaluates every node in tape order and returns the value of `root`.
    pub fn forward(&mut self, root: Var) -> &Matrix<S> {
        for i in 0..self.nodes.len() {
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !matches!(node.op, Op::Constant | Op::Parameter) {
                node.value = eval(done, &node.op);
            }
        }
        &self.nodes[root.0].value
    }

    /// Sign pattern of every rectifier input on the tape (-1, 0 or 1).
    pub fn relu_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                sig.extend(self.nodes[a.0].value.as_slice().iter().map(|&v| {
                    if v > S::zero() {
                        1
                    } else if v < S::zero() {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        sig
    }

    /// Back-propagates from a scalar root.
    ///
    /// Every registered parameter gets an entry (zeros when it does not
    /// influence the root). Fan-out contributions are accumulated in tape
    /// order, so results are bit-reproducible.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let (r, c) = self.check(root)?;
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Matrix<S>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(S::one()));
        let mut param_grads: Vec<Option<Matrix<S>>> = vec![None; self.nodes.len()];

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Parameter => param_grads[i] = Some(dy),
                Op::Affine { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    {
                        let gx = slot(&mut grads, *x, xv.shape());
                        gemm_into(S::one(), (&dy, false), (wv, false), S::one(), gx);
                    }
                    {
                        let gw = slot(&mut grads, *w, wv.shape());
                        gemm_into(S::one(), (&dy, true), (xv, false), S::one(), gw);
                    }
                    if let Some(b) = b {
                        let gb = slot(&mut grads, *b, (1, wv.rows()));
                        let gbs = gb.as_mut_slice();
                        for row in dy.as_slice().chunks_exact(dy.cols().max(1)) {
                            for (g, &d) in gbs.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.as_slice();
                    let g = slot(&mut grads, *a, node.value.shape());
                    for ((g, &d), &y) in g.as_mut_slice().iter_mut().zip(dy.as_slice()).zip(y) {
                        *g += d * (S::one() - y * y);
                    }
                }
                Op::Relu(a) => {
                    let xin = self.nodes[a.0].value.as_slice();
                    let g = slot(&mut grads, *a, node.value.shape());
                    for ((g, &d), &x) in g.as_mut_slice().iter_mut().zip(dy.as_slice()).zip(xin) {
                        if x > S::zero() {
                            *g += d;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_slice();
                    let g = slot(&mut grads, *a, node.value.shape());
                    for ((g, &d), &y) in g.as_mut_slice().iter_mut().zip(dy.as_slice()).zip(y) {
                        *g += d * y * (S::one() - y);
                    }
                }
                Op::Add(a, b) => {
                    axpy(slot(&mut grads, *a, dy.shape()), S::one(), &dy);
                    axpy(slot(&mut grads, *b, dy.shape()), S::one(), &dy);
                }
                Op::Sub(a, b) => {
                    axpy(slot(&mut grads, *a, dy.shape()), S::one(), &dy);
                    axpy(slot(&mut grads, *b, dy.shape()), -S::one(), &dy);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    {
                        let ga = slot(&mut grads, *a, dy.shape());
                        for ((g, &d), &o) in
                            ga.as_mut_slice().iter_mut().zip(dy.as_slice()).zip(bv.as_slice())
                        {
                            *g += d * o;
                        }
                    }
                    let gb = slot(&mut grads, *b, dy.shape());
                    for ((g, &d), &o) in
                        gb.as_mut_slice().iter_mut().zip(dy.as_slice()).zip(av.as_slice())
                    {
                        *g += d * o;
                    }
                }
                Op::Square(a) => {
                    let av = &self.nodes[a.0].value;
                    let two = S::of(2.0);
                    let g = slot(&mut grads, *a, dy.shape());
                    for ((g, &d), &x) in
                        g.as_mut_slice().iter_mut().zip(dy.as_slice()).zip(av.as_slice())
                    {
                        *g += two * x * d;
                    }
                }
                Op::Mean(a) | Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape();
                    let mut d = dy.as_slice()[0];
                    if matches!(node.op, Op::Mean(_)) {
                        d /= S::from_usize(shape.0 * shape.1).unwrap();
                    }
                    for g in slot(&mut grads, *a, shape).as_mut_slice() {
                        *g += d;
                    }
                }
                Op::Scale(a, f) => axpy(slot(&mut grads, *a, dy.shape()), *f, &dy),
                Op::Concat(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let shape = self.nodes[p.0].value.shape();
                        let g = slot(&mut grads, *p, shape);
                        for r in 0..shape.0 {
                            let src = &dy.row(r)[col..col + shape.1];
                            for (g, &d) in g.row_mut(r).iter_mut().zip(src) {
                                *g += d;
                            }
                        }
                        col += shape.1;
                    }
                }
                Op::Slice { x, start, len } => {
                    let shape = self.nodes[x.0].value.shape();
                    let g = slot(&mut grads, *x, shape);
                    for r in 0..shape.0 {
                        let dst = &mut g.row_mut(r)[*start..*start + *len];
                        for (g, &d) in dst.iter_mut().zip(dy.row(r)) {
                            *g += d;
                        }
                    }
                }
                Op::GatherRows { x, rows } => {
                    let shape = self.nodes[x.0].value.shape();
                    let g = slot(&mut grads, *x, shape);
                    for (out_row, &src_row) in rows.iter().enumerate() {
                        for (g, &d) in g.row_mut(src_row).iter_mut().zip(dy.row(out_row)) {
                            *g += d;
                        }
                    }
                }
            }
        }

        let entries = self
            .params
            .iter()
            .map(|(p, v)| {
                let g = param_grads[v.0]
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(p.rows, p.cols));
                (*p, g)
            })
            .collect();
        Ok(Gradients { entries })
    }
}

fn slot<S: Scalar>(
    grads: &mut [Option<Matrix<S>>],
    v: Var,
    shape: (usize, usize),
) -> &mut Matrix<S> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn axpy<S: Scalar>(dst: &mut Matrix<S>, a: S, x: &Matrix<S>) {
    for (d, &v) in dst.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *d += a * v;
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn eval<S: Scalar>(nodes: &[Node<S>], op: &Op<S>) -> Matrix<S> {
    let val = |v: &Var| &nodes[v.0].value;
    match op {
        Op::Constant | Op::Parameter => unreachable!("leaf nodes carry their own value"),
        Op::Affine { x, w, b } => {
            let mut out = val(x).matmul_nt(val(w));
            if let Some(b) = b {
                out.add_row_inplace(val(b).as_slice());
            }
            out
        }
        Op::Tanh(a) => val(a).map(S::tanh),
        Op::Relu(a) => val(a).map(|v| if v > S::zero() { v } else { S::zero() }),
        Op::Sigmoid(a) => val(a).map(sigmoid),
        Op::Add(a, b) => zip_with(val(a), val(b), |x, y| x + y),
        Op::Sub(a, b) => zip_with(val(a), val(b), |x, y| x - y),
        Op::Mul(a, b) => zip_with(val(a), val(b), |x, y| x * y),
        Op::Square(a) => val(a).map(|v| v * v),
        Op::Mean(a) => {
            let m = val(a);
            let s: S = m.as_slice().iter().copied().sum();
            Matrix::scalar(s / S::from_usize(m.len()).unwrap())
        }
        Op::Sum(a) => Matrix::scalar(val(a).as_slice().iter().copied().sum()),
        Op::Scale(a, f) => val(a).map(|v| v * *f),
        Op::Concat(parts) => {
            let rows = val(&parts[0]).rows();
            let cols: usize = parts.iter().map(|p| val(p).cols()).sum();
            let mut out = Matrix::zeros(rows, cols);
            for r in 0..rows {
                let mut c = 0;
                let dst = out.row_mut(r);
                for p in parts {
                    let src = val(p).row(r);
                    dst[c..c + src.len()].copy_from_slice(src);
                    c += src.len();
                }
            }
            out
        }
        Op::Slice { x, start, len } => {
            let m = val(x);
            let mut out = Matrix::zeros(m.rows(), *len);
            for r in 0..m.rows() {
                out.row_mut(r).copy_from_slice(&m.row(r)[*start..*start + *len]);
            }
            out
        }
        Op::GatherRows { x, rows } => {
            let m = val(x);
            let mut out = Matrix::zeros(rows.len(), m.cols());
            for (o, &i) in rows.iter().enumerate() {
                out.row_mut(o).copy_from_slice(m.row(i));
            }
            out
        }
    }
}

fn zip_with<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>, f: impl Fn(S, S) -> S) -> Matrix<S> {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

#[cfg(test)]
mod tests;
