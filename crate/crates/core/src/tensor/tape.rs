//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes are
//! appended in evaluation order, so the node index is a topological order and
//! [`Var::backward`] simply walks the tape from the end, visiting each node
//! once. Only leaf gradients are retained after the sweep.

use std::cell::RefCell;
use std::rc::Rc;

use super::dense::{log_sum_exp, Precision, Tensor};
use super::gemm::gemm;
use crate::error::{contract, dim_err, Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Minimum(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Silu(usize),
    Clamp { a: usize, lo: f64, hi: f64 },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Softmax { a: usize, scale: f64 },
    LogSoftmax(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, r0: usize, c0: usize },
    Rope { a: usize, offset: usize, base: f64, group: usize },
    RmsNorm { a: usize, gain: usize, eps: f64 },
    GatherRows { a: usize, idx: Rc<Vec<usize>> },
    ScatterRows { a: usize, idx: Rc<Vec<usize>> },
    Pick { a: usize, idx: Rc<Vec<(usize, usize)>> },
    Reshape(usize),
    Transpose(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    precision: Precision,
}

/// Recording of a computation. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                precision,
            })),
        }
    }

    pub fn precision(&self) -> Precision {
        self.inner.borrow().precision
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf without gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn push(&self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.precision.round_slice(value.data_mut());
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn req(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Concatenates 2-D operands along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&self, parts: &[&Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return contract("concat of zero tensors");
        }
        if axis > 1 {
            return dim_err(format!("concat axis {axis} on 2-D tensors"));
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let dims: Vec<(usize, usize)> = vals.iter().map(|v| v.dims2()).collect();
        let out = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return dim_err(format!("row concat with mismatched widths {dims:?}"));
            }
            let mut data = Vec::with_capacity(dims.iter().map(|d| d.0 * c).sum());
            for v in &vals {
                data.extend_from_slice(v.data());
            }
            Tensor::new(&[dims.iter().map(|d| d.0).sum(), c], data)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return dim_err(format!("column concat with mismatched heights {dims:?}"));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for v in &vals {
                    data.extend_from_slice(v.row(i));
                }
            }
            Tensor::new(&[r, total], data)?
        };
        let req = parts.iter().any(|p| p.requires_grad());
        let inputs = parts.iter().map(|p| p.id).collect();
        Ok(self.push(out, Op::Concat { inputs, axis }, req))
    }

    /// Gradient of a leaf after [`Var::backward`]. Leaves that require a
    /// gradient but were not reached report zeros; interior nodes report none.
    fn grad_of(&self, id: usize) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape().to_vec();
        match inner.grads.get(id).and_then(|g| g.clone()) {
            Some(g) => Tensor::new(&shape, g).ok(),
            None if inner.grads.is_empty() => None,
            None => Some(Tensor::zeros(&shape)),
        }
    }

    fn backward_from(&self, root: usize) -> Result<()> {
        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        let n = inner.nodes.len();
        if inner.nodes[root].value.numel() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                inner.nodes[root].value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root] = Some(vec![1.0]);
        let nodes = &inner.nodes;
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(nodes, &mut grads, id, &g);
        }
        // Intermediate gradients were consumed by the sweep; only leaves remain.
        let precision = inner.precision;
        for g in grads.iter_mut().flatten() {
            precision.round_slice(g);
        }
        inner.grads = grads;
        Ok(())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn accum<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = av.dims2();
            let n = out.cols();
            if let Some(ga) = accum(grads, nodes, *a) {
                // dA = dC · B'ᵀ
                gemm(m, n, k, g, false, bv.data(), !*trans_b, ga, 1.0);
            }
            if let Some(gb) = accum(grads, nodes, *b) {
                if *trans_b {
                    // B is n×k: dB = dCᵀ · A
                    gemm(n, m, k, g, true, av.data(), false, gb, 1.0);
                } else {
                    gemm(k, m, n, av.data(), true, g, false, gb, 1.0);
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = accum(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = accum(grads, nodes, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = accum(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = accum(grads, nodes, *b) {
                for (x, y) in gb.iter_mut().zip(g) {
                    *x -= y;
                }
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            if let Some(ga) = accum(grads, nodes, *a) {
                for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *x += gi * bi;
                }
            }
            if let Some(gb) = accum(grads, nodes, *b) {
                for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av.data()) {
                    *x += gi * ai;
                }
            }
        }
        Op::Minimum(a, b) => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            let take_a: Vec<bool> = av.data().iter().zip(bv.data()).map(|(x, y)| x <= y).collect();
            if let Some(ga) = accum(grads, nodes, *a) {
                for ((x, gi), t) in ga.iter_mut().zip(g).zip(&take_a) {
                    if *t {
                        *x += gi;
                    }
                }
            }
            if let Some(gb) = accum(grads, nodes, *b) {
                for ((x, gi), t) in gb.iter_mut().zip(g).zip(&take_a) {
                    if !*t {
                        *x += gi;
                    }
                }
            }
        }
        Op::AddRow(a, r) => {
            let c = out.cols();
            if let Some(ga) = accum(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gr) = accum(grads, nodes, *r) {
                for row in g.chunks(c) {
                    add_into(gr, row);
                }
            }
        }
        Op::MulCol(a, s) => {
            let av = nodes[*a].value.clone();
            let sv = nodes[*s].value.clone();
            let c = out.cols();
            if let Some(ga) = accum(grads, nodes, *a) {
                for (i, (row, grow)) in ga.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                    let si = sv.data()[i];
                    for (x, gi) in row.iter_mut().zip(grow) {
                        *x += gi * si;
                    }
                }
            }
            if let Some(gs) = accum(grads, nodes, *s) {
                for (i, (arow, grow)) in av.data().chunks(c).zip(g.chunks(c)).enumerate() {
                    gs[i] += arow.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = accum(grads, nodes, *a) {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi * s;
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = accum(grads, nodes, *a) {
                add_into(ga, g);
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = accum(grads, nodes, *a) {
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += gi * y;
                }
            }
        }
        Op::Log(a) => {
            let av = nodes[*a].value.clone();
            if let Some(ga) = accum(grads, nodes, *a) {
                for ((x, gi), v) in ga.iter_mut().zip(g).zip(av.data()) {
                    *x += gi / v;
                }
            }
        }
        Op::Silu(a) => {
            let av = nodes[*a].value.clone();
            if let Some(ga) = accum(grads, nodes, *a) {
                for ((x, gi), v) in ga.iter_mut().zip(g).zip(av.data()) {
                    let s = 1.0 / (1.0 + (-v).exp());
                    *x += gi * s * (1.0 + v * (1.0 - s));
                }
            }
        }
        Op::Clamp { a, lo, hi } => {
            let av = nodes[*a].value.clone();
            if let Some(ga) = accum(grads, nodes, *a) {
                for ((x, gi), v) in ga.iter_mut().zip(g).zip(av.data()) {
                    if *v >= *lo && *v <= *hi {
                        *x += gi;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = accum(grads, nodes, *a) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.numel().max(1) as f64;
            if let Some(ga) = accum(grads, nodes, *a) {
                for x in ga.iter_mut() {
                    *x += g[0] / n;
                }
            }
        }
        Op::MeanRows(a) => {
            let (r, c) = nodes[*a].value.dims2();
            if let Some(ga) = accum(grads, nodes, *a) {
                for row in ga.chunks_mut(c) {
                    for (x, gi) in row.iter_mut().zip(g) {
                        *x += gi / r as f64;
                    }
                }
            }
        }
        Op::Softmax { a, scale } => {
            let c = out.cols();
            if let Some(ga) = accum(grads, nodes, *a) {
                for ((grow, yrow), xrow) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                    for ((x, gi), y) in xrow.iter_mut().zip(grow).zip(yrow) {
                        *x += scale * y * (gi - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            if let Some(ga) = accum(grads, nodes, *a) {
                for ((grow, yrow), xrow) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let s: f64 = grow.iter().sum();
                    for ((x, gi), y) in xrow.iter_mut().zip(grow).zip(yrow) {
                        *x += gi - y.exp() * s;
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (r, c) = out.dims2();
            let mut offset = 0;
            for &p in inputs {
                let (pr, pc) = nodes[p].value.dims2();
                if let Some(gp) = accum(grads, nodes, p) {
                    if *axis == 0 {
                        add_into(gp, &g[offset * c..(offset + pr) * c]);
                    } else {
                        for i in 0..r {
                            let src = &g[i * c + offset..i * c + offset + pc];
                            add_into(&mut gp[i * pc..(i + 1) * pc], src);
                        }
                    }
                }
                offset += if *axis == 0 { pr } else { pc };
            }
        }
        Op::Slice { a, r0, c0 } => {
            let (r, c) = out.dims2();
            let ac = nodes[*a].value.cols();
            if let Some(ga) = accum(grads, nodes, *a) {
                for i in 0..r {
                    let dst = &mut ga[(r0 + i) * ac + c0..(r0 + i) * ac + c0 + c];
                    add_into(dst, &g[i * c..(i + 1) * c]);
                }
            }
        }
        Op::Rope { a, offset, base, group } => {
            let c = out.cols();
            if let Some(ga) = accum(grads, nodes, *a) {
                for (i, (grow, xrow)) in g.chunks(c).zip(ga.chunks_mut(c)).enumerate() {
                    let mut tmp = grow.to_vec();
                    rotate_row(&mut tmp, (offset + i) as f64, *base, *group, -1.0);
                    add_into(xrow, &tmp);
                }
            }
        }
        Op::RmsNorm { a, gain, eps } => {
            let xv = nodes[*a].value.clone();
            let gv = nodes[*gain].value.clone();
            let c = out.cols();
            let inv: Vec<f64> = xv
                .data()
                .chunks(c)
                .map(|row| 1.0 / (row.iter().map(|x| x * x).sum::<f64>() / c as f64 + eps).sqrt())
                .collect();
            if let Some(gx) = accum(grads, nodes, *a) {
                for (i, ((xrow, grow), dst)) in xv.data().chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                    let r = inv[i];
                    let s: f64 = (0..c).map(|j| grow[j] * gv.data()[j] * xrow[j]).sum();
                    for j in 0..c {
                        dst[j] += r * gv.data()[j] * grow[j] - xrow[j] * r * r * r * s / c as f64;
                    }
                }
            }
            if let Some(gg) = accum(grads, nodes, *gain) {
                for (i, (xrow, grow)) in xv.data().chunks(c).zip(g.chunks(c)).enumerate() {
                    for j in 0..c {
                        gg[j] += grow[j] * xrow[j] * inv[i];
                    }
                }
            }
        }
        Op::GatherRows { a, idx } => {
            let c = out.cols();
            if let Some(ga) = accum(grads, nodes, *a) {
                for (k, &src) in idx.iter().enumerate() {
                    add_into(&mut ga[src * c..(src + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }
        }
        Op::ScatterRows { a, idx } => {
            let c = out.cols();
            if let Some(ga) = accum(grads, nodes, *a) {
                for (k, &dst) in idx.iter().enumerate() {
                    add_into(&mut ga[k * c..(k + 1) * c], &g[dst * c..(dst + 1) * c]);
                }
            }
        }
        Op::Pick { a, idx } => {
            let ac = nodes[*a].value.cols();
            if let Some(ga) = accum(grads, nodes, *a) {
                for (k, &(r, c)) in idx.iter().enumerate() {
                    ga[r * ac + c] += g[k];
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = nodes[*a].value.dims2();
            if let Some(ga) = accum(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

/// Rotates consecutive pairs of `row` in place. The row is split into groups
/// of `group` scalars; pair `i` of every group turns by
/// `sign · position · base^(−2i/group)`.
pub(crate) fn rotate_row(row: &mut [f64], position: f64, base: f64, group: usize, sign: f64) {
    if position == 0.0 {
        return;
    }
    for chunk in row.chunks_mut(group) {
        for i in 0..group / 2 {
            let theta = sign * position * base.powf(-2.0 * i as f64 / group as f64);
            let (s, c) = theta.sin_cos();
            let (x0, x1) = (chunk[2 * i], chunk[2 * i + 1]);
            chunk[2 * i] = x0 * c - x1 * s;
            chunk[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{what}: shapes {:?} and {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn require_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return dim_err(format!("{what} expects a 2-D tensor, got {:?}", t.shape()));
    }
    Ok(t.dims2())
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.req(self.id)
    }

    /// Gradient written by the most recent [`Var::backward`] on this tape.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad_of(self.id)
    }

    /// Propagates `d self / d leaf` into every leaf that requires a gradient.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, value: Tensor, op: Op) -> Var {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var, value: Tensor, op: Op) -> Var {
        let req = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, req)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value();
        Tensor::new(v.shape(), v.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    fn zip(&self, other: &Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, what)?;
        Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    /// `self · other` for `[m×k]·[k×n]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` for `[m×k]·[n×k]ᵀ`. This is how `W·x` is applied to a
    /// stack of row vectors when `W` is stored as `[out×in]`.
    pub fn matmul_t(&self, other: &Var) -> Result<Var> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Var, trans_b: bool) -> Result<Var> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = require_2d(&a, "matmul")?;
        let (br, bc) = require_2d(&b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Dimension(format!(
                "matmul{} inner extents differ: {:?} and {:?}",
                if trans_b { "_t" } else { "" },
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), trans_b, &mut out, 0.0);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.binary(other, value, Op::MatMul { a: self.id, b: other.id, trans_b }))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.zip(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.zip(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = self.zip(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Var) -> Result<Var> {
        let v = self.zip(other, "minimum", f64::min)?;
        Ok(self.binary(other, v, Op::Minimum(self.id, other.id)))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, row: &Var) -> Result<Var> {
        let (a, r) = (self.value(), row.value());
        let (rows, c) = a.dims2();
        if r.numel() != c {
            return dim_err(format!("add_row: {:?} with row {:?}", a.shape(), r.shape()));
        }
        let mut out = a.data().to_vec();
        for i in 0..rows {
            add_into(&mut out[i * c..(i + 1) * c], r.data());
        }
        let v = Tensor::new(a.shape(), out)?;
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    /// Scales row `i` by `col[i]`.
    pub fn mul_col(&self, col: &Var) -> Result<Var> {
        let (a, s) = (self.value(), col.value());
        let (rows, c) = a.dims2();
        if s.numel() != rows {
            return dim_err(format!("mul_col: {:?} with column {:?}", a.shape(), s.shape()));
        }
        let mut out = a.data().to_vec();
        for i in 0..rows {
            for x in &mut out[i * c..(i + 1) * c] {
                *x *= s.data()[i];
            }
        }
        let v = Tensor::new(a.shape(), out)?;
        Ok(self.binary(col, v, Op::MulCol(self.id, col.id)))
    }

    pub fn scale(&self, s: f64) -> Var {
        self.unary(self.map(|x| x * s), Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        self.unary(self.map(|x| x + s), Op::AddScalar(self.id))
    }

    pub fn exp(&self) -> Var {
        self.unary(self.map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var {
        self.unary(self.map(f64::ln), Op::Log(self.id))
    }

    /// `x · σ(x)`.
    pub fn silu(&self) -> Var {
        self.unary(self.map(|x| x / (1.0 + (-x).exp())), Op::Silu(self.id))
    }

    /// Clamps into `[lo, hi]`. Elements outside the interval receive no
    /// gradient (no straight-through estimator).
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        self.unary(self.map(|x| x.clamp(lo, hi)), Op::Clamp { a: self.id, lo, hi })
    }

    pub fn sum(&self) -> Var {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Column means of a 2-D tensor, as a vector.
    pub fn mean_rows(&self) -> Result<Var> {
        let v = self.value();
        let (r, c) = require_2d(&v, "mean_rows")?;
        let mut out = vec![0.0; c];
        for row in v.data().chunks(c) {
            add_into(&mut out, row);
        }
        for x in &mut out {
            *x /= r.max(1) as f64;
        }
        Ok(self.unary(Tensor::vector(out), Op::MeanRows(self.id)))
    }

    /// `Σ self ⊙ other`.
    pub fn dot(&self, other: &Var) -> Result<Var> {
        Ok(self.mul(other)?.sum())
    }

    /// Row-wise softmax of `scale · x`, max-subtracted.
    pub fn softmax_rows(&self, scale: f64) -> Result<Var> {
        self.softmax_impl(scale, false)
    }

    /// Row-wise softmax of `scale · x` where row `i` of an `r×c` input only
    /// sees columns `j ≤ i + (c − r)`; masked entries are exactly zero.
    pub fn causal_softmax_rows(&self, scale: f64) -> Result<Var> {
        self.softmax_impl(scale, true)
    }

    fn softmax_impl(&self, scale: f64, causal: bool) -> Result<Var> {
        if scale <= 0.0 || !scale.is_finite() {
            return contract(format!("softmax scale must be positive, got {scale}"));
        }
        let v = self.value();
        let (r, c) = v.dims2();
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        if causal && c < r {
            return dim_err(format!("causal softmax needs cols >= rows, got {:?}", v.shape()));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let visible = if causal { i + (c - r) + 1 } else { c };
            let src = &v.data()[i * c..i * c + visible];
            let dst = &mut out[i * c..i * c + visible];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s * scale;
            }
            super::dense::softmax_in_place(dst);
        }
        let t = Tensor::new(v.shape(), out)?;
        Ok(self.unary(t, Op::Softmax { a: self.id, scale }))
    }

    /// Row-wise `x − log Σ exp(x)`.
    pub fn log_softmax_rows(&self) -> Result<Var> {
        let v = self.value();
        let (_, c) = v.dims2();
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("log_softmax input contains NaN".into()));
        }
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let t = Tensor::new(v.shape(), out)?;
        Ok(self.unary(t, Op::LogSoftmax(self.id)))
    }

    /// Mean negative log-likelihood of `targets[i]` under row `i` of the logits.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var> {
        let lp = self.log_softmax_rows()?;
        let picked = lp.pick_per_row(targets)?;
        Ok(picked.mean().neg())
    }

    /// Sub-block `[r0, r1) × [c0, c1)` of a 2-D tensor.
    pub fn slice(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Var> {
        let v = self.value();
        let (r, c) = require_2d(&v, "slice")?;
        if r0 > r1 || r1 > r || c0 > c1 || c1 > c {
            return dim_err(format!("slice [{r0},{r1})x[{c0},{c1}) of {:?}", v.shape()));
        }
        let w = c1 - c0;
        let mut out = Vec::with_capacity((r1 - r0) * w);
        for i in r0..r1 {
            out.extend_from_slice(&v.data()[i * c + c0..i * c + c1]);
        }
        let t = Tensor::new(&[r1 - r0, w], out)?;
        Ok(self.unary(t, Op::Slice { a: self.id, r0, c0 }))
    }

    pub fn cols(&self, c0: usize, c1: usize) -> Result<Var> {
        let r = self.value().rows();
        self.slice(0, r, c0, c1)
    }

    pub fn rows(&self, r0: usize, r1: usize) -> Result<Var> {
        let c = self.value().cols();
        self.slice(r0, r1, 0, c)
    }

    /// Rotary position embedding. Row `i` sits at position `offset + i`; each
    /// row is split into groups of `group` scalars (one group per head) and
    /// consecutive pairs in a group are rotated.
    pub fn rope(&self, offset: usize, base: f64, group: usize) -> Result<Var> {
        let v = self.value();
        let c = v.cols();
        if group == 0 || !group.is_multiple_of(2) || !c.is_multiple_of(group) {
            return dim_err(format!(
                "rope needs an even group dividing the last extent, got group {group} for {:?}",
                v.shape()
            ));
        }
        let mut out = v.data().to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            rotate_row(row, (offset + i) as f64, base, group, 1.0);
        }
        let t = Tensor::new(v.shape(), out)?;
        Ok(self.unary(t, Op::Rope { a: self.id, offset, base, group }))
    }

    /// Scale-only RMS normalization of every row, times a learned gain.
    pub fn rms_norm(&self, gain: &Var, eps: f64) -> Result<Var> {
        let (x, g) = (self.value(), gain.value());
        let c = x.cols();
        if g.numel() != c {
            return dim_err(format!("rms_norm: {:?} with gain {:?}", x.shape(), g.shape()));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / c as f64 + eps).sqrt();
            for (v, gj) in row.iter_mut().zip(g.data()) {
                *v *= inv * gj;
            }
        }
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.binary(gain, t, Op::RmsNorm { a: self.id, gain: gain.id, eps }))
    }

    /// Rows `idx[k]` of `self`, stacked.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var> {
        let v = self.value();
        let (r, c) = v.dims2();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return dim_err(format!("gather_rows index {i} out of {r} rows"));
            }
            out.extend_from_slice(v.row(i));
        }
        let t = Tensor::new(&[idx.len(), c], out)?;
        Ok(self.unary(t, Op::GatherRows { a: self.id, idx: Rc::new(idx.to_vec()) }))
    }

    /// Inverse of `gather_rows`: row `k` is added into output row `idx[k]` of
    /// an `n_rows`-row zero matrix.
    pub fn scatter_rows(&self, idx: &[usize], n_rows: usize) -> Result<Var> {
        let v = self.value();
        let (r, c) = v.dims2();
        if idx.len() != r {
            return dim_err(format!("scatter_rows: {} indices for {r} rows", idx.len()));
        }
        let mut out = vec![0.0; n_rows * c];
        for (k, &dst) in idx.iter().enumerate() {
            if dst >= n_rows {
                return dim_err(format!("scatter_rows index {dst} out of {n_rows} rows"));
            }
            add_into(&mut out[dst * c..(dst + 1) * c], v.row(k));
        }
        let t = Tensor::new(&[n_rows, c], out)?;
        Ok(self.unary(t, Op::ScatterRows { a: self.id, idx: Rc::new(idx.to_vec()) }))
    }

    /// Elements `(row, col)` of a 2-D tensor as a vector.
    pub fn pick(&self, idx: &[(usize, usize)]) -> Result<Var> {
        let v = self.value();
        let (r, c) = v.dims2();
        let mut out = Vec::with_capacity(idx.len());
        for &(i, j) in idx {
            if i >= r || j >= c {
                return dim_err(format!("pick ({i},{j}) out of {:?}", v.shape()));
            }
            out.push(v.data()[i * c + j]);
        }
        Ok(self.unary(Tensor::vector(out), Op::Pick { a: self.id, idx: Rc::new(idx.to_vec()) }))
    }

    /// Element `cols[i]` of every row `i`.
    pub fn pick_per_row(&self, cols: &[usize]) -> Result<Var> {
        let pairs: Vec<(usize, usize)> = cols.iter().enumerate().map(|(i, &c)| (i, c)).collect();
        if pairs.len() != self.value().rows() {
            return dim_err(format!(
                "pick_per_row: {} targets for {:?}",
                pairs.len(),
                self.shape()
            ));
        }
        self.pick(&pairs)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let t = self.value().reshape(shape)?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    pub fn transpose(&self) -> Result<Var> {
        let v = self.value();
        require_2d(&v, "transpose")?;
        Ok(self.unary(v.transpose(), Op::Transpose(self.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul_returns_input() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let x = tape.param(t2(&[&[3.0, -1.0], &[0.5, 2.0]]));
        let y = i2.matmul(&x).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn matmul_hand_arithmetic_and_shape_error() {
        let tape = Tape::new();
        let a = tape.param(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.param(t2(&[&[1.0], &[1.0]]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[3.0, 7.0]);
        let err = b.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 1]"), "{err}");
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let tape = Tape::new();
        let x = tape.param(t2(&[&[1.0, 2.0, 3.0]]));
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_square_backward() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        x.mul(&x).unwrap().mean().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(x.exp().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.param(Tensor::vector(vec![5.0]));
        let c = tape.constant(Tensor::vector(vec![1.0]));
        x.sum().backward().unwrap();
        assert_eq!(y.grad().unwrap().data(), &[0.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t2(&[&[2.0, 2.0, 2.0, 2.0], &[0.0, 3f64.ln(), 0.0, 0.0]]));
        let y = x.slice(0, 1, 0, 4).unwrap().softmax_rows(1.0).unwrap();
        for v in y.value().data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let z = x.slice(1, 2, 0, 2).unwrap().softmax_rows(1.0).unwrap();
        assert!((z.value().data()[0] - 0.25).abs() < 1e-15);
        assert!((z.value().data()[1] - 0.75).abs() < 1e-15);
        let single = tape.constant(t2(&[&[-7.0]])).softmax_rows(1.0).unwrap();
        assert_eq!(single.item(), 1.0);
    }

    #[test]
    fn softmax_rejects_nan_and_bad_scale() {
        let tape = Tape::new();
        let x = tape.constant(t2(&[&[0.0, f64::NAN]]));
        assert!(matches!(x.softmax_rows(1.0), Err(Error::Numeric(_))));
        let y = tape.constant(t2(&[&[0.0, 1.0]]));
        assert!(y.softmax_rows(0.0).is_err());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, 5.0, 9.0], &[1.0, 1.0, 9.0], &[0.0, 0.0, 0.0]]));
        let y = x.causal_softmax_rows(1.0).unwrap().value();
        assert_eq!(y.row(0), &[1.0, 0.0, 0.0]);
        assert!((y.at(1, 0) - 0.5).abs() < 1e-15 && y.at(1, 2) == 0.0);
        assert!((y.at(2, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.param(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.param(t2(&[&[5.0], &[6.0]]));
        let c = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = c.cols(2, 3).unwrap();
        assert_eq!(back.value().data(), b.value().data());
        let r = tape.concat(&[&a, &a], 0).unwrap();
        assert_eq!(r.shape(), vec![4, 2]);
        assert!(tape.concat(&[&a, &b], 0).is_err());
    }

    #[test]
    fn clamp_blocks_gradient_outside_interval() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.5, 1.0, 1.5]));
        x.clamp(0.8, 1.2).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn f32_tape_rounds_values() {
        let tape = Tape::with_precision(Precision::F32);
        let x = tape.param(Tensor::vector(vec![0.1]));
        assert_eq!(x.item(), 0.1f32 as f64);
        let y = x.scale(3.0);
        assert_eq!(y.item(), (0.1f32 as f64 * 3.0) as f32 as f64);
    }
}
