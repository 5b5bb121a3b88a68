//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node; parameter leaves
//! can then be folded into a [`ParamStore`] with [`Graph::accumulate`].
//!
//! Only the primitives the models in this crate need are provided. All
//! tensors on the tape are rank-2; scalars are `[1, 1]`.

use std::collections::HashMap;
use std::sync::Arc;

use super::param::{ParamId, ParamStore};
use super::tensor::{matmul, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which logits a softmax row may attend to. Disallowed entries receive
/// exactly zero weight.
#[derive(Debug, Clone)]
pub enum Mask {
    /// Row-major `rows × cols` predicate.
    Dense(Arc<Vec<bool>>),
    /// Only the first `k` columns are allowed.
    KeyPrefix(usize),
}

impl Mask {
    #[inline]
    pub fn allows(&self, cols: usize, r: usize, c: usize) -> bool {
        match self {
            Mask::Dense(m) => m[r * cols + c],
            Mask::KeyPrefix(k) => c < *k,
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm(Var, T),
    SumAll(Var),
    MeanAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows(Var, Arc<Vec<usize>>),
    Transpose(Var),
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded computation.
#[derive(Debug, Clone)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    check_finite: bool,
    first_non_finite: Option<(usize, &'static str)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node of a [`Graph`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Real> Graph<T> {
    /// Non-finite values are tracked eagerly in debug builds.
    pub fn new() -> Self {
        Self::with_finite_check(cfg!(debug_assertions))
    }

    pub fn with_finite_check(check_finite: bool) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite,
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// First node (index, op name) that produced a non-finite value, when
    /// checking is enabled.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.first_non_finite
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert_eq!(value.shape().len(), 2, "graph tensors are rank-2");
        if self.check_finite && self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some((self.nodes.len(), op_name(&op)));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, true)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let v = matmul(self.value(a), self.value(b), ta, tb);
        self.push(v, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// `x + r` with `r` of shape `[1, cols]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let v = broadcast_rows(self.value(x), self.value(r), |a, b| a + b);
        self.push(v, Op::AddRow(x, r))
    }

    /// `x ⊙ r` with `r` of shape `[1, cols]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let v = broadcast_rows(self.value(x), self.value(r), |a, b| a * b);
        self.push(v, Op::MulRow(x, r))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::AddConst(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        self.push(v, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.ln());
        self.push(v, Op::Log(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        self.push(v, Op::Silu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    /// Row-wise softmax with max subtraction. Masked entries get weight 0.
    ///
    /// Panics if a row has no allowed entry.
    pub fn softmax(&mut self, x: Var, mask: Option<Mask>) -> Var {
        let v = softmax_rows(self.value(x), mask.as_ref());
        self.push(v, Op::Softmax(x))
    }

    /// Row-wise normalization to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let (mean, rstd) = row_moments(xv.row(i), eps);
            out.extend(xv.row(i).iter().map(|&a| (a - mean) * rstd));
        }
        self.push(Tensor::from_rows(r, c, out), Op::LayerNorm(x, eps))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        self.push(v, Op::MeanAll(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        self.push(
            Tensor::from_rows(rows, total, data),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push(
            Tensor::from_rows(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let v = Tensor::from_fn(t.rows(), len, |r, c| t.at(r, start + c));
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.rows(), "slice_rows out of range");
        let v = t.slice_rows(start, len);
        self.push(v, Op::SliceRows { x, start })
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let v = self.value(x).gather_rows(indices);
        self.push(v, Op::GatherRows(x, Arc::new(indices.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    /// Reverse pass from a `[1, 1]` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar of shape {:?}",
                lt.shape()
            )));
        }
        if let Some((idx, op)) = self.first_non_finite {
            if idx <= loss.0 {
                return Err(Error::Numerical(format!(
                    "non-finite value produced by {op} at node {idx}"
                )));
            }
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let da = if *ta {
                    matmul(bv, dy, *tb, true)
                } else {
                    matmul(dy, bv, false, !*tb)
                };
                let db = if *tb {
                    matmul(dy, av, true, *ta)
                } else {
                    matmul(av, dy, !*ta, false)
                };
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let da = dy.zip_map(val(*b), |g, y| g * y);
                let db = dy.zip_map(val(*a), |g, x| g * x);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::AddRow(x, r) => {
                acc(grads, *x, dy.clone());
                acc(grads, *r, col_sums(dy));
            }
            Op::MulRow(x, r) => {
                let rv = val(*r);
                let dx = broadcast_rows(dy, rv, |g, s| g * s);
                let xr = dy.zip_map(val(*x), |g, a| g * a);
                acc(grads, *x, dx);
                acc(grads, *r, col_sums(&xr));
            }
            Op::Scale(x, s) => acc(grads, *x, dy.map(|g| g * *s)),
            Op::AddConst(x) => acc(grads, *x, dy.clone()),
            Op::Exp(x) => acc(grads, *x, dy.zip_map(&node.value, |g, y| g * y)),
            Op::Log(x) => acc(grads, *x, dy.zip_map(val(*x), |g, a| g / a)),
            Op::Silu(x) => acc(
                grads,
                *x,
                dy.zip_map(val(*x), |g, a| {
                    let s = sigmoid(a);
                    g * (s + a * s * (T::one() - s))
                }),
            ),
            Op::Softmax(x) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (yr, gr) = (y.row(i), dy.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                acc(grads, *x, Tensor::from_rows(r, c, dx));
            }
            Op::LayerNorm(x, eps) => {
                let xv = val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let n = T::lit(c as f64);
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (mean, rstd) = row_moments(xv.row(i), *eps);
                    let gr = dy.row(i);
                    let xhat: Vec<T> = xv.row(i).iter().map(|&a| (a - mean) * rstd).collect();
                    let sum_g: T = gr.iter().copied().sum();
                    let sum_gx: T = gr.iter().zip(&xhat).map(|(&g, &h)| g * h).sum();
                    dx.extend(
                        gr.iter()
                            .zip(&xhat)
                            .map(|(&g, &h)| rstd / n * (n * g - sum_g - h * sum_gx)),
                    );
                }
                acc(grads, *x, Tensor::from_rows(r, c, dx));
            }
            Op::SumAll(x) => {
                let g = dy.item();
                acc(grads, *x, Tensor::full(val(*x).shape(), g));
            }
            Op::MeanAll(x) => {
                let xv = val(*x);
                let g = dy.item() / T::lit(xv.len() as f64);
                acc(grads, *x, Tensor::full(xv.shape(), g));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let part = Tensor::from_fn(dy.rows(), w, |r, c| dy.at(r, start + c));
                    acc(grads, p, part);
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = val(p).rows();
                    acc(grads, p, dy.slice_rows(start, h));
                    start += h;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..dy.rows() {
                    for c in 0..dy.cols() {
                        dx.set(r, start + c, dy.at(r, c));
                    }
                }
                acc(grads, *x, dx);
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let c = xv.cols();
                dx.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                acc(grads, *x, dx);
            }
            Op::GatherRows(x, idx) => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (d, &g) in dx.row_mut(i).iter_mut().zip(dy.row(k)) {
                        *d = *d + g;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Transpose(x) => acc(grads, *x, dy.transpose()),
        }
    }

    /// Adds the gradient of every parameter leaf into `store`.
    pub fn accumulate(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.grads.get(v.0).and_then(|g| g.as_ref()) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }

    /// Like [`Graph::accumulate`], scaling each gradient by `weight`.
    pub fn accumulate_scaled(&self, grads: &Gradients<T>, store: &mut ParamStore<T>, weight: T) {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.grads.get(v.0).and_then(|g| g.as_ref()) {
                store.grad_mut(id).add_assign(&g.map(|x| x * weight));
            }
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid<T: Real>(a: T) -> T {
    T::one() / (T::one() + (-a).exp())
}

fn row_moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn broadcast_rows<T: Real>(x: &Tensor<T>, r: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let c = x.cols();
    assert_eq!(
        r.len(),
        c,
        "row broadcast: {:?} vs {:?}",
        x.shape(),
        r.shape()
    );
    let rd = r.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| f(a, rd[i % c]))
        .collect();
    Tensor::from_rows(x.rows(), c, data)
}

fn col_sums<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.cols();
    let mut out = vec![T::zero(); c];
    for r in 0..x.rows() {
        for (o, &v) in out.iter_mut().zip(x.row(r)) {
            *o = *o + v;
        }
    }
    Tensor::from_rows(1, c, out)
}

pub(crate) fn softmax_rows<T: Real>(x: &Tensor<T>, mask: Option<&Mask>) -> Tensor<T> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let row = x.row(i);
        let allowed = |j: usize| mask.is_none_or(|m| m.allows(c, i, j));
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        assert!(
            max > T::neg_infinity() || row.iter().any(|v| v.is_nan()),
            "softmax row {i} has no allowed entries"
        );
        let o = &mut out[i * c..(i + 1) * c];
        let mut z = T::zero();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                o[j] = e;
                z = z + e;
            }
        }
        for v in o.iter_mut() {
            *v = *v / z;
        }
    }
    Tensor::from_rows(r, c, out)
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "constant",
        Op::Param => "parameter",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::AddConst(..) => "add_const",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Silu(..) => "silu",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm(..) => "layer_norm",
        Op::SumAll(..) => "sum",
        Op::MeanAll(..) => "mean",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::GatherRows(..) => "gather_rows",
        Op::Transpose(..) => "transpose",
    }
}
