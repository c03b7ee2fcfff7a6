use std::collections::BTreeMap;
use std::sync::Arc;

use super::{matmul_strided, split_axis, ParamSet, Real, Tensor, TensorError};

type Res<T> = Result<T, TensorError>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Silu,
    Tanh,
    Exp,
    Softplus,
    Abs,
    Square,
    Relu,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, inv_std: Vec<T> },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    GatherRows { x: Var, index: Arc<Vec<u32>> },
    ScatterAddRows { x: Var, index: Arc<Vec<u32>> },
    SelectRows { x: Var, fill: Var, keep: Arc<Vec<bool>> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order; [`Graph::backward`] walks the tape
/// in reverse and accumulates exact gradients of a scalar output. Reductions
/// use a fixed summation order.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter name to graph leaf mapping produced by [`Graph::bind`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, TensorError> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn merge(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`; zeros if `v` did not influence the output.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients for every parameter in `bound`, keyed by name.
    pub fn collect(&self, bound: &Bound) -> BTreeMap<String, Tensor<T>> {
        bound.vars.iter().map(|(k, &v)| (k.clone(), self.get(v))).collect()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        {
            if !value.all_finite() {
                let inputs_finite = self.inputs(&op).iter().all(|&p| self.nodes[p.0].value.all_finite());
                debug_assert!(!inputs_finite, "non-finite output from finite inputs");
            }
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that gradients flow into.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds every tensor of a parameter set as a leaf.
    pub fn bind(&mut self, params: &ParamSet<T>, trainable: bool) -> Bound {
        self.bind_prefixed(params, "", trainable)
    }

    /// Binds parameters whose names start with `prefix`.
    pub fn bind_prefixed(&mut self, params: &ParamSet<T>, prefix: &str, trainable: bool) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let v = if trainable { self.param(t.clone()) } else { self.constant(t.clone()) };
            vars.insert(name.clone(), v);
        }
        Bound { vars }
    }

    #[cfg(debug_assertions)]
    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::SelectRows { x, fill, .. } => vec![*x, *fill],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(a, _)
            | Op::SumAll(a)
            | Op::Reshape(a) => vec![*a],
            Op::Softmax { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::GatherRows { x, .. }
            | Op::ScatterAddRows { x, .. }
            | Op::Narrow { x, .. } => vec![*x],
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Res<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::InvalidShape { op, shape: s.to_vec(), detail: "expected a matrix".into() }),
        }
    }

    // ---- forward ops -------------------------------------------------------

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Res<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_strided(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Res<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([n, m], out)?, Op::Transpose(a), rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Res<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res<Var> {
        let t = self.binary("add", a, b, |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res<Var> {
        let t = self.binary("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res<Var> {
        let t = self.binary("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Res<Tensor<T>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let n = *sa.last().unwrap_or(&1);
        if sa.is_empty() || sb.len() != 1 || sb[0] != n {
            return Err(mismatch(op, sa, sb));
        }
        let row = self.value(b).data();
        let x = self.value(a);
        let data = x.data().iter().enumerate().map(|(i, &p)| f(p, row[i % n])).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Adds a vector along the trailing axis.
    pub fn add_row(&mut self, a: Var, row: Var) -> Res<Var> {
        let t = self.row_broadcast("add_row", a, row, |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    /// Multiplies by a vector along the trailing axis.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Res<Var> {
        let t = self.row_broadcast("mul_row", a, row, |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Silu => |x| x * sigmoid(x),
            Unary::Tanh => |x| x.tanh(),
            Unary::Exp => |x| x.exp(),
            Unary::Softplus => |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            Unary::Abs => |x| x.abs(),
            Unary::Square => |x| x * x,
            Unary::Relu => |x| x.max(T::zero()),
        };
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, Op::Unary(a, kind), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Res<Var> {
        let (outer, n, inner) = split_axis("softmax", self.shape(a), axis)?;
        let x = self.value(a);
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let mut max = T::neg_infinity();
                for i in 0..n {
                    max = max.max(src[at(i)]);
                }
                let mut sum = T::zero();
                for i in 0..n {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum = sum + e;
                }
                for i in 0..n {
                    out[at(i)] = out[at(i)] / sum;
                }
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax { x: a, axis }, rg))
    }

    /// Normalizes each trailing-axis row to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Res<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm",
            shape: shape.clone(),
            detail: "scalar input".into(),
        })?;
        let src = self.value(a).data();
        let rows = src.len() / n.max(1);
        let nf = T::c(n as f64);
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().fold(T::zero(), |s, x| s + x) / nf;
            let var = row.iter().fold(T::zero(), |s, &x| s + (x - mean) * (x - mean)) / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x: a, inv_std }, rg))
    }

    fn reduce_axis(&self, op: &'static str, a: Var, axis: usize) -> Res<(Tensor<T>, usize)> {
        let shape = self.shape(a);
        let (outer, n, inner) = split_axis(op, shape, axis)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] = out[o * inner + j] + src[base + j];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok((Tensor::new(out_shape, out)?, n))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Res<Var> {
        let (t, _) = self.reduce_axis("sum", a, axis)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Sum { x: a, axis }, rg))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Res<Var> {
        let (t, n) = self.reduce_axis("mean", a, axis)?;
        let inv = T::one() / T::c(n as f64);
        let t = t.map(|x| x * inv);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Mean { x: a, axis }, rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |s, &x| s + x);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    fn row_size(&self, op: &'static str, a: Var) -> Res<(usize, usize)> {
        let shape = self.shape(a);
        if shape.is_empty() {
            return Err(TensorError::InvalidShape { op, shape: vec![], detail: "scalar input".into() });
        }
        Ok((shape[0], shape[1..].iter().product()))
    }

    /// Selects rows (slices along axis 0) by index.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<u32>>) -> Res<Var> {
        let (rows, width) = self.row_size("gather_rows", a)?;
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= rows) {
            return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: bad as usize, len: rows });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index.iter() {
            let i = i as usize;
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape(a).to_vec();
        shape[0] = index.len();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::GatherRows { x: a, index }, rg))
    }

    /// Sums row `i` of `a` into row `index[i]` of a `rows`-row output.
    pub fn scatter_add_rows(&mut self, a: Var, index: Arc<Vec<u32>>, rows: usize) -> Res<Var> {
        let (n, width) = self.row_size("scatter_add_rows", a)?;
        if n != index.len() {
            return Err(mismatch("scatter_add_rows", self.shape(a), &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= rows) {
            return Err(TensorError::IndexOutOfRange { op: "scatter_add_rows", index: bad as usize, len: rows });
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); rows * width];
        for (r, &i) in index.iter().enumerate() {
            let i = i as usize;
            for j in 0..width {
                out[i * width + j] = out[i * width + j] + src[r * width + j];
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape[0] = rows;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScatterAddRows { x: a, index }, rg))
    }

    /// Row `i` of the output is row `i` of `a` where `keep[i]`, else `fill`.
    pub fn select_rows(&mut self, a: Var, fill: Var, keep: Arc<Vec<bool>>) -> Res<Var> {
        let (rows, width) = self.row_size("select_rows", a)?;
        if rows != keep.len() || self.value(fill).numel() != width {
            return Err(mismatch("select_rows", self.shape(a), self.shape(fill)));
        }
        let src = self.value(a).data();
        let f = self.value(fill).data();
        let mut out = Vec::with_capacity(rows * width);
        for (r, &k) in keep.iter().enumerate() {
            if k {
                out.extend_from_slice(&src[r * width..(r + 1) * width]);
            } else {
                out.extend_from_slice(f);
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(fill);
        Ok(self.push(Tensor::new(shape, out)?, Op::SelectRows { x: a, fill, keep }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Res<Var> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            detail: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Res<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis("narrow", &shape, axis)?;
        if start + len > n {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                shape,
                detail: format!("range {start}..{} exceeds axis length {n}", start + len),
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Narrow { x: a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Res<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// `x @ w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Res<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---- backward ----------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to all nodes.
    pub fn backward(&self, loss: Var) -> Res<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "backward",
                shape: self.shape(loss).to_vec(),
                detail: "loss must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e = *e + c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    // dA = dC @ B^T
                    let ga = matmul_strided(m, n, k, g, (n as isize, 1), val(*b), (1, n as isize));
                    acc(*a, ga);
                }
                if self.rg(*b) {
                    // dB = A^T @ dC
                    let gb = matmul_strided(k, m, n, val(*a), (1, k as isize), g, (n as isize, 1));
                    acc(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut out = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = g[j * m + i];
                    }
                }
                acc(*a, out);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect());
                }
                if self.rg(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddRow(a, b) => {
                let n = self.value(*b).numel();
                acc(*a, g.to_vec());
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); n];
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + x;
                    }
                    acc(*b, gb);
                }
            }
            Op::MulRow(a, b) => {
                let row = val(*b);
                let n = row.len();
                if self.rg(*a) {
                    acc(*a, g.iter().enumerate().map(|(i, &x)| x * row[i % n]).collect());
                }
                if self.rg(*b) {
                    let xa = val(*a);
                    let mut gb = vec![T::zero(); n];
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + x * xa[i];
                    }
                    acc(*b, gb);
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|&x| x * *s).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Unary(a, kind) => {
                let x = val(*a);
                let y = node.value.data();
                let d: Vec<T> = match kind {
                    Unary::Silu => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| {
                            let s = sigmoid(x);
                            g * s * (T::one() + x * (T::one() - s))
                        })
                        .collect(),
                    Unary::Tanh => y.iter().zip(g).map(|(&y, &g)| g * (T::one() - y * y)).collect(),
                    Unary::Exp => y.iter().zip(g).map(|(&y, &g)| g * y).collect(),
                    Unary::Softplus => x.iter().zip(g).map(|(&x, &g)| g * sigmoid(x)).collect(),
                    Unary::Abs => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                    Unary::Square => x.iter().zip(g).map(|(&x, &g)| g * (x + x)).collect(),
                    Unary::Relu => {
                        x.iter().zip(g).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() }).collect()
                    }
                };
                acc(*a, d);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis("softmax", self.shape(*x), *axis).expect("checked");
                let y = node.value.data();
                let mut out = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let dot = (0..n).fold(T::zero(), |s, i| s + g[at(i)] * y[at(i)]);
                        for i in 0..n {
                            out[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                acc(*x, out);
            }
            Op::LayerNorm { x, inv_std } => {
                let n = *self.shape(*x).last().expect("checked");
                let y = node.value.data();
                let nf = T::c(n as f64);
                let mut out = vec![T::zero(); y.len()];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gy = &g[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let sum_g = gy.iter().fold(T::zero(), |s, &v| s + v);
                    let sum_gy = gy.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for i in 0..n {
                        out[r * n + i] = inv / nf * (nf * gy[i] - sum_g - yr[i] * sum_gy);
                    }
                }
                acc(*x, out);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let (outer, n, inner) = split_axis("sum", self.shape(*x), *axis).expect("checked");
                let s = if matches!(node.op, Op::Mean { .. }) { T::one() / T::c(n as f64) } else { T::one() };
                let mut out = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            out[(o * n + i) * inner + j] = g[o * inner + j] * s;
                        }
                    }
                }
                acc(*x, out);
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::GatherRows { x, index } => {
                let (rows, width) = self.row_size("gather_rows", *x).expect("checked");
                let mut out = vec![T::zero(); rows * width];
                for (r, &i) in index.iter().enumerate() {
                    let i = i as usize;
                    for j in 0..width {
                        out[i * width + j] = out[i * width + j] + g[r * width + j];
                    }
                }
                acc(*x, out);
            }
            Op::ScatterAddRows { x, index } => {
                let width = self.row_size("scatter_add_rows", *x).expect("checked").1;
                let mut out = Vec::with_capacity(index.len() * width);
                for &i in index.iter() {
                    let i = i as usize;
                    out.extend_from_slice(&g[i * width..(i + 1) * width]);
                }
                acc(*x, out);
            }
            Op::SelectRows { x, fill, keep } => {
                let width = self.value(*fill).numel();
                if self.rg(*x) {
                    let mut out = g.to_vec();
                    for (r, &k) in keep.iter().enumerate() {
                        if !k {
                            out[r * width..(r + 1) * width].iter_mut().for_each(|v| *v = T::zero());
                        }
                    }
                    acc(*x, out);
                }
                if self.rg(*fill) {
                    let mut gf = vec![T::zero(); width];
                    for (r, &k) in keep.iter().enumerate() {
                        if !k {
                            for j in 0..width {
                                gf[j] = gf[j] + g[r * width + j];
                            }
                        }
                    }
                    acc(*fill, gf);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis("concat", node.value.shape(), *axis).expect("checked");
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut out = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            out.extend_from_slice(&g[start..start + n * inner]);
                        }
                        acc(p, out);
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis("narrow", self.shape(*x), *axis).expect("checked");
                let len = node.value.shape()[*axis];
                let mut out = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    out[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, out);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(3));
        let a = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full([2, 5], 3.7));
        let y = g.softmax(a, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
        let c = g.constant(Tensor::zeros([3, 2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum_all(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).data(), &[1.0; 4]);
    }

    #[test]
    fn gather_scatter_roundtrip_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let idx = Arc::new(vec![2, 0, 2]);
        let y = g.gather_rows(a, idx.clone()).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let z = g.scatter_add_rows(y, idx, 3).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 2.0, 0.0, 0.0, 10.0, 12.0]);
        assert!(g.gather_rows(a, Arc::new(vec![3])).is_err());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[9.0, 8.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = g.narrow(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(back).data(), g.value(b).data());
    }

    #[test]
    fn select_rows_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let f = g.param(t(&[2], &[7.0, 7.0]));
        let y = g.select_rows(a, f, Arc::new(vec![true, false])).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).data(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(grads.get(f).data(), &[1.0, 1.0]);
    }
}
