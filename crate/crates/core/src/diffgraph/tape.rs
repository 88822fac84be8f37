//! Computation tape: forward evaluation records one node per op, and
//! [`Tape::backward`] walks the nodes in reverse to accumulate gradients.

use std::collections::{BTreeMap, HashMap};

use crate::clifford::{BLADES, GRADE_OF, PRODUCT_TABLE};

use super::linalg::{gemm, Layout};
use super::{GraphError, ParameterStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arithmetic precision of tape evaluation.
///
/// `F32` rounds every op result (and every propagated gradient) to the
/// nearest single-precision value, emulating single-precision execution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    #[inline]
    fn round(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for x in data {
                *x = *x as f32 as f64;
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sqrt(Var),
    Sigmoid(Var),
    Silu(Var),
    Sum { x: Var, axis: usize },
    SumAll(Var),
    Mean(Var),
    Gather { x: Var, index: Vec<usize> },
    ScatterSum { x: Var, index: Vec<usize> },
    Mse { pred: Var, target: Var },
    MvLinear { v: Var, w: Var },
    GeometricProduct(Var, Var),
    MvInner(Var, Var),
    MvGradeSq(Var),
    ChannelScale { v: Var, g: Var },
    RowScale { x: Var, factors: Vec<f64> },
    SelectLast { x: Var, idx: Vec<usize> },
    ScatterLast { x: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss through any trainable path.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }
}

/// A single computation graph. Not shared between threads; independent tapes
/// may run concurrently.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    precision: Precision,
    params: HashMap<String, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> GraphError {
    GraphError::Shape { op, detail }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    /// A recording tape in double precision.
    pub fn new() -> Self {
        Self::with_options(true, Precision::F64)
    }

    /// A forward-only tape; values are identical to a recording tape.
    pub fn inference() -> Self {
        Self::with_options(false, Precision::F64)
    }

    pub fn with_options(recording: bool, precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            recording,
            precision,
            params: HashMap::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by node values.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * 8).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        self.precision.round(&mut data);
        let needs_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, t: Tensor, needs_grad: bool) -> Var {
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        let v = self.push(shape, data, Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = needs_grad && self.recording;
        v
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Places the named parameter on the tape once and returns its handle.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var, GraphError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| GraphError::MissingParam(name.to_string()))?;
        let v = self.push_leaf(p.value.clone(), p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Handles of every parameter placed on this tape, sorted by name.
    pub fn params(&self) -> BTreeMap<String, Var> {
        self.params.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    /// `x @ w + b` for `x: (M, in)`, `w: (in, out)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, GraphError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err("linear", format!("x {xs:?} vs w {ws:?}")));
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(shape_err("linear", format!("bias {:?} vs out {n}", self.shape(b))));
            }
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(x),
            Layout::row(k),
            self.data(w),
            Layout::row(n),
            &mut out,
            Layout::row(n),
        );
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(n) {
                for (o, bb) in row.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(vec![m, n], out, Op::Linear { x, w, b }, &parents))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), GraphError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        (self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.same_shape("add", a, b)?;
        let (s, d) = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(s, d, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.same_shape("sub", a, b)?;
        let (s, d) = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(s, d, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.same_shape("mul", a, b)?;
        let (s, d) = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(s, d, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.same_shape("div", a, b)?;
        let (s, d) = self.zip_with(a, b, |x, y| x / y);
        Ok(self.push(s, d, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let d = self.data(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), d, Op::Scale(a, c), &[a])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GraphError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let d = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), d, Op::Reshape(x), &[x]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, GraphError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.data(*p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, GraphError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("slice", format!("{s:?} axis {axis} range {start}..{}", start + len)));
        }
        let (outer, ax, inner) = split_axis(&s, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ax + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Elementwise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let d = self.data(x).iter().map(|v| v.sqrt()).collect();
        self.push(self.shape(x).to_vec(), d, Op::Sqrt(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let d = self.data(x).iter().map(|v| sigmoid(*v)).collect();
        self.push(self.shape(x).to_vec(), d, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let d = self.data(x).iter().map(|v| v * sigmoid(*v)).collect();
        self.push(self.shape(x).to_vec(), d, Op::Silu(x), &[x])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var, GraphError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("sum", format!("axis {axis} for shape {s:?}")));
        }
        let (outer, ax, inner) = split_axis(&s, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..ax {
                let row = &src[(o * ax + a) * inner..(o * ax + a + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        Ok(self.push(shape, out, Op::Sum { x, axis }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(vec![], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, GraphError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s = self.data(x).iter().sum::<f64>() / n as f64;
        Ok(self.push(vec![], vec![s], Op::Mean(x), &[x]))
    }

    /// Selects rows (axis 0) of `x` by `index`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var, GraphError> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(shape_err("gather", "scalar input".into()));
        }
        let rows = s[0];
        let inner: usize = s[1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(index.len() * inner);
        for &i in index {
            if i >= rows {
                return Err(GraphError::Index {
                    op: "gather",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = index.len();
        Ok(self.push(shape, out, Op::Gather { x, index: index.to_vec() }, &[x]))
    }

    /// Adds row `e` of `x` into row `index[e]` of an `n_targets`-row output.
    pub fn scatter_sum(&mut self, x: Var, index: &[usize], n_targets: usize) -> Result<Var, GraphError> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[0] != index.len() {
            return Err(shape_err("scatter_sum", format!("values {s:?} vs index len {}", index.len())));
        }
        let inner: usize = s[1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; n_targets * inner];
        for (e, &t) in index.iter().enumerate() {
            if t >= n_targets {
                return Err(GraphError::Index {
                    op: "scatter_sum",
                    index: t,
                    bound: n_targets,
                });
            }
            for (dst, v) in out[t * inner..(t + 1) * inner].iter_mut().zip(&src[e * inner..(e + 1) * inner]) {
                *dst += v;
            }
        }
        let mut shape = s;
        shape[0] = n_targets;
        Ok(self.push(shape, out, Op::ScatterSum { x, index: index.to_vec() }, &[x]))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, GraphError> {
        self.same_shape("mse", pred, target)?;
        let n = self.value(pred).len();
        if n == 0 {
            return Err(shape_err("mse", "empty tensor".into()));
        }
        let s: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(vec![], vec![s / n as f64], Op::Mse { pred, target }, &[pred, target]))
    }

    fn mv_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), GraphError> {
        let s = self.shape(v);
        if s.len() != 3 || s[2] != BLADES || s[1] == 0 {
            return Err(shape_err(op, format!("expected (rows, channels, 8), got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Grade-wise channel mixing: `v: (M, c_in, 8)`, `w: (4, c_out, c_in)`.
    pub fn mv_linear(&mut self, v: Var, w: Var) -> Result<Var, GraphError> {
        let (m, cin) = self.mv_dims("mv_linear", v)?;
        let ws = self.shape(w);
        if ws.len() != 3 || ws[0] != 4 || ws[2] != cin {
            return Err(shape_err("mv_linear", format!("weights {ws:?} vs input channels {cin}")));
        }
        let cout = ws[1];
        let mut out = vec![0.0; m * cout * BLADES];
        let (vd, wd) = (self.data(v), self.data(w));
        for slot in (0..BLADES).filter(|_| m > 0 && cin > 0) {
            let g = GRADE_OF[slot];
            gemm(
                m,
                cin,
                cout,
                &vd[slot..],
                Layout::new(cin * BLADES, BLADES),
                &wd[g * cout * cin..],
                Layout::new(1, cin),
                &mut out[slot..],
                Layout::new(cout * BLADES, BLADES),
            );
        }
        Ok(self.push(vec![m, cout, BLADES], out, Op::MvLinear { v, w }, &[v, w]))
    }

    /// Channel-wise geometric product of two `(M, c, 8)` arrays.
    pub fn geometric_product(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.mv_dims("geometric_product", a)?;
        self.same_shape("geometric_product", a, b)?;
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; ad.len()];
        for ((o, x), y) in out.chunks_exact_mut(BLADES).zip(ad.chunks_exact(BLADES)).zip(bd.chunks_exact(BLADES)) {
            for i in 0..BLADES {
                let xi = x[i];
                for j in 0..BLADES {
                    let p = PRODUCT_TABLE[i][j];
                    o[p.index] += p.sign * xi * y[j];
                }
            }
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::GeometricProduct(a, b), &[a, b]))
    }

    /// Per-channel bilinear form: `(M, c, 8) x (M, c, 8) -> (M, c)`.
    pub fn mv_inner(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (m, c) = self.mv_dims("mv_inner", a)?;
        self.same_shape("mv_inner", a, b)?;
        let out = self
            .data(a)
            .chunks_exact(BLADES)
            .zip(self.data(b).chunks_exact(BLADES))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        Ok(self.push(vec![m, c], out, Op::MvInner(a, b), &[a, b]))
    }

    /// Per-channel, per-grade quadratic form: `(M, c, 8) -> (M, 4c)`, laid out
    /// channel-major (`[c0g0, c0g1, c0g2, c0g3, c1g0, ...]`).
    pub fn mv_grade_sq(&mut self, v: Var) -> Result<Var, GraphError> {
        let (m, c) = self.mv_dims("mv_grade_sq", v)?;
        let mut out = vec![0.0; m * c * 4];
        for (o, x) in out.chunks_exact_mut(4).zip(self.data(v).chunks_exact(BLADES)) {
            for (s, xv) in x.iter().enumerate() {
                o[GRADE_OF[s]] += xv * xv;
            }
        }
        Ok(self.push(vec![m, c * 4], out, Op::MvGradeSq(v), &[v]))
    }

    /// `v: (M, c, d)` scaled by `g: (M, c)` along the last axis.
    pub fn channel_scale(&mut self, v: Var, g: Var) -> Result<Var, GraphError> {
        let (vs, gs) = (self.shape(v), self.shape(g));
        if vs.len() != 3 || gs.len() != 2 || vs[0] != gs[0] || vs[1] != gs[1] {
            return Err(shape_err("channel_scale", format!("v {vs:?} vs gate {gs:?}")));
        }
        let d = vs[2];
        let out = self
            .data(v)
            .chunks_exact(d.max(1))
            .zip(self.data(g))
            .flat_map(|(row, s)| row.iter().map(move |x| x * s))
            .collect();
        Ok(self.push(vs.to_vec(), out, Op::ChannelScale { v, g }, &[v, g]))
    }

    /// Multiplies row `i` (axis 0) by the constant `factors[i]`.
    pub fn row_scale(&mut self, x: Var, factors: &[f64]) -> Result<Var, GraphError> {
        let s = self.shape(x);
        if s.is_empty() || s[0] != factors.len() {
            return Err(shape_err("row_scale", format!("{s:?} vs {} factors", factors.len())));
        }
        let inner: usize = s[1..].iter().product();
        let mut out = self.data(x).to_vec();
        if inner > 0 {
            for (row, f) in out.chunks_exact_mut(inner).zip(factors) {
                for v in row {
                    *v *= f;
                }
            }
        }
        Ok(self.push(s.to_vec(), out, Op::RowScale { x, factors: factors.to_vec() }, &[x]))
    }

    /// Picks components `idx` of the last axis.
    pub fn select_last(&mut self, x: Var, idx: &[usize]) -> Result<Var, GraphError> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| shape_err("select_last", "scalar input".into()))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= d) {
            return Err(GraphError::Index {
                op: "select_last",
                index: bad,
                bound: d,
            });
        }
        let mut out = Vec::with_capacity(self.value(x).len() / d.max(1) * idx.len());
        for row in self.data(x).chunks_exact(d) {
            out.extend(idx.iter().map(|&i| row[i]));
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = idx.len();
        Ok(self.push(shape, out, Op::SelectLast { x, idx: idx.to_vec() }, &[x]))
    }

    /// Inverse placement of [`Tape::select_last`]: writes the last axis of `x`
    /// into slots `idx` of a zero last axis of length `d`.
    pub fn scatter_last(&mut self, x: Var, idx: &[usize], d: usize) -> Result<Var, GraphError> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| shape_err("scatter_last", "scalar input".into()))?;
        if k != idx.len() {
            return Err(shape_err("scatter_last", format!("last extent {k} vs {} slots", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= d) {
            return Err(GraphError::Index {
                op: "scatter_last",
                index: bad,
                bound: d,
            });
        }
        let rows = self.value(x).len().checked_div(k).unwrap_or(0);
        let mut out = vec![0.0; rows * d];
        for (orow, row) in out.chunks_exact_mut(d).zip(self.data(x).chunks_exact(k.max(1))) {
            for (t, &i) in idx.iter().enumerate() {
                orow[i] = row[t];
            }
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = d;
        Ok(self.push(shape, out, Op::ScatterLast { x, idx: idx.to_vec() }, &[x]))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GraphError> {
        if !self.recording {
            return Err(GraphError::Contract("backward called on a non-recording tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(GraphError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            self.precision.round(&mut g);
            self.backprop(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Keep leaves only.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(n.op, Op::Leaf) || !n.needs_grad {
                *g = None;
            } else if let Some(g) = g {
                self.precision.round(g);
            }
        }
        Ok(Gradients { grads, shapes })
    }

    /// Gradients of every trainable parameter on the tape.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(k, v)| {
                let g = grads.get(*v).unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
                (k.clone(), g)
            })
            .collect()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                if self.wants(*x) {
                    let wd = self.data(*w);
                    accumulate(&mut grads[x.0], m * k, |dx| {
                        gemm(m, n, k, g, Layout::row(n), wd, Layout::new(1, n), dx, Layout::row(k))
                    });
                }
                if self.wants(*w) {
                    let xd = self.data(*x);
                    accumulate(&mut grads[w.0], k * n, |dw| {
                        gemm(k, m, n, xd, Layout::new(1, k), g, Layout::row(n), dw, Layout::row(n))
                    });
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        accumulate(&mut grads[b.0], n, |db| {
                            for row in g.chunks_exact(n) {
                                for (d, v) in db.iter_mut().zip(row) {
                                    *d += v;
                                }
                            }
                        });
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| add_into(d, g, 1.0));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.len(), |d| add_into(d, g, sign));
                }
            }
            Op::Mul(a, b) => {
                for (p, q) in [(*a, *b), (*b, *a)] {
                    if self.wants(p) {
                        let other = self.data(q);
                        accumulate(&mut grads[p.0], g.len(), |d| {
                            for ((d, gv), o) in d.iter_mut().zip(g).zip(other) {
                                *d += gv * o;
                            }
                        });
                    }
                }
            }
            Op::Div(a, b) => {
                let bd = self.data(*b);
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for ((d, gv), bv) in d.iter_mut().zip(g).zip(bd) {
                            *d += gv / bv;
                        }
                    });
                }
                if self.wants(*b) {
                    let y = node.value.data();
                    accumulate(&mut grads[b.0], g.len(), |d| {
                        for (((d, gv), bv), yv) in d.iter_mut().zip(g).zip(bd).zip(y) {
                            *d -= gv * yv / bv;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| add_into(d, g, *c));
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| add_into(d, g, 1.0));
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], outer * len * inner, |d| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                add_into(&mut d[o * len * inner..(o + 1) * len * inner], src, 1.0);
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let (outer, ax, inner) = split_axis(self.shape(*x), *axis);
                    let len = node.value.shape()[*axis];
                    accumulate(&mut grads[x.0], outer * ax * inner, |d| {
                        for o in 0..outer {
                            let base = (o * ax + start) * inner;
                            add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner], 1.0);
                        }
                    });
                }
            }
            Op::Sqrt(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    accumulate(&mut grads[x.0], g.len(), |d| {
                        for ((d, gv), yv) in d.iter_mut().zip(g).zip(y) {
                            if *yv > 0.0 {
                                *d += gv * 0.5 / yv;
                            }
                        }
                    });
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    accumulate(&mut grads[x.0], g.len(), |d| {
                        for ((d, gv), yv) in d.iter_mut().zip(g).zip(y) {
                            *d += gv * yv * (1.0 - yv);
                        }
                    });
                }
            }
            Op::Silu(x) => {
                if self.wants(*x) {
                    let xd = self.data(*x);
                    accumulate(&mut grads[x.0], g.len(), |d| {
                        for ((d, gv), xv) in d.iter_mut().zip(g).zip(xd) {
                            let s = sigmoid(*xv);
                            *d += gv * (s + xv * s * (1.0 - s));
                        }
                    });
                }
            }
            Op::Sum { x, axis } => {
                if self.wants(*x) {
                    let (outer, ax, inner) = split_axis(self.shape(*x), *axis);
                    accumulate(&mut grads[x.0], outer * ax * inner, |d| {
                        for o in 0..outer {
                            for a in 0..ax {
                                let base = (o * ax + a) * inner;
                                add_into(&mut d[base..base + inner], &g[o * inner..(o + 1) * inner], 1.0);
                            }
                        }
                    });
                }
            }
            Op::SumAll(x) | Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.len_of(*x);
                    let gv = if matches!(node.op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                    accumulate(&mut grads[x.0], n, |d| {
                        for v in d {
                            *v += gv;
                        }
                    });
                }
            }
            Op::Gather { x, index } => {
                if self.wants(*x) {
                    let inner: usize = self.shape(*x)[1..].iter().product();
                    accumulate(&mut grads[x.0], self.len_of(*x), |d| {
                        for (e, &i) in index.iter().enumerate() {
                            add_into(&mut d[i * inner..(i + 1) * inner], &g[e * inner..(e + 1) * inner], 1.0);
                        }
                    });
                }
            }
            Op::ScatterSum { x, index } => {
                if self.wants(*x) {
                    let inner: usize = self.shape(*x)[1..].iter().product();
                    accumulate(&mut grads[x.0], self.len_of(*x), |d| {
                        for (e, &t) in index.iter().enumerate() {
                            add_into(&mut d[e * inner..(e + 1) * inner], &g[t * inner..(t + 1) * inner], 1.0);
                        }
                    });
                }
            }
            Op::Mse { pred, target } => {
                let n = self.len_of(*pred);
                let scale = 2.0 * g[0] / n as f64;
                let (p, t) = (self.data(*pred), self.data(*target));
                for (v, sign) in [(*pred, 1.0), (*target, -1.0)] {
                    if self.wants(v) {
                        accumulate(&mut grads[v.0], n, |d| {
                            for ((d, a), b) in d.iter_mut().zip(p).zip(t) {
                                *d += sign * scale * (a - b);
                            }
                        });
                    }
                }
            }
            Op::MvLinear { v, w } => {
                let (m, cin) = (self.shape(*v)[0], self.shape(*v)[1]);
                let cout = self.shape(*w)[1];
                if m == 0 {
                    return;
                }
                if self.wants(*v) {
                    let wd = self.data(*w);
                    accumulate(&mut grads[v.0], m * cin * BLADES, |dv| {
                        for slot in 0..BLADES {
                            let gr = GRADE_OF[slot];
                            gemm(
                                m,
                                cout,
                                cin,
                                &g[slot..],
                                Layout::new(cout * BLADES, BLADES),
                                &wd[gr * cout * cin..],
                                Layout::row(cin),
                                &mut dv[slot..],
                                Layout::new(cin * BLADES, BLADES),
                            );
                        }
                    });
                }
                if self.wants(*w) {
                    let vd = self.data(*v);
                    accumulate(&mut grads[w.0], 4 * cout * cin, |dw| {
                        for slot in 0..BLADES {
                            let gr = GRADE_OF[slot];
                            gemm(
                                cout,
                                m,
                                cin,
                                &g[slot..],
                                Layout::new(BLADES, cout * BLADES),
                                &vd[slot..],
                                Layout::new(cin * BLADES, BLADES),
                                &mut dw[gr * cout * cin..],
                                Layout::row(cin),
                            );
                        }
                    });
                }
            }
            Op::GeometricProduct(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |da| {
                        for ((d, y), go) in da.chunks_exact_mut(BLADES).zip(bd.chunks_exact(BLADES)).zip(g.chunks_exact(BLADES)) {
                            for i in 0..BLADES {
                                let mut s = 0.0;
                                for j in 0..BLADES {
                                    let p = PRODUCT_TABLE[i][j];
                                    s += p.sign * y[j] * go[p.index];
                                }
                                d[i] += s;
                            }
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.len(), |db| {
                        for ((d, x), go) in db.chunks_exact_mut(BLADES).zip(ad.chunks_exact(BLADES)).zip(g.chunks_exact(BLADES)) {
                            for i in 0..BLADES {
                                for j in 0..BLADES {
                                    let p = PRODUCT_TABLE[i][j];
                                    d[j] += p.sign * x[i] * go[p.index];
                                }
                            }
                        }
                    });
                }
            }
            Op::MvInner(a, b) => {
                for (p, q) in [(*a, *b), (*b, *a)] {
                    if self.wants(p) {
                        let other = self.data(q);
                        accumulate(&mut grads[p.0], other.len(), |d| {
                            for ((d, o), gv) in d.chunks_exact_mut(BLADES).zip(other.chunks_exact(BLADES)).zip(g) {
                                for (dd, oo) in d.iter_mut().zip(o) {
                                    *dd += gv * oo;
                                }
                            }
                        });
                    }
                }
            }
            Op::MvGradeSq(v) => {
                if self.wants(*v) {
                    let vd = self.data(*v);
                    accumulate(&mut grads[v.0], vd.len(), |d| {
                        for ((d, x), go) in d.chunks_exact_mut(BLADES).zip(vd.chunks_exact(BLADES)).zip(g.chunks_exact(4)) {
                            for s in 0..BLADES {
                                d[s] += 2.0 * x[s] * go[GRADE_OF[s]];
                            }
                        }
                    });
                }
            }
            Op::ChannelScale { v, g: gate } => {
                let dim = self.shape(*v)[2].max(1);
                if self.wants(*v) {
                    let gd = self.data(*gate);
                    accumulate(&mut grads[v.0], g.len(), |d| {
                        for ((d, go), s) in d.chunks_exact_mut(dim).zip(g.chunks_exact(dim)).zip(gd) {
                            add_into(d, go, *s);
                        }
                    });
                }
                if self.wants(*gate) {
                    let vd = self.data(*v);
                    accumulate(&mut grads[gate.0], self.len_of(*gate), |d| {
                        for ((d, go), x) in d.iter_mut().zip(g.chunks_exact(dim)).zip(vd.chunks_exact(dim)) {
                            *d += go.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                }
            }
            Op::RowScale { x, factors } => {
                if self.wants(*x) {
                    let inner = g.len() / factors.len().max(1);
                    accumulate(&mut grads[x.0], g.len(), |d| {
                        if inner > 0 {
                            for ((d, go), f) in d.chunks_exact_mut(inner).zip(g.chunks_exact(inner)).zip(factors) {
                                add_into(d, go, *f);
                            }
                        }
                    });
                }
            }
            Op::SelectLast { x, idx } => {
                if self.wants(*x) {
                    let dim = *self.shape(*x).last().unwrap();
                    let k = idx.len();
                    accumulate(&mut grads[x.0], self.len_of(*x), |d| {
                        if k > 0 {
                            for (drow, grow) in d.chunks_exact_mut(dim).zip(g.chunks_exact(k)) {
                                for (t, &i) in idx.iter().enumerate() {
                                    drow[i] += grow[t];
                                }
                            }
                        }
                    });
                }
            }
            Op::ScatterLast { x, idx } => {
                if self.wants(*x) {
                    let dim = *node.value.shape().last().unwrap();
                    let k = idx.len();
                    accumulate(&mut grads[x.0], self.len_of(*x), |d| {
                        if k > 0 {
                            for (drow, grow) in d.chunks_exact_mut(k).zip(g.chunks_exact(dim)) {
                                for (t, &i) in idx.iter().enumerate() {
                                    drow[t] += grow[i];
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}
