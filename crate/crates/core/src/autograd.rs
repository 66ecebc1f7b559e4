//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns
//! gradients for every node that depends on a grad-requiring leaf.
//!
//! Shape errors inside the graph are programming errors and panic; public
//! model entry points validate their inputs before building a graph.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{Module, Param, ParamId};
use crate::tensor::{broadcast_zip, expand_to, reduce_to, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, spec: ConvSpec },
    Upsample2x(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SumAxes(Var),
    SumAll(Var),
    Norm(Var),
    LogSoftmax(Var),
    Cosine { a: Var, b: Var, eps: f64 },
    Normalize(Var),
    IndexRows(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
    frozen: BTreeSet<ParamId>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Global L2 norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        let mut s = 0.0;
        for v in self.param_vars.values() {
            if let Some(g) = self.wrt(*v) {
                s += g.data().iter().map(|x| x * x).sum::<f64>();
            }
        }
        libm::sqrt(s)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters of `m` enter this graph as constants.
    pub fn freeze<M: Module + ?Sized>(&mut self, m: &M) {
        m.visit("", &mut |_, p| {
            self.frozen.insert(p.id());
        });
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a model parameter. Repeated binds of the same parameter share one node.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(v) = self.param_vars.get(&p.id()) {
            return *v;
        }
        let trainable = !self.frozen.contains(&p.id());
        let v = self.push(p.value().clone(), Op::Leaf, trainable);
        self.param_vars.insert(p.id(), v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = broadcast_zip(self.value(a), self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, libm::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, libm::log, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, libm::sqrt, Op::Sqrt(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| libm::pow(x, p), Op::Powf(a, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, libm::tanh, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    /// `op(a) · op(b)` for 2-D operands, where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = matmul_values(self.value(a), ta, self.value(b), tb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// 2-D convolution of `x: [N, C, H, W]` with `w: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), spec);
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::Conv2d { x, w, spec }, rg)
    }

    /// Nearest-neighbour ×2 upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let out = upsample2x_values(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Upsample2x(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let out = self.value(x).permute(perm);
        let rg = self.rg(x);
        self.push(out, Op::Permute(x, perm.to_vec()), rg)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Var {
        let src = self.value(x);
        let mut shape = src.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        let out = reduce_to(src.clone(), &shape);
        let rg = self.rg(x);
        self.push(out, Op::SumAxes(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::SumAll(x), rg)
    }

    /// Euclidean norm of all entries. The gradient at the origin is taken as zero.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = libm::sqrt(self.value(x).data().iter().map(|v| v * v).sum::<f64>());
        let rg = self.rg(x);
        self.push(Tensor::scalar(n), Op::Norm(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().expect("log_softmax of a scalar");
        let mut out = src.clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Row-wise cosine similarity along the last axis, with the denominator
    /// clamped below at `eps`. The result drops the last axis.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "cosine operands differ in shape");
        let d = *va.shape().last().expect("cosine of scalars");
        let rows: Vec<f64> = va
            .data()
            .chunks(d)
            .zip(vb.data().chunks(d))
            .map(|(ra, rb)| cosine_row(ra, rb, eps).0)
            .collect();
        let shape = &va.shape()[..va.dims() - 1];
        let out = Tensor::new(shape, rows);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Cosine { a, b, eps }, rg)
    }

    /// Scales each row (last axis) to unit L2 norm.
    pub fn normalize(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().expect("normalize of a scalar");
        let mut out = src.clone();
        for row in out.data_mut().chunks_mut(d) {
            let n = row_norm(row);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Normalize(x), rg)
    }

    /// Gathers rows of a 2-D table.
    pub fn index_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        assert_eq!(t.dims(), 2, "index_rows expects a 2-D table");
        let d = t.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[idx.len(), d], data);
        let rg = self.rg(table);
        self.push(out, Op::IndexRows(table, idx.to_vec()), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads);
        }
        Grads { grads, param_vars: self.param_vars.clone() }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*b) {
                    let gb = reduce_to(g.clone(), self.shape(*b));
                    self.accumulate(grads, *b, gb);
                }
                if self.rg(*a) {
                    let ga = reduce_to(g, self.shape(*a));
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    let gb = reduce_to(g.map(|v| -v), self.shape(*b));
                    self.accumulate(grads, *b, gb);
                }
                if self.rg(*a) {
                    let ga = reduce_to(g, self.shape(*a));
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = reduce_to(broadcast_zip(&g, vb, |x, y| x * y), va.shape());
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = reduce_to(broadcast_zip(&g, va, |x, y| x * y), vb.shape());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = reduce_to(broadcast_zip(&g, vb, |x, y| x / y), va.shape());
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out / b
                    let t = broadcast_zip(&g, out, |x, y| -x * y);
                    let gb = reduce_to(broadcast_zip(&t, vb, |x, y| x / y), vb.shape());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| x * y)),
            Op::Ln(a) => {
                let ga = g.zip_map(self.value(*a), |x, y| x / y);
                self.accumulate(grads, *a, ga);
            }
            Op::Norm(a) => {
                let n = out.item();
                let scale = if n > 0.0 { g.item() / n } else { 0.0 };
                self.accumulate(grads, *a, self.value(*a).map(|v| v * scale));
            }
            Op::Sqrt(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| 0.5 * x / y)),
            Op::Powf(a, p) => {
                let p = *p;
                let ga = g.zip_map(self.value(*a), |x, y| x * p * libm::pow(y, p - 1.0));
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(out, |x, s| x * s * (1.0 - s))),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(out, |x, t| x * (1.0 - t * t))),
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let ga = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { slope * x });
                self.accumulate(grads, *a, ga);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = if *ta { matmul_values(vb, *tb, &g, true) } else { matmul_values(&g, false, vb, !*tb) };
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = if *tb { matmul_values(&g, true, va, *ta) } else { matmul_values(va, !*ta, &g, false) };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, spec } => {
                let (gx, gw) = conv2d_backward(self.value(*x), self.value(*w), &g, *spec, self.rg(*x), self.rg(*w));
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Upsample2x(x) => {
                let gx = downsample2x_sum(&g);
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.reshape(&shape));
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, g.permute(&inv));
            }
            Op::SumAxes(x) => {
                let gx = expand_to(&g, self.shape(*x));
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let gx = Tensor::full(self.shape(*x), g.item());
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let d = *out.shape().last().unwrap();
                let mut gx = g.clone();
                for (grow, orow) in gx.data_mut().chunks_mut(d).zip(out.data().chunks(d)) {
                    let s: f64 = grow.iter().sum();
                    for (gv, &o) in grow.iter_mut().zip(orow) {
                        *gv -= libm::exp(o) * s;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Cosine { a, b, eps } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = *va.shape().last().unwrap();
                let mut ga = Tensor::zeros(va.shape());
                let mut gb = Tensor::zeros(vb.shape());
                for (r, &gr) in g.data().iter().enumerate() {
                    let ra = &va.data()[r * d..(r + 1) * d];
                    let rb = &vb.data()[r * d..(r + 1) * d];
                    let (cos, na, nb, clamped) = cosine_row(ra, rb, *eps);
                    let oa = &mut ga.data_mut()[r * d..(r + 1) * d];
                    if clamped {
                        for k in 0..d {
                            oa[k] = gr * rb[k] / eps;
                        }
                    } else {
                        for k in 0..d {
                            oa[k] = gr * (rb[k] / (na * nb) - cos * ra[k] / (na * na));
                        }
                    }
                    let ob = &mut gb.data_mut()[r * d..(r + 1) * d];
                    if clamped {
                        for k in 0..d {
                            ob[k] = gr * ra[k] / eps;
                        }
                    } else {
                        for k in 0..d {
                            ob[k] = gr * (ra[k] / (na * nb) - cos * rb[k] / (nb * nb));
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Normalize(x) => {
                let vx = self.value(*x);
                let d = *vx.shape().last().unwrap();
                let mut gx = g.clone();
                for ((grow, yrow), xrow) in gx.data_mut().chunks_mut(d).zip(out.data().chunks(d)).zip(vx.data().chunks(d)) {
                    let n = row_norm(xrow);
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv = (*gv - y * dot) / n;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::IndexRows(table, idx) => {
                let shape = self.shape(*table).to_vec();
                let d = shape[1];
                let mut gt = Tensor::zeros(&shape);
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (t, s) in gt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *t += s;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn row_norm(row: &[f64]) -> f64 {
    libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(NORM_FLOOR)
}

/// `(cos, |a|, |b|, clamped)` for one pair of rows.
pub(crate) fn cosine_row(a: &[f64], b: &[f64], eps: f64) -> (f64, f64, f64, bool) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|v| v * v).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|v| v * v).sum::<f64>());
    let denom = na * nb;
    if denom < eps {
        (dot / eps, na, nb, true)
    } else {
        (dot / denom, na, nb, false)
    }
}

/// `C = op(A) · op(B)` via `matrixmultiply`, using strides for transposes.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // op(A) is m×k: stored row-major as m×k, or as k×m when transposed
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; the strides describe in-range views.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

pub(crate) fn matmul_values(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    assert!(a.dims() == 2 && b.dims() == 2, "matmul expects 2-D operands, got {:?} and {:?}", a.shape(), b.shape());
    let (m, k) = if ta { (a.shape()[1], a.shape()[0]) } else { (a.shape()[0], a.shape()[1]) };
    let (k2, n) = if tb { (b.shape()[1], b.shape()[0]) } else { (b.shape()[0], b.shape()[1]) };
    assert_eq!(k, k2, "matmul inner dimensions differ: {:?} x {:?}", a.shape(), b.shape());
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, a.data(), ta, b.data(), tb, out.data_mut(), 0.0);
    out
}

fn conv_out(size: usize, k: usize, spec: ConvSpec) -> usize {
    (size + 2 * spec.pad - k) / spec.stride + 1
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, spec: ConvSpec, cols: &mut [f64]) {
    let (ho, wo) = (conv_out(h, kh, spec), conv_out(w, kw, spec));
    let p = ho * wo;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut cols[((ci * kh + i) * kw + j) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + i) as isize - spec.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + j) as isize - spec.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, spec: ConvSpec, x: &mut [f64]) {
    let (ho, wo) = (conv_out(h, kh, spec), conv_out(w, kw, spec));
    let p = ho * wo;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = &cols[((ci * kh + i) * kw + j) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + i) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + j) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, spec: ConvSpec) -> bool {
    kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Tensor {
    assert_eq!(x.dims(), 4, "conv2d input must be [N, C, H, W], got {:?}", x.shape());
    assert_eq!(w.dims(), 4, "conv2d kernel must be [O, C, kh, kw], got {:?}", w.shape());
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, c2, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(c, c2, "conv2d channel mismatch: input {:?}, kernel {:?}", x.shape(), w.shape());
    let (ho, wo) = (conv_out(h, kh, spec), conv_out(wd, kw, spec));
    let (k, p) = (c * kh * kw, ho * wo);
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    let pointwise = is_pointwise(kh, kw, spec);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    for b in 0..n {
        let xb = &x.data()[b * c * h * wd..][..c * h * wd];
        let src = if pointwise {
            xb
        } else {
            im2col(xb, c, h, wd, kh, kw, spec, &mut cols);
            &cols[..]
        };
        gemm(o, k, p, w.data(), false, src, false, &mut out.data_mut()[b * o * p..][..o * p], 0.0);
    }
    out
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    spec: ConvSpec,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let (k, p) = (c * kh * kw, ho * wo);
    let pointwise = is_pointwise(kh, kw, spec);
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut cols = vec![0.0; if pointwise { 0 } else { k * p }];
    let mut dcols = vec![0.0; if need_x && !pointwise { k * p } else { 0 }];
    for b in 0..n {
        let gb = &g.data()[b * o * p..][..o * p];
        let xb = &x.data()[b * c * h * wd..][..c * h * wd];
        if let Some(gw) = gw.as_mut() {
            let src = if pointwise {
                xb
            } else {
                im2col(xb, c, h, wd, kh, kw, spec, &mut cols);
                &cols[..]
            };
            gemm(o, p, k, gb, false, src, true, gw.data_mut(), 1.0);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx.data_mut()[b * c * h * wd..][..c * h * wd];
            if pointwise {
                gemm(k, o, p, w.data(), true, gb, false, dst, 0.0);
            } else {
                gemm(k, o, p, w.data(), true, gb, false, &mut dcols, 0.0);
                col2im(&dcols, c, h, wd, kh, kw, spec, dst);
            }
        }
    }
    (gx, gw)
}

fn upsample2x_values(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let od = out.data_mut();
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..][..h * w];
        let dst = &mut od[plane * 4 * h * w..][..4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

fn downsample2x_sum(g: &Tensor) -> Tensor {
    let (n, c, h2, w2) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let od = out.data_mut();
    for plane in 0..n * c {
        let src = &g.data()[plane * h2 * w2..][..h2 * w2];
        let dst = &mut od[plane * h * w..][..h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    out
}
