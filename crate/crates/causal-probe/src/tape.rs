//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records a computation as a flat list of nodes, each holding its
//! value and the operation that produced it. [`Tape::backward`] walks the list
//! in reverse and accumulates gradients into the leaves. Nodes whose inputs are
//! all non-differentiable (frozen weights, raw data) are skipped during the
//! backward pass, so a frozen encoder costs nothing beyond its forward pass.
//!
//! The op set is closed and tuned for dual-attention transformers: dense and
//! batched matmul, softmax, layer normalization, GELU, axis-0 reductions, and
//! a fused weighted binary cross-entropy. All arrays are kept in standard
//! (row-major) layout so last-axis ops can run on flat slices.

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, Ix3};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    /// x (.., D) + v (D,)
    AddLastAxis(TensorId, TensorId),
    /// x (.., D) * v (D,)
    MulLastAxis(TensorId, TensorId),
    /// x * s where s has exactly one element
    MulScalarTensor(TensorId, TensorId),
    /// x^p elementwise; gradient guarded at x = 0
    PowConst(TensorId, f64),
    Gelu(TensorId),
    Sigmoid(TensorId),
    /// 2-D matrix product, optionally with b transposed
    Matmul {
        a: TensorId,
        b: TensorId,
        trans_b: bool,
    },
    /// (B, M, K) x (B, K, N), optionally with the trailing two axes of b transposed
    BatchMatmul {
        a: TensorId,
        b: TensorId,
        trans_b: bool,
    },
    Reshape(TensorId),
    Permute(TensorId, Vec<usize>),
    ConcatAxis0(Vec<TensorId>),
    SliceAxis0 {
        x: TensorId,
        start: usize,
        len: usize,
    },
    /// Input shape S -> output (copies, S...)
    BroadcastAxis0 {
        x: TensorId,
        copies: usize,
    },
    /// Softmax over the last axis
    Softmax(TensorId),
    /// (x - mean) / sqrt(var + eps) over the last axis
    Normalize(TensorId, f64),
    MeanAxis0(TensorId),
    MaxAxis0(TensorId),
    MinAxis0(TensorId),
    /// Population standard deviation over axis 0; gradient guarded at std = 0
    StdAxis0(TensorId),
    SumAll(TensorId),
    /// Elementwise product with a constant array (e.g. a diagonal mask)
    MulConstArray(TensorId, ArrayD<f64>),
    /// Mean weighted binary cross-entropy with probability clipping
    WeightedBceMean {
        pred: TensorId,
        targets: ArrayD<f64>,
        weights: ArrayD<f64>,
        eps: f64,
        denom: f64,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by `TensorId`.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for a leaf, or zeros of the given shape when the leaf was
    /// never reached by the backward sweep.
    pub fn get_or_zeros(&self, id: TensorId, shape: &[usize]) -> ArrayD<f64> {
        match self.grads[id.0] {
            Some(ref g) => g.clone(),
            None => ArrayD::zeros(shape.to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn standardize(value: ArrayD<f64>) -> ArrayD<f64> {
    if value.is_standard_layout() {
        value
    } else {
        value.as_standard_layout().into_owned()
    }
}

/// View an array as (rows, last_axis) without copying.
fn rows_view(x: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    let cols = *x.shape().last().expect("rows_view: zero-dim array");
    let rows = x.len() / cols;
    x.view()
        .into_shape_with_order((rows, cols))
        .expect("rows_view: non-contiguous array")
}

fn rows_view_mut(x: &mut ArrayD<f64>) -> ndarray::ArrayViewMut2<'_, f64> {
    let cols = *x.shape().last().expect("rows_view_mut: zero-dim array");
    let rows = x.len() / cols;
    x.view_mut()
        .into_shape_with_order((rows, cols))
        .expect("rows_view_mut: non-contiguous array")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    pub fn value(&self, id: TensorId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        assert_eq!(self.nodes[id.0].value.len(), 1, "scalar: tensor is not 1-element");
        *self.nodes[id.0].value.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a leaf. `requires_grad = false` marks frozen weights or data.
    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> TensorId {
        self.push(standardize(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_last_axis(&mut self, x: TensorId, v: TensorId) -> TensorId {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(v), &[d], "add_last_axis: bias shape mismatch");
        let mut value = self.nodes[x.0].value.clone();
        {
            let vv = &self.nodes[v.0].value;
            let vs = vv.as_slice().unwrap();
            for mut row in rows_view_mut(&mut value).rows_mut() {
                for (y, b) in row.iter_mut().zip(vs) {
                    *y += b;
                }
            }
        }
        let ng = self.needs(x) || self.needs(v);
        self.push(value, Op::AddLastAxis(x, v), ng)
    }

    pub fn mul_last_axis(&mut self, x: TensorId, v: TensorId) -> TensorId {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(v), &[d], "mul_last_axis: gain shape mismatch");
        let mut value = self.nodes[x.0].value.clone();
        {
            let vv = &self.nodes[v.0].value;
            let vs = vv.as_slice().unwrap();
            for mut row in rows_view_mut(&mut value).rows_mut() {
                for (y, m) in row.iter_mut().zip(vs) {
                    *y *= m;
                }
            }
        }
        let ng = self.needs(x) || self.needs(v);
        self.push(value, Op::MulLastAxis(x, v), ng)
    }

    pub fn mul_scalar_tensor(&mut self, x: TensorId, s: TensorId) -> TensorId {
        assert_eq!(self.nodes[s.0].value.len(), 1, "mul_scalar_tensor: s must be 1-element");
        let sv = *self.nodes[s.0].value.iter().next().unwrap();
        let value = self.nodes[x.0].value.mapv(|v| v * sv);
        let ng = self.needs(x) || self.needs(s);
        self.push(value, Op::MulScalarTensor(x, s), ng)
    }

    pub fn pow_const(&mut self, x: TensorId, p: f64) -> TensorId {
        let value = self.nodes[x.0].value.mapv(|v| v.powf(p));
        let ng = self.needs(x);
        self.push(value, Op::PowConst(x, p), ng)
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let value = self.nodes[x.0].value.mapv(gelu);
        let ng = self.needs(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let value = self.nodes[x.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.needs(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId, trans_b: bool) -> TensorId {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul: a must be 2-D");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul: b must be 2-D");
        let value = if trans_b { av.dot(&bv.t()) } else { av.dot(&bv) };
        let ng = self.needs(a) || self.needs(b);
        self.push(
            standardize(value.into_dyn()),
            Op::Matmul { a, b, trans_b },
            ng,
        )
    }

    pub fn batch_matmul(&mut self, a: TensorId, b: TensorId, trans_b: bool) -> TensorId {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("batch_matmul: a must be 3-D");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("batch_matmul: b must be 3-D");
        let (bs, m, k) = av.dim();
        let (bs2, bk, bn) = bv.dim();
        assert_eq!(bs, bs2, "batch_matmul: batch dims differ");
        let n = if trans_b {
            assert_eq!(k, bn, "batch_matmul: inner dims differ (trans_b)");
            bk
        } else {
            assert_eq!(k, bk, "batch_matmul: inner dims differ");
            bn
        };
        let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
        for i in 0..bs {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let prod = if trans_b { ai.dot(&bi.t()) } else { ai.dot(&bi) };
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out.into_dyn(), Op::BatchMatmul { a, b, trans_b }, ng)
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        let n: usize = shape.iter().product();
        assert_eq!(self.nodes[x.0].value.len(), n, "reshape: element count mismatch");
        let value = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(shape.to_vec())
            .expect("reshape failed");
        let ng = self.needs(x);
        self.push(value, Op::Reshape(x), ng)
    }

    pub fn permute(&mut self, x: TensorId, axes: &[usize]) -> TensorId {
        let value = standardize(
            self.nodes[x.0]
                .value
                .view()
                .permuted_axes(axes.to_vec())
                .to_owned(),
        );
        let ng = self.needs(x);
        self.push(value, Op::Permute(x, axes.to_vec()), ng)
    }

    pub fn concat_axis0(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_axis0: empty parts");
        let views: Vec<ArrayViewD<f64>> =
            parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_axis0 failed");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(standardize(value), Op::ConcatAxis0(parts.to_vec()), ng)
    }

    pub fn slice_axis0(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        let value = self.nodes[x.0]
            .value
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        let ng = self.needs(x);
        self.push(standardize(value), Op::SliceAxis0 { x, start, len }, ng)
    }

    pub fn broadcast_axis0(&mut self, x: TensorId, copies: usize) -> TensorId {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let mut shape = Vec::with_capacity(xs.len() + 1);
        shape.push(copies);
        shape.extend_from_slice(&xs);
        let block = self.nodes[x.0].value.as_slice().unwrap();
        let mut data = Vec::with_capacity(block.len() * copies);
        for _ in 0..copies {
            data.extend_from_slice(block);
        }
        let value = ArrayD::from_shape_vec(shape, data).unwrap();
        let ng = self.needs(x);
        self.push(value, Op::BroadcastAxis0 { x, copies }, ng)
    }

    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let mut value = self.nodes[x.0].value.clone();
        for mut row in rows_view_mut(&mut value).rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::Softmax(x), ng)
    }

    pub fn normalize(&mut self, x: TensorId, eps: f64) -> TensorId {
        let mut value = self.nodes[x.0].value.clone();
        for mut row in rows_view_mut(&mut value).rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::Normalize(x, eps), ng)
    }

    fn reduce_axis0(&self, x: TensorId, f: impl Fn(&[f64], usize, usize) -> f64) -> ArrayD<f64> {
        let xv = &self.nodes[x.0].value;
        let n0 = xv.shape()[0];
        let rest: usize = xv.shape()[1..].iter().product();
        let xs = xv.as_slice().unwrap();
        let mut out = Vec::with_capacity(rest);
        for j in 0..rest {
            out.push(f(xs, j, n0));
        }
        ArrayD::from_shape_vec(xv.shape()[1..].to_vec(), out).unwrap()
    }

    pub fn mean_axis0(&mut self, x: TensorId) -> TensorId {
        let rest: usize = self.shape(x)[1..].iter().product();
        let value = self.reduce_axis0(x, |xs, j, n0| {
            (0..n0).map(|i| xs[i * rest + j]).sum::<f64>() / n0 as f64
        });
        let ng = self.needs(x);
        self.push(value, Op::MeanAxis0(x), ng)
    }

    pub fn max_axis0(&mut self, x: TensorId) -> TensorId {
        let rest: usize = self.shape(x)[1..].iter().product();
        let value = self.reduce_axis0(x, |xs, j, n0| {
            (0..n0).map(|i| xs[i * rest + j]).fold(f64::NEG_INFINITY, f64::max)
        });
        let ng = self.needs(x);
        self.push(value, Op::MaxAxis0(x), ng)
    }

    pub fn min_axis0(&mut self, x: TensorId) -> TensorId {
        let rest: usize = self.shape(x)[1..].iter().product();
        let value = self.reduce_axis0(x, |xs, j, n0| {
            (0..n0).map(|i| xs[i * rest + j]).fold(f64::INFINITY, f64::min)
        });
        let ng = self.needs(x);
        self.push(value, Op::MinAxis0(x), ng)
    }

    pub fn std_axis0(&mut self, x: TensorId) -> TensorId {
        assert!(self.shape(x)[0] >= 2, "std_axis0: need at least 2 rows");
        let rest: usize = self.shape(x)[1..].iter().product();
        let value = self.reduce_axis0(x, |xs, j, n0| {
            let n = n0 as f64;
            let mean = (0..n0).map(|i| xs[i * rest + j]).sum::<f64>() / n;
            let var = (0..n0)
                .map(|i| {
                    let d = xs[i * rest + j] - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            var.sqrt()
        });
        let ng = self.needs(x);
        self.push(value, Op::StdAxis0(x), ng)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let value = ArrayD::from_elem(vec![1], self.nodes[x.0].value.sum());
        let ng = self.needs(x);
        self.push(value, Op::SumAll(x), ng)
    }

    pub fn mul_const_array(&mut self, x: TensorId, c: ArrayD<f64>) -> TensorId {
        assert_eq!(self.shape(x), c.shape(), "mul_const_array: shape mismatch");
        let value = &self.nodes[x.0].value * &c;
        let ng = self.needs(x);
        self.push(standardize(value), Op::MulConstArray(x, c), ng)
    }

    /// Weighted mean BCE over all entries: sum(w * bce(clip(p), t)) / denom.
    pub fn weighted_bce_mean(
        &mut self,
        pred: TensorId,
        targets: ArrayD<f64>,
        weights: ArrayD<f64>,
        eps: f64,
        denom: f64,
    ) -> TensorId {
        assert_eq!(self.shape(pred), targets.shape(), "bce: target shape mismatch");
        assert_eq!(self.shape(pred), weights.shape(), "bce: weight shape mismatch");
        let p = &self.nodes[pred.0].value;
        let mut total = 0.0;
        for ((pv, tv), wv) in p.iter().zip(targets.iter()).zip(weights.iter()) {
            let pc = pv.clamp(eps, 1.0 - eps);
            total -= wv * (tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln());
        }
        let value = ArrayD::from_elem(vec![1], total / denom);
        let ng = self.needs(pred);
        self.push(
            value,
            Op::WeightedBceMean {
                pred,
                targets,
                weights,
                eps,
                denom,
            },
            ng,
        )
    }

    /// Run the backward sweep from a 1-element `loss` node.
    pub fn backward(&self, loss: TensorId) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward: loss must be a 1-element tensor"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], id: TensorId, delta: ArrayD<f64>) {
        if !self.needs(id) {
            return;
        }
        debug_assert_eq!(delta.shape(), self.shape(id));
        match grads[id.0] {
            Some(ref mut g) => *g += &delta,
            None => grads[id.0] = Some(standardize(delta)),
        }
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g * &self.nodes[b.0].value);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g * &self.nodes[a.0].value);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.mapv(|v| v * c));
            }
            Op::AddLastAxis(x, v) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*v) {
                    let d = self.nodes[v.0].value.len();
                    let mut dv = vec![0.0; d];
                    for row in rows_view(g).rows() {
                        for (acc, gv) in dv.iter_mut().zip(row.iter()) {
                            *acc += gv;
                        }
                    }
                    self.accumulate(grads, *v, ArrayD::from_shape_vec(vec![d], dv).unwrap());
                }
            }
            Op::MulLastAxis(x, v) => {
                if self.needs(*x) {
                    let mut dx = g.clone();
                    let vs = self.nodes[v.0].value.as_slice().unwrap().to_vec();
                    for mut row in rows_view_mut(&mut dx).rows_mut() {
                        for (y, m) in row.iter_mut().zip(&vs) {
                            *y *= m;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*v) {
                    let d = self.nodes[v.0].value.len();
                    let mut dv = vec![0.0; d];
                    let xr = rows_view(&self.nodes[x.0].value);
                    for (grow, xrow) in rows_view(g).rows().into_iter().zip(xr.rows()) {
                        for ((acc, gv), xv) in dv.iter_mut().zip(grow.iter()).zip(xrow.iter()) {
                            *acc += gv * xv;
                        }
                    }
                    self.accumulate(grads, *v, ArrayD::from_shape_vec(vec![d], dv).unwrap());
                }
            }
            Op::MulScalarTensor(x, s) => {
                let sv = *self.nodes[s.0].value.iter().next().unwrap();
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.mapv(|v| v * sv));
                }
                if self.needs(*s) {
                    let dot = g
                        .iter()
                        .zip(self.nodes[x.0].value.iter())
                        .map(|(gv, xv)| gv * xv)
                        .sum::<f64>();
                    self.accumulate(grads, *s, ArrayD::from_elem(vec![1], dot));
                }
            }
            Op::PowConst(x, p) => {
                let dx = ndarray::Zip::from(g)
                    .and(&self.nodes[x.0].value)
                    .map_collect(|gv, xv| {
                        if xv.abs() < 1e-300 {
                            0.0
                        } else {
                            gv * p * xv.powf(p - 1.0)
                        }
                    });
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = ndarray::Zip::from(g)
                    .and(&self.nodes[x.0].value)
                    .map_collect(|gv, xv| gv * gelu_grad(*xv));
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = ndarray::Zip::from(g)
                    .and(&node.value)
                    .map_collect(|gv, sv| gv * sv * (1.0 - sv));
                self.accumulate(grads, *x, dx);
            }
            Op::Matmul { a, b, trans_b } => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(*a) {
                    let da = if *trans_b { gv.dot(&bv) } else { gv.dot(&bv.t()) };
                    self.accumulate(grads, *a, standardize(da.into_dyn()));
                }
                if self.needs(*b) {
                    let db = if *trans_b {
                        gv.t().dot(&av)
                    } else {
                        av.t().dot(&gv)
                    };
                    self.accumulate(grads, *b, standardize(db.into_dyn()));
                }
            }
            Op::BatchMatmul { a, b, trans_b } => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let bs = av.dim().0;
                if self.needs(*a) {
                    let mut da = ndarray::Array3::<f64>::zeros(av.dim());
                    for k in 0..bs {
                        let gk = gv.index_axis(Axis(0), k);
                        let bk = bv.index_axis(Axis(0), k);
                        let d = if *trans_b { gk.dot(&bk) } else { gk.dot(&bk.t()) };
                        da.index_axis_mut(Axis(0), k).assign(&d);
                    }
                    self.accumulate(grads, *a, da.into_dyn());
                }
                if self.needs(*b) {
                    let mut db = ndarray::Array3::<f64>::zeros(bv.dim());
                    for k in 0..bs {
                        let gk = gv.index_axis(Axis(0), k);
                        let ak = av.index_axis(Axis(0), k);
                        let d = if *trans_b {
                            gk.t().dot(&ak)
                        } else {
                            ak.t().dot(&gk)
                        };
                        db.index_axis_mut(Axis(0), k).assign(&d);
                    }
                    self.accumulate(grads, *b, db.into_dyn());
                }
            }
            Op::Reshape(x) => {
                let dx = g
                    .clone()
                    .into_shape_with_order(self.shape(*x).to_vec())
                    .unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0usize; axes.len()];
                for (to, &from) in axes.iter().enumerate() {
                    inverse[from] = to;
                }
                let dx = standardize(g.view().permuted_axes(inverse).to_owned());
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatAxis0(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = self.shape(*p)[0];
                    let dp = g
                        .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    self.accumulate(grads, *p, standardize(dp));
                    start += len;
                }
            }
            Op::SliceAxis0 { x, start, len } => {
                let mut dx = ArrayD::zeros(self.shape(*x).to_vec());
                dx.slice_axis_mut(Axis(0), ndarray::Slice::from(*start..*start + *len))
                    .assign(g);
                self.accumulate(grads, *x, dx);
            }
            Op::BroadcastAxis0 { x, copies } => {
                let block = self.nodes[x.0].value.len();
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; block];
                for c in 0..*copies {
                    for (acc, gv) in dx.iter_mut().zip(&gs[c * block..(c + 1) * block]) {
                        *acc += gv;
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    ArrayD::from_shape_vec(self.shape(*x).to_vec(), dx).unwrap(),
                );
            }
            Op::Softmax(x) => {
                let mut dx = g.clone();
                let sr = rows_view(&node.value);
                for (mut grow, srow) in rows_view_mut(&mut dx).rows_mut().into_iter().zip(sr.rows())
                {
                    let dot: f64 = grow.iter().zip(srow.iter()).map(|(a, b)| a * b).sum();
                    for (gv, sv) in grow.iter_mut().zip(srow.iter()) {
                        *gv = (*gv - dot) * sv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Normalize(x, eps) => {
                let mut dx = g.clone();
                let xr = rows_view(&self.nodes[x.0].value);
                let yr = rows_view(&node.value);
                for ((mut grow, xrow), yrow) in rows_view_mut(&mut dx)
                    .rows_mut()
                    .into_iter()
                    .zip(xr.rows())
                    .zip(yr.rows())
                {
                    let n = xrow.len() as f64;
                    let mean = xrow.sum() / n;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean: f64 = grow.sum() / n;
                    let gydot: f64 =
                        grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (gv, yv) in grow.iter_mut().zip(yrow.iter()) {
                        *gv = (*gv - gmean - yv * gydot) * inv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanAxis0(x) => {
                let n0 = self.shape(*x)[0];
                let scaled = g.mapv(|v| v / n0 as f64);
                let mut data = Vec::with_capacity(n0 * scaled.len());
                for _ in 0..n0 {
                    data.extend_from_slice(scaled.as_slice().unwrap());
                }
                self.accumulate(
                    grads,
                    *x,
                    ArrayD::from_shape_vec(self.shape(*x).to_vec(), data).unwrap(),
                );
            }
            Op::MaxAxis0(x) | Op::MinAxis0(x) => {
                // Route the gradient to the first extremal element along axis 0.
                let xv = &self.nodes[x.0].value;
                let n0 = xv.shape()[0];
                let rest: usize = xv.shape()[1..].iter().product();
                let xs = xv.as_slice().unwrap();
                let os = node.value.as_slice().unwrap();
                let gsl = g.as_slice().unwrap();
                let mut dx = vec![0.0; xs.len()];
                for j in 0..rest {
                    for i in 0..n0 {
                        if xs[i * rest + j] == os[j] {
                            dx[i * rest + j] = gsl[j];
                            break;
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    ArrayD::from_shape_vec(self.shape(*x).to_vec(), dx).unwrap(),
                );
            }
            Op::StdAxis0(x) => {
                let xv = &self.nodes[x.0].value;
                let n0 = xv.shape()[0];
                let rest: usize = xv.shape()[1..].iter().product();
                let xs = xv.as_slice().unwrap();
                let std = node.value.as_slice().unwrap();
                let gsl = g.as_slice().unwrap();
                let mut dx = vec![0.0; xs.len()];
                let n = n0 as f64;
                for j in 0..rest {
                    if std[j] <= 0.0 {
                        continue;
                    }
                    let mean = (0..n0).map(|i| xs[i * rest + j]).sum::<f64>() / n;
                    for i in 0..n0 {
                        dx[i * rest + j] = gsl[j] * (xs[i * rest + j] - mean) / (n * std[j]);
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    ArrayD::from_shape_vec(self.shape(*x).to_vec(), dx).unwrap(),
                );
            }
            Op::SumAll(x) => {
                let gv = *g.iter().next().unwrap();
                self.accumulate(grads, *x, ArrayD::from_elem(self.shape(*x).to_vec(), gv));
            }
            Op::MulConstArray(x, c) => {
                self.accumulate(grads, *x, g * c);
            }
            Op::WeightedBceMean {
                pred,
                targets,
                weights,
                eps,
                denom,
            } => {
                let gv = *g.iter().next().unwrap();
                let p = &self.nodes[pred.0].value;
                let dp = ndarray::Zip::from(p)
                    .and(targets)
                    .and(weights)
                    .map_collect(|pv, tv, wv| {
                        if *pv <= *eps || *pv >= 1.0 - *eps {
                            0.0
                        } else {
                            gv * wv * (-tv / pv + (1.0 - tv) / (1.0 - pv)) / denom
                        }
                    });
                self.accumulate(grads, *pred, dp);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randn(rng: &mut StdRng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(shape.to_vec(), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// Central finite-difference check of d(sum of outputs)/d(leaf).
    fn check_grad(
        build: impl Fn(&mut Tape, TensorId) -> TensorId,
        leaf_value: &ArrayD<f64>,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let leaf = tape.leaf(leaf_value.clone(), true);
        let out = build(&mut tape, leaf);
        let loss = tape.sum_all(out);
        let grads = tape.backward(loss);
        let analytic = grads.get(leaf).expect("no gradient for leaf").clone();

        let eval = |v: &ArrayD<f64>| -> f64 {
            let mut t = Tape::new();
            let l = t.leaf(v.clone(), false);
            let o = build(&mut t, l);
            let s = t.sum_all(o);
            t.scalar(s)
        };

        let h = 1e-6;
        for idx in 0..leaf_value.len() {
            let mut plus = leaf_value.clone();
            let mut minus = leaf_value.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < tol,
                "grad mismatch at {idx}: fd={fd}, analytic={an}"
            );
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        let mut rng = StdRng::seed_from_u64(0);
        let x = randn(&mut rng, &[3, 4]);
        check_grad(
            |t, l| {
                let a = t.gelu(l);
                let b = t.sigmoid(a);
                let c = t.mul(b, l);
                t.scale(c, 1.7)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_and_bias() {
        let mut rng = StdRng::seed_from_u64(1);
        let x = randn(&mut rng, &[4, 3]);
        let w = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[5]);
        check_grad(
            move |t, l| {
                let wid = t.constant(w.clone());
                let bid = t.constant(b.clone());
                let y = t.matmul(l, wid, false);
                t.add_last_axis(y, bid)
            },
            &x,
            1e-6,
        );
        // gradient w.r.t. the weight side, including trans_b
        let x2 = randn(&mut rng, &[4, 3]);
        let w2 = randn(&mut rng, &[5, 3]);
        check_grad(
            move |t, l| {
                let xid = t.constant(x2.clone());
                t.matmul(xid, l, true)
            },
            &w2,
            1e-6,
        );
    }

    #[test]
    fn grad_batch_matmul() {
        let mut rng = StdRng::seed_from_u64(2);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[2, 4, 5]);
        let b2 = b.clone();
        check_grad(
            move |t, l| {
                let bid = t.constant(b.clone());
                t.batch_matmul(l, bid, false)
            },
            &a,
            1e-6,
        );
        let a2 = a.clone();
        check_grad(
            move |t, l| {
                let aid = t.constant(a2.clone());
                t.batch_matmul(aid, l, false)
            },
            &b2,
            1e-6,
        );
        // trans_b path
        let q = randn(&mut rng, &[2, 3, 4]);
        let k = randn(&mut rng, &[2, 6, 4]);
        check_grad(
            move |t, l| {
                let kid = t.constant(k.clone());
                t.batch_matmul(l, kid, true)
            },
            &q,
            1e-6,
        );
    }

    #[test]
    fn grad_softmax_normalize() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = randn(&mut rng, &[2, 3, 5]);
        // Weight the outputs so the row-sum invariants of softmax and
        // normalize do not cancel the gradient to zero.
        let w = randn(&mut rng, &[2, 3, 5]);
        let w2 = w.clone();
        check_grad(
            move |t, l| {
                let s = t.softmax(l);
                t.mul_const_array(s, w.clone())
            },
            &x,
            1e-5,
        );
        check_grad(
            move |t, l| {
                let s = t.normalize(l, 1e-5);
                t.mul_const_array(s, w2.clone())
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn grad_reductions() {
        let mut rng = StdRng::seed_from_u64(4);
        let x = randn(&mut rng, &[5, 3, 2]);
        check_grad(|t, l| t.mean_axis0(l), &x, 1e-6);
        check_grad(|t, l| t.max_axis0(l), &x, 1e-6);
        check_grad(|t, l| t.min_axis0(l), &x, 1e-6);
        check_grad(|t, l| t.std_axis0(l), &x, 1e-5);
    }

    #[test]
    fn grad_shape_ops() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 3, 4]);
        check_grad(|t, l| t.reshape(l, &[6, 4]), &x, 1e-6);
        check_grad(|t, l| t.permute(l, &[2, 0, 1]), &x, 1e-6);
        check_grad(|t, l| t.slice_axis0(l, 1, 1), &x, 1e-6);
        check_grad(|t, l| t.broadcast_axis0(l, 3), &x, 1e-6);
        let y = randn(&mut rng, &[2, 3, 4]);
        check_grad(
            move |t, l| {
                let yid = t.constant(y.clone());
                t.concat_axis0(&[l, yid])
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn grad_bce() {
        let mut rng = StdRng::seed_from_u64(6);
        let logits = randn(&mut rng, &[4, 4]);
        let targets = ArrayD::from_shape_fn(vec![4, 4], |_| if rng.gen::<bool>() { 1.0 } else { 0.0 });
        let weights = ArrayD::from_shape_fn(vec![4, 4], |_| 1.0 + rng.gen::<f64>());
        check_grad(
            move |t, l| {
                let p = t.sigmoid(l);
                t.weighted_bce_mean(p, targets.clone(), weights.clone(), 1e-7, 12.0)
            },
            &logits,
            1e-6,
        );
    }

    #[test]
    fn grad_scalar_ops() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = randn(&mut rng, &[4]).mapv(|v| v.abs() + 0.5);
        check_grad(
            |t, l| {
                let sq = t.mul(l, l);
                let s = t.sum_all(sq);
                let inv = t.pow_const(s, -0.5);
                t.mul_scalar_tensor(l, inv)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn no_grad_for_frozen_subgraph() {
        let mut tape = Tape::new();
        let frozen = tape.leaf(ArrayD::from_elem(vec![2, 2], 1.5), false);
        let live = tape.leaf(ArrayD::from_elem(vec![2, 2], 0.5), true);
        let prod = tape.matmul(frozen, frozen, false);
        let sum = tape.add(prod, live);
        let loss = tape.sum_all(sum);
        let grads = tape.backward(loss);
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(live).is_some());
    }

    #[test]
    fn deterministic_forward() {
        let mut rng = StdRng::seed_from_u64(8);
        let x = randn(&mut rng, &[3, 3]);
        let run = |x: &ArrayD<f64>| {
            let mut t = Tape::new();
            let l = t.leaf(x.clone(), false);
            let s = t.softmax(l);
            let n = t.normalize(s, 1e-5);
            let out = t.sum_all(n);
            t.scalar(out)
        };
        assert_eq!(run(&x).to_bits(), run(&x).to_bits());
    }
}
