//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep that
//! visits every node once.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    Linear { input: Var, weight: Var, bias: Var },
    Act(Var, Activation),
    Softmax(Var),
    BilinearSample { map: Var, points: Var },
    AvgPool2(Var),
    Upsample(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleBy { x: Var, s: Var },
    Matmul { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, start: usize, len: usize },
    Sum(Var),
    Mean(Var),
    Abs(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Act(_, Activation::Relu) => "relu",
            Op::Act(_, Activation::Sigmoid) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::BilinearSample { .. } => "bilinear_sample",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Upsample(_) => "upsample",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::ScaleBy { .. } => "scale_by",
            Op::Matmul { .. } => "matmul",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Abs(_) => "abs",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
            Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
            Op::BilinearSample { map, points } => vec![*map, *points],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScaleBy { x, s } => vec![*x, *s],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Act(a, _)
            | Op::Softmax(a)
            | Op::AvgPool2(a)
            | Op::Upsample(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Abs(a) => vec![*a],
            Op::Permute { input, .. } | Op::Narrow { input, .. } => vec![*input],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-forward-pass tape. Build a new one for every forward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
    non_finite: Option<(usize, &'static str)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), grad_enabled: true, non_finite: None }
    }

    /// Graph that records values only; parameters are bound without gradients.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let requires_grad =
            self.grad_enabled && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let id = self.nodes.len();
        if cfg!(debug_assertions) && self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node { value: value.with_requires_grad(requires_grad), op, requires_grad });
        Var(id)
    }

    /// Adds a leaf; it is differentiable when the tensor's `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = self.grad_enabled && tensor.requires_grad();
        let id = self.nodes.len();
        if cfg!(debug_assertions) && self.non_finite.is_none() && !tensor.is_finite() {
            self.non_finite = Some((id, "leaf"));
        }
        self.nodes.push(Node { value: tensor.with_requires_grad(rg), op: Op::Leaf, requires_grad: rg });
        Var(id)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone().with_requires_grad(true));
        self.bound.insert(id, v);
        v
    }

    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// First node (index, op) whose value was non-finite, in debug builds.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((node, op)) => Err(TensorError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    // ---------------------------------------------------------------- ops

    /// Cross-correlation with zero padding. Input (Cin,H,W), weight (Cout,Cin,k,k).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(shape_err("conv2d", format!("input {xs:?} weight {ws:?}")));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin || k != k2 || k % 2 == 0 || stride == 0 || bs != [cout] {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?} weight {ws:?} bias {bs:?} stride {stride} (odd square kernel, Cin match)"),
            ));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err("conv2d", format!("input {h}x{w} with pad {pad} smaller than kernel {k}")));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_parts(vec![cout, geom.oh, geom.ow], out);
        Ok(self.push(Op::Conv2d { input, weight, bias, geom }, value))
    }

    /// Affine map over the trailing dimension: `x · Wᵀ + b`, W is (Dout, Din).
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        let din = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[1] != din || bs != [ws[0]] {
            return Err(shape_err("linear", format!("input {xs:?} weight {ws:?} bias {bs:?}")));
        }
        let dout = ws[0];
        let rows = self.value(input).numel() / din;
        let mut out = Vec::with_capacity(rows * dout);
        let b = self.value(bias).data();
        for _ in 0..rows {
            out.extend_from_slice(b);
        }
        T::gemm(
            rows,
            din,
            dout,
            T::one(),
            self.value(input).data(),
            (din, 1),
            self.value(weight).data(),
            (1, din),
            T::one(),
            &mut out,
            (dout, 1),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(Op::Linear { input, weight, bias }, Tensor::from_parts(shape, out)))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x);
        let data = match kind {
            Activation::Relu => t.data().iter().map(|&v| v.max(T::zero())).collect(),
            Activation::Sigmoid => t.data().iter().map(|&v| kernels::sigmoid(v)).collect(),
        };
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(Op::Act(x, kind), value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = *t.shape().last().unwrap();
        let value = Tensor::from_parts(t.shape().to_vec(), kernels::softmax_rows(t.data(), cols));
        self.push(Op::Softmax(x), value)
    }

    /// Samples map (C,H,W) at points (N,2) given as (x, y); returns (N,C).
    /// Corners outside the grid read as zero.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        let ps = self.shape(points).to_vec();
        if ms.len() != 3 || ps.len() != 2 || ps[1] != 2 {
            return Err(shape_err("bilinear_sample", format!("map {ms:?} points {ps:?}")));
        }
        let out = kernels::bilinear_sample(self.value(map).data(), ms[0], ms[1], ms[2], self.value(points).data());
        let value = Tensor::from_parts(vec![ps[0], ms[0]], out);
        Ok(self.push(Op::BilinearSample { map, points }, value))
    }

    pub fn avg_pool2(&mut self, map: Var) -> Result<Var> {
        let s = self.shape(map).to_vec();
        if s.len() != 3 {
            return Err(shape_err("avg_pool2", format!("expected (C,H,W), got {s:?}")));
        }
        let out = kernels::avg_pool2(self.value(map).data(), s[0], s[1], s[2]);
        let shape = vec![s[0], kernels::pooled_extent(s[1]), kernels::pooled_extent(s[2])];
        Ok(self.push(Op::AvgPool2(map), Tensor::from_parts(shape, out)))
    }

    /// 2× nearest-neighbour upsampling of (C,H,W), cropped to (C,th,tw).
    pub fn upsample_nearest2(&mut self, map: Var, th: usize, tw: usize) -> Result<Var> {
        let s = self.shape(map).to_vec();
        if s.len() != 3 || th > 2 * s[1] || tw > 2 * s[2] || th == 0 || tw == 0 {
            return Err(shape_err("upsample", format!("{s:?} -> ({th},{tw})")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(map).data();
        let mut out = Vec::with_capacity(c * th * tw);
        for ch in 0..c {
            for y in 0..th {
                let row = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                out.extend((0..tw).map(|x| row[x / 2]));
            }
        }
        Ok(self.push(Op::Upsample(map), Tensor::from_parts(vec![c, th, tw], out)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    fn map(&mut self, op: Op<T>, x: Var, f: impl Fn(T) -> T) -> Var {
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.push(op, value)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(Op::Scale(x, c), x, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.map(Op::AddScalar(x), x, |v| v + c)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(Op::Abs(x), x, |v| v.abs())
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("scale_by", format!("scale must be a scalar, got {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        Ok(self.map(Op::ScaleBy { x, s }, x, |v| v * c))
    }

    /// (…,M,K)·(…,K,N) or, with `trans_b`, (…,M,K)·(…,N,K)ᵀ. Rank 2 or 3.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = mm_dims(&as_, &bs, trans_b).ok_or_else(|| {
            shape_err("matmul", format!("{as_:?} x {bs:?} (trans_b={trans_b})"))
        })?;
        let MmDims { batch, m, k, n } = dims;
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &da[i * m * k..(i + 1) * m * k],
                (k, 1),
                &db[i * k * n..(i + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        let mut shape = as_.clone();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Op::Matmul { a, b, trans_b }, Tensor::from_parts(shape, out)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", t.shape())));
        }
        let value = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        Ok(self.push(Op::Reshape(x), value))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{s:?} by {perm:?}")));
        }
        let data = kernels::permute(self.value(x).data(), &s, perm);
        let shape = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(Op::Permute { input: x, perm: perm.to_vec() }, Tensor::from_parts(shape, data)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Op::Concat { inputs: inputs.to_vec(), axis }, Tensor::from_parts(shape, out)))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(shape_err("narrow", format!("{start}..{} of {s:?}", start + len)));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        Ok(self.push(Op::Narrow { input: x, start, len }, Tensor::from_parts(shape, data)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(v))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        self.push(Op::Mean(x), Tensor::scalar(v))
    }

    /// Layer normalization over the last dimension with affine (D,) gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", format!("x {s:?} gamma {:?}", self.shape(gamma))));
        }
        let eps = T::of(eps);
        let (tx, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.chunks(d) {
            let (mean, rstd) = kernels::row_stats(row, eps);
            out.extend(row.iter().enumerate().map(|(i, &v)| (v - mean) * rstd * g[i] + b[i]));
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, Tensor::from_parts(s, out)))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let need = [self.rg(*input), self.rg(*weight), self.rg(*bias)];
                let [gx, gw, gb] = kernels::conv2d_backward(geom, val(*input), val(*weight), g, need);
                for (v, gv) in [(*input, gx), (*weight, gw), (*bias, gb)] {
                    if let Some(gv) = gv {
                        self.accumulate(grads, v, gv);
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let ws = self.shape(*weight);
                let (dout, din) = (ws[0], ws[1]);
                let rows = g.len() / dout;
                if self.rg(*input) {
                    let mut gx = vec![T::zero(); rows * din];
                    T::gemm(rows, dout, din, T::one(), g, (dout, 1), val(*weight), (din, 1), T::zero(), &mut gx, (din, 1));
                    self.accumulate(grads, *input, gx);
                }
                if self.rg(*weight) {
                    let mut gw = vec![T::zero(); dout * din];
                    T::gemm(dout, rows, din, T::one(), g, (1, dout), val(*input), (din, 1), T::zero(), &mut gw, (din, 1));
                    self.accumulate(grads, *weight, gw);
                }
                if self.rg(*bias) {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Act(x, kind) => {
                let y = node.value.data();
                let gx = match kind {
                    Activation::Relu => {
                        g.iter().zip(y).map(|(&g, &y)| if y > T::zero() { g } else { T::zero() }).collect()
                    }
                    Activation::Sigmoid => g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
                };
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let mut gx = vec![T::zero(); y.len()];
                for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::BilinearSample { map, points } => {
                let ms = self.shape(*map);
                let need = [self.rg(*map), self.rg(*points)];
                let [gm, gp] =
                    kernels::bilinear_sample_backward(val(*map), ms[0], ms[1], ms[2], val(*points), g, need);
                if let Some(gm) = gm {
                    self.accumulate(grads, *map, gm);
                }
                if let Some(gp) = gp {
                    self.accumulate(grads, *points, gp);
                }
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let gx = kernels::avg_pool2_backward(g, s[0], s[1], s[2]);
                self.accumulate(grads, *x, gx);
            }
            Op::Upsample(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (th, tw) = (node.value.shape()[1], node.value.shape()[2]);
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..th {
                        for x in 0..tw {
                            gx[(ch * h + y / 2) * w + x / 2] += g[(ch * th + y) * tw + x];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::ScaleBy { x, s } => {
                let c = self.value(*s).item();
                if self.rg(*x) {
                    self.accumulate(grads, *x, g.iter().map(|&v| v * c).collect());
                }
                if self.rg(*s) {
                    let d: T = g.iter().zip(val(*x)).map(|(&a, &b)| a * b).sum();
                    self.accumulate(grads, *s, vec![d]);
                }
            }
            Op::Matmul { a, b, trans_b } => {
                let MmDims { batch, m, k, n } = mm_dims(self.shape(*a), self.shape(*b), *trans_b).unwrap();
                let (da, db) = (val(*a), val(*b));
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    let b_strides = if *trans_b { (k, 1) } else { (1, n) };
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &db[i * k * n..(i + 1) * k * n],
                            b_strides,
                            T::zero(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            (k, 1),
                        );
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &da[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB (N,K) = dCᵀ (N,M) · A (M,K)
                            T::gemm(n, m, k, T::one(), gi, (1, n), ai, (k, 1), T::zero(), out, (k, 1));
                        } else {
                            // dB (K,N) = Aᵀ (K,M) · dC (M,N)
                            T::gemm(k, m, n, T::one(), ai, (1, k), gi, (n, 1), T::zero(), out, (n, 1));
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Permute { input, perm } => {
                let gx = kernels::permute(g, node.value.shape(), &kernels::inverse_permutation(perm));
                self.accumulate(grads, *input, gx);
            }
            Op::Concat { inputs, axis } => {
                let inner: usize = node.value.shape()[axis + 1..].iter().product();
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        self.accumulate(grads, v, gv);
                    }
                    offset += len;
                }
            }
            Op::Narrow { input, start, len } => {
                let s = self.shape(*input);
                let inner: usize = s[1..].iter().product();
                let mut gx = vec![T::zero(); s[0] * inner];
                gx[start * inner..(start + len) * inner].copy_from_slice(g);
                self.accumulate(grads, *input, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Abs(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *node.value.shape().last().unwrap();
                let xs = val(*x);
                let gam = val(*gamma);
                let dn = T::of(d as f64);
                let mut gx = vec![T::zero(); xs.len()];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for ((row, grow), out) in xs.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let (mean, rstd) = kernels::row_stats(row, *eps);
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for j in 0..d {
                        let xh = (row[j] - mean) * rstd;
                        let dxh = grow[j] * gam[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        gg[j] += grow[j] * xh;
                        gb[j] += grow[j];
                    }
                    for j in 0..d {
                        let xh = (row[j] - mean) * rstd;
                        let dxh = grow[j] * gam[j];
                        out[j] = rstd * (dxh - sum_dxh / dn - xh * sum_dxh_xh / dn);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
        }
    }
}

struct MmDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn mm_dims(a: &[usize], b: &[usize], trans_b: bool) -> Option<MmDims> {
    if a.len() != b.len() || !(2..=3).contains(&a.len()) {
        return None;
    }
    let r = a.len();
    let batch = if r == 3 {
        if a[0] != b[0] {
            return None;
        }
        a[0]
    } else {
        1
    };
    let (m, k) = (a[r - 2], a[r - 1]);
    let (bk, n) = if trans_b { (b[r - 1], b[r - 2]) } else { (b[r - 2], b[r - 1]) };
    (bk == k).then_some(MmDims { batch, m, k, n })
}

/// Gradients from one backward sweep, indexed by graph node.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, graph: &Graph<T>, v: Var) -> Option<Tensor<T>> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(graph.shape(v).to_vec(), data.clone()))
    }

    /// Gradient w.r.t. `v`, zero-filled when unreachable.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(graph, v).unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    /// One gradient per stored parameter, in store order. Parameters that were
    /// never bound or not reached by the loss get zeros.
    pub fn for_params(&self, graph: &Graph<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| match graph.bound_param(id) {
                Some(v) => self.wrt(graph, v),
                None => Tensor::zeros(store.get(id).shape()),
            })
            .collect()
    }
}
