//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation appends a node holding its output value and the ids of its
//! inputs. Node ids are therefore already in topological order, and
//! [`Tape::backward`] walks them once in reverse.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, stride: usize, ph: usize, pw: usize },
    AddChannelBias { x: Var, b: Var },
    AddPerSampleChannel { x: Var, e: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Silu { a: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, means: Vec<f64>, rstds: Vec<f64> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64> },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Upsample2x { a: Var },
    Gather0 { a: Var, idx: Vec<usize> },
    Mse { a: Var, b: Var },
    MeanAbs { a: Var, b: Var },
    Sum { a: Var },
    Mean { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-owner recording of differentiable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not take part.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub(crate) fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: &[usize],
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(name, &data)?;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, inputs))
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_hw(x, k, stride, padding, padding)
    }

    /// 2-D convolution with separate vertical and horizontal zero padding.
    pub fn conv2d_hw(&mut self, x: Var, k: Var, stride: usize, ph: usize, pw: usize) -> Result<Var> {
        let g = self.conv_geom(x, k, stride, ph, pw)?;
        let y = kernels::conv2d_forward(&g, self.value(x).data(), self.value(k).data());
        self.push_checked("conv2d", &[g.n, g.o, g.ho, g.wo], y, Op::Conv2d { x, k, stride, ph, pw }, &[x, k])
    }

    fn conv_geom(&self, x: Var, k: Var, stride: usize, ph: usize, pw: usize) -> Result<ConvGeom> {
        let xs = self.shape(x);
        let ks = self.shape(k);
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernel {ks:?}")));
        }
        if xs[1] != ks[1] {
            return Err(Error::shape("conv2d", format!("input has {} channels, kernel expects {}", xs[1], ks[1])));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ks[2], ks[3]);
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded {h}x{w}")));
        }
        Ok(ConvGeom {
            n: xs[0],
            c: xs[1],
            h,
            w,
            o: ks[0],
            kh,
            kw,
            stride,
            ph,
            pw,
            ho: (h + 2 * ph - kh) / stride + 1,
            wo: (w + 2 * pw - kw) / stride + 1,
        })
    }

    /// `x[n, c, ...] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = xs.get(1).copied().unwrap_or(0);
        if self.value(b).numel() != c {
            return Err(Error::shape("add_channel_bias", format!("{xs:?} + {:?}", self.shape(b))));
        }
        let inner: usize = xs[2..].iter().product();
        let bv = self.value(b).data();
        let mut y = self.value(x).data().to_vec();
        for (i, v) in y.iter_mut().enumerate() {
            *v += bv[(i / inner) % c];
        }
        self.push_checked("add_channel_bias", &xs, y, Op::AddChannelBias { x, b }, &[x, b])
    }

    /// `x[n, c, ...] + e[n, c]`.
    pub fn add_per_sample_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e);
        if xs.len() < 2 || es != [xs[0], xs[1]] {
            return Err(Error::shape("add_per_sample_channel", format!("{xs:?} + {es:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let ev = self.value(e).data();
        let mut y = self.value(x).data().to_vec();
        for (i, v) in y.iter_mut().enumerate() {
            *v += ev[i / inner];
        }
        self.push_checked("add_per_sample_channel", &xs, y, Op::AddPerSampleChannel { x, e }, &[x, e])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(self.shape(a).to_vec())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let y = self.zip_with(a, b, |x, y| x + y);
        self.push_checked("add", &shape, y, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let y = self.zip_with(a, b, |x, y| x - y);
        self.push_checked("sub", &shape, y, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let y = self.zip_with(a, b, |x, y| x * y);
        self.push_checked("mul", &shape, y, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let y = self.value(a).data().iter().map(|v| v * s).collect();
        self.push_checked("scale", &shape, y, Op::Scale { a, s }, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let y = self.value(a).data().iter().map(|&v| kernels::silu(v)).collect();
        self.push_checked("silu", &shape, y, Op::Silu { a }, &[a])
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || !xs[1].is_multiple_of(groups) {
            return Err(Error::shape("group_norm", format!("{xs:?} with {groups} groups")));
        }
        let (n, c) = (xs[0], xs[1]);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("group_norm", "affine parameters must have C entries"));
        }
        let s: usize = xs[2..].iter().product();
        let (y, means, rstds) = kernels::group_norm_forward(
            n,
            c,
            s,
            groups,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        self.push_checked(
            "group_norm",
            &xs,
            y,
            Op::GroupNorm { x, gamma, beta, groups, means, rstds },
            &[x, gamma, beta],
        )
    }

    /// `x[..., K] · w[K, M] (+ b[M])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::shape("linear", format!("{xs:?} x {ws:?}")));
        }
        let m_out = ws[1];
        if let Some(b) = b {
            if self.value(b).numel() != m_out {
                return Err(Error::shape("linear", "bias length"));
            }
        }
        let rows = self.value(x).numel() / k;
        let mut y = vec![0.0; rows * m_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(m_out) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm(
            rows,
            k,
            m_out,
            self.value(x).data(),
            k as isize,
            1,
            self.value(w).data(),
            m_out as isize,
            1,
            &mut y,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = m_out;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push_checked("linear", &shape, y, Op::Linear { x, w, b }, &inputs)
    }

    /// `softmax(q·kᵀ/√D)·v` per batch entry.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
            return Err(Error::shape("attention", "operands must be rank 3"));
        }
        if ks[1] == 0 {
            return Err(Error::InvalidArgument("attention over empty key sequence".into()));
        }
        if qs[0] != ks[0] || qs[0] != vs[0] || qs[2] != ks[2] || ks[1] != vs[1] {
            return Err(Error::shape("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
        }
        let (n, lq, d, lk, dv) = (qs[0], qs[1], qs[2], ks[1], vs[2]);
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; n * lq * lk];
        let mut out = vec![0.0; n * lq * dv];
        for b in 0..n {
            let p = &mut probs[b * lq * lk..(b + 1) * lq * lk];
            kernels::gemm(lq, d, lk, &qd[b * lq * d..], d as isize, 1, &kd[b * lk * d..], 1, d as isize, p, 0.0);
            p.iter_mut().for_each(|s| *s *= scale);
            kernels::softmax_rows(p, lk);
            kernels::gemm(
                lq,
                lk,
                dv,
                p,
                lk as isize,
                1,
                &vd[b * lk * dv..],
                dv as isize,
                1,
                &mut out[b * lq * dv..(b + 1) * lq * dv],
                0.0,
            );
        }
        self.push_checked("attention", &[n, lq, dv], out, Op::Attention { q, k, v, probs }, &[q, k, v])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", format!("{perm:?} on {shape:?}")));
        }
        let (y, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        self.push_checked("permute", &out_shape, y, Op::Permute { a, perm: perm.to_vec() }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let y = self.value(a).data().to_vec();
        self.push_checked("reshape", shape, y, Op::Reshape { a }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first =
            self.shape(*parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let a = self.shape(p)[axis];
                y.extend_from_slice(&self.value(p).data()[o * a * inner..(o + 1) * a * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push_checked("concat", &shape, y, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Nearest-neighbour ×2 upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", format!("{s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let x = self.value(a).data();
        let mut y = vec![0.0; nc * 4 * h * w];
        for p in 0..nc {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    y[p * 4 * h * w + i * 2 * w + j] = x[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        self.push_checked("upsample2x", &[s[0], s[1], 2 * h, 2 * w], y, Op::Upsample2x { a }, &[a])
    }

    /// Gathers entries along the leading axis; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape("gather_rows", format!("indices {idx:?} into {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let x = self.value(a).data();
        let mut y = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            y.extend_from_slice(&x[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        self.push_checked("gather_rows", &shape, y, Op::Gather0 { a, idx: idx.to_vec() }, &[a])
    }

    /// Mean of squared differences, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self.zip_with(a, b, |x, y| (x - y) * (x - y)).iter().sum();
        self.push_checked("mse", &[1], vec![s / n], Op::Mse { a, b }, &[a, b])
    }

    /// Mean of absolute differences, as a scalar.
    pub fn mean_abs(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mean_abs", a, b)?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self.zip_with(a, b, |x, y| (x - y).abs()).iter().sum();
        self.push_checked("mean_abs", &[1], vec![s / n], Op::MeanAbs { a, b }, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push_checked("sum", &[1], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push_checked("mean", &[1], vec![s], Op::Mean { a }, &[a])
    }

    /// Backpropagates from a scalar loss. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(dy);
                continue;
            }
            for (input, delta) in self.node_backward(id, &dy)? {
                if self.nodes[input.0].needs_grad {
                    accumulate(&mut grads[input.0], delta);
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn node_backward(&self, id: usize, dy: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[id];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, stride, ph, pw } => {
                let g = self.conv_geom(*x, *k, *stride, *ph, *pw)?;
                let (dx, dk) = kernels::conv2d_backward(
                    &g,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    dy,
                    self.wants(*x),
                    self.wants(*k),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dk.map(|d| (*k, d)));
            }
            Op::AddChannelBias { x, b } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                if self.wants(*b) {
                    let mut db = vec![0.0; c];
                    for (i, g) in dy.iter().enumerate() {
                        db[(i / inner) % c] += g;
                    }
                    out.push((*b, db));
                }
                out.push((*x, dy.to_vec()));
            }
            Op::AddPerSampleChannel { x, e } => {
                let xs = self.shape(*x);
                let inner: usize = xs[2..].iter().product();
                if self.wants(*e) {
                    let mut de = vec![0.0; xs[0] * xs[1]];
                    for (i, g) in dy.iter().enumerate() {
                        de[i / inner] += g;
                    }
                    out.push((*e, de));
                }
                out.push((*x, dy.to_vec()));
            }
            Op::Add { a, b } => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Sub { a, b } => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.iter().map(|g| -g).collect()));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, dy.iter().zip(bv).map(|(g, y)| g * y).collect()));
                out.push((*b, dy.iter().zip(av).map(|(g, x)| g * x).collect()));
            }
            Op::Scale { a, s } => out.push((*a, dy.iter().map(|g| g * s).collect())),
            Op::Silu { a } => {
                let av = self.value(*a).data();
                out.push((*a, dy.iter().zip(av).map(|(g, &x)| g * kernels::silu_grad(x)).collect()));
            }
            Op::GroupNorm { x, gamma, beta, groups, means, rstds } => {
                let xs = self.shape(*x);
                let s: usize = xs[2..].iter().product();
                let (dx, dg, db) = kernels::group_norm_backward(
                    xs[0],
                    xs[1],
                    s,
                    *groups,
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    means,
                    rstds,
                    dy,
                );
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (k, m) = (ws[0], ws[1]);
                let rows = self.value(*x).numel() / k;
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * k];
                    kernels::gemm(rows, m, k, dy, m as isize, 1, self.value(*w).data(), 1, m as isize, &mut dx, 0.0);
                    out.push((*x, dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; k * m];
                    kernels::gemm(k, rows, m, self.value(*x).data(), 1, k as isize, dy, m as isize, 1, &mut dw, 0.0);
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; m];
                    for row in dy.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    out.push((*b, db));
                }
            }
            Op::Attention { q, k, v, probs } => {
                let qs = self.shape(*q);
                let (n, lq, d) = (qs[0], qs[1], qs[2]);
                let lk = self.shape(*k)[1];
                let dv = self.shape(*v)[2];
                let scale = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; n * lq * d];
                let mut dk = vec![0.0; n * lk * d];
                let mut dvv = vec![0.0; n * lk * dv];
                let mut dp = vec![0.0; lq * lk];
                for b in 0..n {
                    let p = &probs[b * lq * lk..(b + 1) * lq * lk];
                    let g = &dy[b * lq * dv..(b + 1) * lq * dv];
                    // dV = Pᵀ·dO
                    kernels::gemm(
                        lk,
                        lq,
                        dv,
                        p,
                        1,
                        lk as isize,
                        g,
                        dv as isize,
                        1,
                        &mut dvv[b * lk * dv..(b + 1) * lk * dv],
                        0.0,
                    );
                    // dP = dO·Vᵀ
                    kernels::gemm(lq, dv, lk, g, dv as isize, 1, &vd[b * lk * dv..], 1, dv as isize, &mut dp, 0.0);
                    for r in 0..lq {
                        let prow = &p[r * lk..(r + 1) * lk];
                        let drow = &mut dp[r * lk..(r + 1) * lk];
                        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for (dv_, pv) in drow.iter_mut().zip(prow) {
                            *dv_ = pv * (*dv_ - dot) * scale;
                        }
                    }
                    kernels::gemm(
                        lq,
                        lk,
                        d,
                        &dp,
                        lk as isize,
                        1,
                        &kd[b * lk * d..],
                        d as isize,
                        1,
                        &mut dq[b * lq * d..(b + 1) * lq * d],
                        0.0,
                    );
                    kernels::gemm(
                        lk,
                        lq,
                        d,
                        &dp,
                        1,
                        lk as isize,
                        &qd[b * lq * d..],
                        d as isize,
                        1,
                        &mut dk[b * lk * d..(b + 1) * lk * d],
                        0.0,
                    );
                }
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dvv));
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (dx, _) = permute_data(dy, node.value.shape(), &inverse);
                out.push((*a, dx));
            }
            Op::Reshape { a } => out.push((*a, dy.to_vec())),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let a = self.shape(p)[*axis];
                    let mut dp = Vec::with_capacity(outer * a * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        dp.extend_from_slice(&dy[start..start + a * inner]);
                    }
                    offset += a;
                    out.push((p, dp));
                }
            }
            Op::Upsample2x { a } => {
                let s = self.shape(*a);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut dx = vec![0.0; nc * h * w];
                for p in 0..nc {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dx[p * h * w + (i / 2) * w + j / 2] += dy[p * 4 * h * w + i * 2 * w + j];
                        }
                    }
                }
                out.push((*a, dx));
            }
            Op::Gather0 { a, idx } => {
                let s = self.shape(*a);
                let inner: usize = s[1..].iter().product();
                let mut dx = vec![0.0; self.value(*a).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..inner {
                        dx[i * inner + j] += dy[r * inner + j];
                    }
                }
                out.push((*a, dx));
            }
            Op::Mse { a, b } => {
                let n = self.value(*a).numel() as f64;
                let g = dy[0] * 2.0 / n;
                let diff = self.zip_with(*a, *b, |x, y| (x - y) * g);
                out.push((*b, diff.iter().map(|v| -v).collect()));
                out.push((*a, diff));
            }
            Op::MeanAbs { a, b } => {
                let n = self.value(*a).numel() as f64;
                let g = dy[0] / n;
                let diff = self.zip_with(*a, *b, |x, y| g * (x - y).signum());
                out.push((*b, diff.iter().map(|v| -v).collect()));
                out.push((*a, diff));
            }
            Op::Sum { a } => out.push((*a, vec![dy[0]; self.value(*a).numel()])),
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                out.push((*a, vec![dy[0] / n as f64; n]));
            }
        }
        Ok(out)
    }
}
