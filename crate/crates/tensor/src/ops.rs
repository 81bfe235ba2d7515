//! Forward kernels. Every differentiable op records an [`Op`] node when one
//! of its inputs requires gradients; the matching rules live in `backward`.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::kernel::matmul_into;
use crate::shape::{
    broadcast_shape, broadcast_strides, contiguous_strides, for_each_broadcast2, numel,
    split_at_axis,
};
use crate::tensor::Tensor;

pub(crate) enum Op<E: Element> {
    Add(Tensor<E>, Tensor<E>),
    Sub(Tensor<E>, Tensor<E>),
    Mul(Tensor<E>, Tensor<E>),
    Scale(Tensor<E>, E),
    Offset(Tensor<E>),
    Tanh(Tensor<E>),
    Sigmoid(Tensor<E>),
    Relu(Tensor<E>),
    Silu(Tensor<E>),
    Sum(Tensor<E>),
    SumAxis(Tensor<E>, usize),
    Matmul {
        a: Tensor<E>,
        b: Tensor<E>,
        ta: bool,
        tb: bool,
    },
    Permute(Tensor<E>, Vec<usize>),
    Reshape(Tensor<E>),
    Softmax(Tensor<E>),
    LayerNorm {
        x: Tensor<E>,
        rstd: Vec<E>,
    },
    Conv1d {
        x: Tensor<E>,
        w: Tensor<E>,
        dilation: usize,
    },
    Concat {
        parts: Vec<Tensor<E>>,
        axis: usize,
    },
    Narrow {
        x: Tensor<E>,
        axis: usize,
        start: usize,
    },
    ScatterAdd {
        x: Tensor<E>,
        index: Arc<Vec<usize>>,
    },
    MovingAverage {
        x: Tensor<E>,
        kernel: usize,
    },
}

impl<E: Element> Op<E> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Silu(..) => "silu",
            Op::Sum(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::Matmul { .. } => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::MovingAverage { .. } => "moving_average",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor<E>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Matmul { a, b, .. } => vec![a, b],
            Op::Conv1d { x, w, .. } => vec![x, w],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::Scale(x, _)
            | Op::Offset(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Silu(x)
            | Op::Sum(x)
            | Op::SumAxis(x, _)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::LayerNorm { x, .. }
            | Op::Narrow { x, .. }
            | Op::ScatterAdd { x, .. }
            | Op::MovingAverage { x, .. } => vec![x],
        }
    }
}

/// Elementwise operations exposed through a single entry point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
}

/// Applies `op`; binary variants require `b`.
pub fn elementwise<E: Element>(
    op: Elementwise,
    a: &Tensor<E>,
    b: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let rhs = || b.ok_or_else(|| shape_err("elementwise", format!("{op:?} needs two operands")));
    match op {
        Elementwise::Add => a.add(rhs()?),
        Elementwise::Sub => a.sub(rhs()?),
        Elementwise::Mul => a.mul(rhs()?),
        Elementwise::Tanh => Ok(a.tanh()),
        Elementwise::Sigmoid => Ok(a.sigmoid()),
        Elementwise::Relu => Ok(a.relu()),
    }
}

fn sigmoid<E: Element>(v: E) -> E {
    E::one() / (E::one() + (-v).exp())
}

/// True when `shape`, stripped of leading unit axes, is a suffix of `out`.
fn is_trailing(shape: &[usize], out: &[usize]) -> bool {
    let lead = shape.iter().take_while(|&&d| d == 1).count();
    let core = &shape[lead..];
    core.len() <= out.len() && out.ends_with(core)
}

fn record<E: Element>(
    data: Vec<E>,
    shape: Vec<usize>,
    inputs: &[&Tensor<E>],
    op: impl FnOnce() -> Op<E>,
) -> Tensor<E> {
    if inputs.iter().any(|t| t.requires_grad()) {
        Tensor::from_parts(data, shape, true, Some(op()))
    } else {
        Tensor::from_parts(data, shape, false, None)
    }
}

impl<E: Element> Tensor<E> {
    fn binary(&self, rhs: &Tensor<E>, f: impl Fn(E, E) -> E) -> Result<(Vec<E>, Vec<usize>)> {
        if self.shape() == rhs.shape() {
            let data = self.data().iter().zip(rhs.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok((data, self.shape().to_vec()));
        }
        let out = broadcast_shape(self.shape(), rhs.shape())?;
        let (da, db) = (self.data(), rhs.data());
        // Fast paths for an operand that repeats along leading axes only.
        if out == self.shape() && is_trailing(rhs.shape(), &out) && !db.is_empty() {
            let mut data = Vec::with_capacity(da.len());
            for row in da.chunks(db.len()) {
                data.extend(row.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
            return Ok((data, out));
        }
        if out == rhs.shape() && is_trailing(self.shape(), &out) && !da.is_empty() {
            let mut data = Vec::with_capacity(db.len());
            for row in db.chunks(da.len()) {
                data.extend(da.iter().zip(row).map(|(&x, &y)| f(x, y)));
            }
            return Ok((data, out));
        }
        let sa = broadcast_strides(self.shape(), &out);
        let sb = broadcast_strides(rhs.shape(), &out);
        let mut data = vec![E::zero(); numel(&out)];
        for_each_broadcast2(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
        Ok((data, out))
    }

    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (data, shape) = self.binary(rhs, |x, y| x + y)?;
        Ok(record(data, shape, &[self, rhs], || Op::Add(self.clone(), rhs.clone())))
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (data, shape) = self.binary(rhs, |x, y| x - y)?;
        Ok(record(data, shape, &[self, rhs], || Op::Sub(self.clone(), rhs.clone())))
    }

    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (data, shape) = self.binary(rhs, |x, y| x * y)?;
        Ok(record(data, shape, &[self, rhs], || Op::Mul(self.clone(), rhs.clone())))
    }

    pub fn square(&self) -> Tensor<E> {
        self.mul(self).expect("identical shapes")
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        let data = self.data().iter().map(|&v| v * c).collect();
        record(data, self.shape().to_vec(), &[self], || Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor<E> {
        self.scale(-E::one())
    }

    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        let data = self.data().iter().map(|&v| v + c).collect();
        record(data, self.shape().to_vec(), &[self], || Op::Offset(self.clone()))
    }

    pub fn tanh(&self) -> Tensor<E> {
        let data = self.data().iter().map(|v| v.tanh()).collect();
        record(data, self.shape().to_vec(), &[self], || Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&v| sigmoid(v)).collect();
        record(data, self.shape().to_vec(), &[self], || Op::Sigmoid(self.clone()))
    }

    pub fn relu(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&v| v.max(E::zero())).collect();
        record(data, self.shape().to_vec(), &[self], || Op::Relu(self.clone()))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&v| v * sigmoid(v)).collect();
        record(data, self.shape().to_vec(), &[self], || Op::Silu(self.clone()))
    }

    pub fn sum(&self) -> Tensor<E> {
        let total = self.data().iter().copied().sum();
        record(vec![total], vec![], &[self], || Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor<E> {
        let n = E::from_usize(self.numel().max(1)).unwrap();
        self.sum().scale(E::one() / n)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(shape_err("sum_axis", format!("axis {axis} of {:?}", self.shape())));
        }
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let src = self.data();
        let mut data = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(record(data, shape, &[self], || Op::SumAxis(self.clone(), axis)))
    }

    /// Batched `self @ rhs` over the last two axes.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        matmul_impl(self, rhs, false, false)
    }

    /// Batched `self @ rhs^T`; the usual form for `[out, in]` weights.
    pub fn matmul_nt(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        matmul_impl(self, rhs, false, true)
    }

    /// Batched `self^T @ rhs`.
    pub fn matmul_tn(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        matmul_impl(self, rhs, true, false)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<E>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} for rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let in_strides = contiguous_strides(self.shape());
        let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = vec![E::zero(); self.numel()];
        let src = self.data();
        for_each_broadcast2(&out_shape, &gather, &gather, |o, i, _| data[o] = src[i]);
        Ok(record(data, out_shape, &[self], || Op::Permute(self.clone(), perm.to_vec())))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<E>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(shape_err("transpose", format!("axes {a},{b} of {:?}", self.shape())));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Reinterprets the row-major buffer; shares storage.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel(shape) != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        let op = self.requires_grad().then(|| Op::Reshape(self.clone()));
        Ok(Tensor::from_shared(
            self.shared_data(),
            shape.to_vec(),
            self.requires_grad(),
            op,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor<E>> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut data = self.to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let m = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut z = E::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        Ok(record(data, self.shape().to_vec(), &[self], || Op::Softmax(self.clone())))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: E) -> Result<Tensor<E>> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        let nf = E::from_usize(n).unwrap();
        let mut data = self.to_vec();
        let mut rstd = Vec::with_capacity(data.len() / n.max(1));
        for row in data.chunks_mut(n.max(1)) {
            let mu = row.iter().copied().sum::<E>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<E>() / nf;
            let r = E::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * r;
            }
            rstd.push(r);
        }
        Ok(record(data, self.shape().to_vec(), &[self], || Op::LayerNorm {
            x: self.clone(),
            rstd,
        }))
    }

    /// Same-padded dilated 1-D convolution: `x [B, Cin, T]`, `w [Cout, Cin, K]`.
    pub fn conv1d(&self, w: &Tensor<E>, dilation: usize) -> Result<Tensor<E>> {
        let (b, cin, t, cout, k) = conv_dims(self, w, dilation)?;
        let mut out = vec![E::zero(); b * cout * t];
        let mut cols = vec![E::zero(); cin * k * t];
        for bi in 0..b {
            im2col(&self.data()[bi * cin * t..(bi + 1) * cin * t], cin, t, k, dilation, &mut cols);
            unsafe {
                E::gemm(
                    cout,
                    cin * k,
                    t,
                    E::one(),
                    w.data().as_ptr(),
                    (cin * k) as isize,
                    1,
                    cols.as_ptr(),
                    t as isize,
                    1,
                    E::zero(),
                    out[bi * cout * t..].as_mut_ptr(),
                    t as isize,
                    1,
                );
            }
        }
        Ok(record(out, vec![b, cout, t], &[self, w], || Op::Conv1d {
            x: self.clone(),
            w: w.clone(),
            dilation,
        }))
    }

    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(shape_err("concat", format!("axis {axis} of {:?}", first.shape())));
        }
        for p in parts {
            let same = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(shape_err("concat", format!("{:?} vs {:?}", p.shape(), first.shape())));
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let total: usize = parts.iter().map(|p| p.dim(axis)).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.dim(axis) * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let refs: Vec<&Tensor<E>> = parts.iter().collect();
        Ok(record(data, shape, &refs, || Op::Concat {
            parts: parts.to_vec(),
            axis,
        }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() || start + len > self.dim(axis) {
            return Err(shape_err(
                "narrow",
                format!("axis {axis} [{start}, {}) of {:?}", start + len, self.shape()),
            ));
        }
        let (outer, full, inner) = split_at_axis(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(record(data, shape, &[self], || Op::Narrow {
            x: self.clone(),
            axis,
            start,
        }))
    }

    /// `out[index[i]] += self[i]` into a zero tensor of `out_shape`.
    pub fn scatter_add(&self, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor<E>> {
        let n = numel(out_shape);
        if index.len() != self.numel() || index.iter().any(|&i| i >= n) {
            return Err(shape_err("scatter_add", "index does not fit the output"));
        }
        let mut data = vec![E::zero(); n];
        for (&i, &v) in index.iter().zip(self.data()) {
            data[i] = data[i] + v;
        }
        Ok(record(data, out_shape.to_vec(), &[self], || Op::ScatterAdd {
            x: self.clone(),
            index,
        }))
    }

    /// Centered moving average of odd width along the last axis with edge
    /// replication.
    pub fn moving_average(&self, kernel: usize) -> Result<Tensor<E>> {
        if kernel % 2 == 0 {
            return Err(shape_err("moving_average", format!("kernel {kernel} must be odd")));
        }
        let t = *self
            .shape()
            .last()
            .ok_or_else(|| shape_err("moving_average", "scalar input"))?;
        let half = (kernel - 1) / 2;
        let inv = E::one() / E::from_usize(kernel).unwrap();
        let mut data = vec![E::zero(); self.numel()];
        if t > 0 {
            let at = |src: &[E], p: isize| src[p.clamp(0, t as isize - 1) as usize];
            for (dst, src) in data.chunks_mut(t).zip(self.data().chunks(t)) {
                let h = half as isize;
                let mut acc = (-h..=h).fold(E::zero(), |a, p| a + at(src, p));
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = acc * inv;
                    let i = i as isize;
                    acc = acc + at(src, i + h + 1) - at(src, i - h);
                }
            }
        }
        Ok(record(data, self.shape().to_vec(), &[self], || Op::MovingAverage {
            x: self.clone(),
            kernel,
        }))
    }
}

pub(crate) struct MatmulDims {
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_dims<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    ta: bool,
    tb: bool,
) -> Result<(MatmulDims, Vec<usize>)> {
    let err = || TensorError::MatmulShape {
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(err());
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (m, ka) = if ta { (a.dim(ra - 1), a.dim(ra - 2)) } else { (a.dim(ra - 2), a.dim(ra - 1)) };
    let (kb, n) = if tb { (b.dim(rb - 1), b.dim(rb - 2)) } else { (b.dim(rb - 2), b.dim(rb - 1)) };
    if ka != kb {
        return Err(err());
    }
    let (ba, bb) = (&a.shape()[..ra - 2], &b.shape()[..rb - 2]);
    let batch_shape = if ba == bb || bb.is_empty() {
        ba.to_vec()
    } else if ba.is_empty() {
        bb.to_vec()
    } else {
        return Err(err());
    };
    let mut out = batch_shape.clone();
    out.extend([m, n]);
    Ok((
        MatmulDims {
            batch: numel(&batch_shape),
            a_batched: !ba.is_empty(),
            b_batched: !bb.is_empty(),
            m,
            k: ka,
            n,
        },
        out,
    ))
}

fn matmul_impl<E: Element>(a: &Tensor<E>, b: &Tensor<E>, ta: bool, tb: bool) -> Result<Tensor<E>> {
    let (d, out_shape) = matmul_dims(a, b, ta, tb)?;
    let (m, k, n) = (d.m, d.k, d.n);
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    let mut out = vec![E::zero(); d.batch * m * n];
    for i in 0..d.batch {
        let ao = if d.a_batched { i * m * k } else { 0 };
        let bo = if d.b_batched { i * k * n } else { 0 };
        matmul_into(
            (m, k, n),
            &a.data()[ao..ao + m * k],
            (rsa, csa),
            &b.data()[bo..bo + k * n],
            (rsb, csb),
            &mut out[i * m * n..(i + 1) * m * n],
            (n, 1),
            false,
        );
    }
    Ok(record(out, out_shape, &[a, b], || Op::Matmul {
        a: a.clone(),
        b: b.clone(),
        ta,
        tb,
    }))
}

pub(crate) fn conv_dims<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dilation: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    if x.rank() != 3 || w.rank() != 3 || x.dim(1) != w.dim(1) {
        return Err(shape_err(
            "conv1d",
            format!("x {:?} with w {:?}", x.shape(), w.shape()),
        ));
    }
    let k = w.dim(2);
    if k % 2 == 0 {
        return Err(shape_err("conv1d", format!("same padding needs an odd kernel, got {k}")));
    }
    if dilation == 0 {
        return Err(shape_err("conv1d", "dilation must be >= 1"));
    }
    Ok((x.dim(0), x.dim(1), x.dim(2), w.dim(0), k))
}

/// `cols[(c*K + j), t] = x[c, t + dilation*(j - (K-1)/2)]`, zero outside.
pub(crate) fn im2col<E: Element>(
    x: &[E],
    cin: usize,
    t: usize,
    k: usize,
    dilation: usize,
    cols: &mut [E],
) {
    let half = (k - 1) / 2;
    for c in 0..cin {
        let row_in = &x[c * t..(c + 1) * t];
        for j in 0..k {
            let row = &mut cols[(c * k + j) * t..(c * k + j + 1) * t];
            let shift = (j as isize - half as isize) * dilation as isize;
            for (ti, dst) in row.iter_mut().enumerate() {
                let src = ti as isize + shift;
                *dst = if src >= 0 && (src as usize) < t {
                    row_in[src as usize]
                } else {
                    E::zero()
                };
            }
        }
    }
}

pub(crate) fn col2im_add<E: Element>(
    cols: &[E],
    cin: usize,
    t: usize,
    k: usize,
    dilation: usize,
    dx: &mut [E],
) {
    let half = (k - 1) / 2;
    for c in 0..cin {
        for j in 0..k {
            let row = &cols[(c * k + j) * t..(c * k + j + 1) * t];
            let shift = (j as isize - half as isize) * dilation as isize;
            for (ti, &g) in row.iter().enumerate() {
                let src = ti as isize + shift;
                if src >= 0 && (src as usize) < t {
                    let p = c * t + src as usize;
                    dx[p] = dx[p] + g;
                }
            }
        }
    }
}
