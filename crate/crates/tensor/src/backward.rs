use std::collections::{HashMap, HashSet};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::{col2im_add, conv_dims, im2col, matmul_dims, Op};
use crate::kernel::matmul_into;
use crate::shape::{broadcast_strides, contiguous_strides, for_each_broadcast2, split_at_axis};
use crate::tensor::{Tensor, TensorId};

/// Leaf gradients produced by [`Tensor::backward`].
#[derive(Debug, Default)]
pub struct Gradients<E: Element> {
    map: HashMap<TensorId, Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the loss with respect to `leaf`, if it received one.
    pub fn get(&self, leaf: &Tensor<E>) -> Option<&Tensor<E>> {
        self.map.get(&leaf.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Nodes reachable from `root` that take part in differentiation, in
/// topological order (inputs before outputs). Each node appears once.
pub fn graph_order<E: Element>(root: &Tensor<E>) -> Vec<Tensor<E>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    if !root.requires_grad() {
        return order;
    }
    // Iterative post-order DFS; deep graphs would overflow the call stack.
    let mut stack: Vec<(Tensor<E>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.op() {
            for input in op.inputs() {
                if input.requires_grad() && !seen.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

impl<E: Element> Tensor<E> {
    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self) -> Result<Gradients<E>> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        let order = graph_order(self);
        let mut pending: HashMap<TensorId, Vec<E>> = HashMap::new();
        pending.insert(self.id(), vec![E::one()]);
        let mut grads = Gradients::default();
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match node.op() {
                None => {
                    let t = Tensor::from_vec(g, node.shape())?;
                    grads.map.insert(node.id(), t);
                }
                Some(op) => {
                    for (input, gi) in input_grads(op, node, &g)? {
                        if !input.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&input.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&gi) {
                                    *a = *a + *b;
                                }
                            }
                            None => {
                                pending.insert(input.id(), gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn reduce_to<E: Element>(g: &[E], out_shape: &[usize], shape: &[usize]) -> Vec<E> {
    if out_shape == shape {
        return g.to_vec();
    }
    let strides = broadcast_strides(shape, out_shape);
    let mut acc = vec![E::zero(); shape.iter().product()];
    for_each_broadcast2(out_shape, &strides, &strides, |o, i, _| acc[i] = acc[i] + g[o]);
    acc
}

fn map_grad<E: Element>(g: &[E], xs: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    g.iter().zip(xs).map(|(&g, &x)| f(g, x)).collect()
}

fn input_grads<'a, E: Element>(
    op: &'a Op<E>,
    out: &Tensor<E>,
    g: &[E],
) -> Result<Vec<(&'a Tensor<E>, Vec<E>)>> {
    let os = out.shape();
    let y = out.data();
    let res = match op {
        Op::Add(a, b) => vec![(a, reduce_to(g, os, a.shape())), (b, reduce_to(g, os, b.shape()))],
        Op::Sub(a, b) => {
            let gb = reduce_to(g, os, b.shape()).into_iter().map(|v| -v).collect();
            vec![(a, reduce_to(g, os, a.shape())), (b, gb)]
        }
        Op::Mul(a, b) => {
            let sa = broadcast_strides(a.shape(), os);
            let sb = broadcast_strides(b.shape(), os);
            let mut ga = vec![E::zero(); a.numel()];
            let mut gb = vec![E::zero(); b.numel()];
            let (da, db) = (a.data(), b.data());
            for_each_broadcast2(os, &sa, &sb, |o, ia, ib| {
                ga[ia] = ga[ia] + g[o] * db[ib];
                gb[ib] = gb[ib] + g[o] * da[ia];
            });
            vec![(a, ga), (b, gb)]
        }
        Op::Scale(x, c) => vec![(x, g.iter().map(|&v| v * *c).collect())],
        Op::Offset(x) => vec![(x, g.to_vec())],
        Op::Tanh(x) => vec![(x, map_grad(g, y, |g, y| g * (E::one() - y * y)))],
        Op::Sigmoid(x) => vec![(x, map_grad(g, y, |g, y| g * y * (E::one() - y)))],
        Op::Relu(x) => vec![(
            x,
            map_grad(g, x.data(), |g, x| if x > E::zero() { g } else { E::zero() }),
        )],
        Op::Silu(x) => vec![(
            x,
            map_grad(g, x.data(), |g, x| {
                let s = E::one() / (E::one() + (-x).exp());
                g * (s + x * s * (E::one() - s))
            }),
        )],
        Op::Sum(x) => vec![(x, vec![g[0]; x.numel()])],
        Op::SumAxis(x, axis) => {
            let (outer, len, inner) = split_at_axis(x.shape(), *axis);
            let mut gx = vec![E::zero(); x.numel()];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![(x, gx)]
        }
        Op::Matmul { a, b, ta, tb } => {
            let (ga, gb) = matmul_backward(a, b, *ta, *tb, g)?;
            vec![(a, ga), (b, gb)]
        }
        Op::Permute(x, perm) => {
            let in_strides = contiguous_strides(x.shape());
            let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let mut gx = vec![E::zero(); x.numel()];
            for_each_broadcast2(os, &gather, &gather, |o, i, _| gx[i] = g[o]);
            vec![(x, gx)]
        }
        Op::Reshape(x) => vec![(x, g.to_vec())],
        Op::Softmax(x) => {
            let n = *os.last().unwrap();
            let mut gx = vec![E::zero(); x.numel()];
            for ((gr, yr), dst) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: E = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![(x, gx)]
        }
        Op::LayerNorm { x, rstd } => {
            let n = *os.last().unwrap();
            let nf = E::from_usize(n).unwrap();
            let mut gx = vec![E::zero(); x.numel()];
            for (((gr, yr), dst), &r) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)).zip(rstd) {
                let mean_g = gr.iter().copied().sum::<E>() / nf;
                let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<E>() / nf;
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = r * (gv - mean_g - yv * mean_gy);
                }
            }
            vec![(x, gx)]
        }
        Op::Conv1d { x, w, dilation } => {
            let (b, cin, t, cout, k) = conv_dims(x, w, *dilation)?;
            let mut gx = vec![E::zero(); x.numel()];
            let mut gw = vec![E::zero(); w.numel()];
            let mut cols = vec![E::zero(); cin * k * t];
            let mut dcols = vec![E::zero(); cin * k * t];
            for bi in 0..b {
                let gout = &g[bi * cout * t..(bi + 1) * cout * t];
                im2col(&x.data()[bi * cin * t..(bi + 1) * cin * t], cin, t, k, *dilation, &mut cols);
                unsafe {
                    // dW += dOut @ cols^T
                    E::gemm(
                        cout,
                        t,
                        cin * k,
                        E::one(),
                        gout.as_ptr(),
                        t as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        t as isize,
                        E::one(),
                        gw.as_mut_ptr(),
                        (cin * k) as isize,
                        1,
                    );
                    // dcols = W^T @ dOut
                    E::gemm(
                        cin * k,
                        cout,
                        t,
                        E::one(),
                        w.data().as_ptr(),
                        1,
                        (cin * k) as isize,
                        gout.as_ptr(),
                        t as isize,
                        1,
                        E::zero(),
                        dcols.as_mut_ptr(),
                        t as isize,
                        1,
                    );
                }
                col2im_add(&dcols, cin, t, k, *dilation, &mut gx[bi * cin * t..(bi + 1) * cin * t]);
            }
            vec![(x, gx), (w, gw)]
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_at_axis(os, *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for p in parts {
                let len = p.dim(*axis);
                let mut gp = Vec::with_capacity(p.numel());
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    gp.extend_from_slice(&g[base..base + len * inner]);
                }
                offset += len;
                res.push((p, gp));
            }
            res
        }
        Op::Narrow { x, axis, start } => {
            let (outer, full, inner) = split_at_axis(x.shape(), *axis);
            let len = os[*axis];
            let mut gx = vec![E::zero(); x.numel()];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![(x, gx)]
        }
        Op::ScatterAdd { x, index } => vec![(x, index.iter().map(|&i| g[i]).collect())],
        Op::MovingAverage { x, kernel } => {
            let t = *os.last().unwrap();
            let half = (kernel - 1) / 2;
            let inv = E::one() / E::from_usize(*kernel).unwrap();
            let mut gx = vec![E::zero(); x.numel()];
            for (dst, src) in gx.chunks_mut(t).zip(g.chunks(t)) {
                for (i, &gv) in src.iter().enumerate() {
                    for j in 0..*kernel {
                        let p = (i + j).saturating_sub(half).min(t - 1);
                        dst[p] = dst[p] + gv * inv;
                    }
                }
            }
            vec![(x, gx)]
        }
    };
    Ok(res)
}

fn matmul_backward<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    ta: bool,
    tb: bool,
    g: &[E],
) -> Result<(Vec<E>, Vec<E>)> {
    let (d, _) = matmul_dims(a, b, ta, tb)?;
    let (m, k, n) = (d.m, d.k, d.n);
    // Strides of op(A) (m x k) and op(B) (k x n) in their stored buffers.
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    let mut ga = vec![E::zero(); a.numel()];
    let mut gb = vec![E::zero(); b.numel()];
    for i in 0..d.batch {
        let ao = if d.a_batched { i * m * k } else { 0 };
        let bo = if d.b_batched { i * k * n } else { 0 };
        let gc = &g[i * m * n..(i + 1) * m * n];
        // d op(A) = dC @ op(B)^T, written back in A's stored layout.
        matmul_into(
            (m, n, k),
            gc,
            (n, 1),
            &b.data()[bo..bo + k * n],
            (csb, rsb),
            &mut ga[ao..ao + m * k],
            (rsa, csa),
            !d.a_batched,
        );
        // d op(B) = op(A)^T @ dC, written back in B's stored layout.
        matmul_into(
            (k, m, n),
            &a.data()[ao..ao + m * k],
            (csa, rsa),
            gc,
            (n, 1),
            &mut gb[bo..bo + k * n],
            (rsb, csb),
            !d.b_batched,
        );
    }
    Ok((ga, gb))
}
