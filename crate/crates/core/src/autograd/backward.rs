use std::rc::Rc;

use super::ops::{ln_stats, sigmoid_scalar, softmax_rows};
use super::{backward_fault, Op, Tape, Var};
use crate::error::{contract_err, Result};
use crate::kernels;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T: Real = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `var`, if it was reached.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id()).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::wrt`], but an unreached leaf yields zeros.
    pub fn wrt_or_zero(&self, var: Var<'_, T>) -> Tensor<T> {
        self.wrt(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, shape: &[usize], delta: Vec<T>) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::new(shape, delta).expect("gradient shape")),
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Reverse sweep from a rank-0 root.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let root = self.value();
        if root.rank() != 0 {
            return Err(contract_err!(
                "backward root must be a scalar (shape []), got {:?}",
                root.shape()
            ));
        }
        Ok(self.tape.backward_from(self.id))
    }
}

impl<T: Real> Tape<T> {
    fn backward_from(&self, root: usize) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[root] = Some(Tensor::ones(&[]));
        let fault = backward_fault();

        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let g = g.data();
            let val = |i: usize| -> Rc<Tensor<T>> { Rc::clone(&nodes[i].value) };
            let wants = |i: usize| nodes[i].requires_grad;
            let mut push = |i: usize, delta: Vec<T>| {
                let shape = nodes[i].value.shape().to_vec();
                accumulate(&mut grads[i], &shape, delta);
            };

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if wants(*a) {
                        push(*a, g.to_vec());
                    }
                    if wants(*b) {
                        push(*b, g.to_vec());
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        push(*a, g.to_vec());
                    }
                    if wants(*b) {
                        push(*b, g.iter().map(|&v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if wants(*a) {
                        push(*a, g.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect());
                    }
                    if wants(*b) {
                        push(*b, g.iter().zip(va.data()).map(|(&g, &x)| g * x).collect());
                    }
                }
                Op::AddBias { x, bias } => {
                    if wants(*x) {
                        push(*x, g.to_vec());
                    }
                    if wants(*bias) {
                        let c = nodes[*bias].value.len();
                        let mut gb = vec![T::zero(); c];
                        for row in g.chunks_exact(c) {
                            for (a, &b) in gb.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                        push(*bias, gb);
                    }
                }
                Op::Scale(x, s) => {
                    if wants(*x) {
                        push(*x, g.iter().map(|&v| v * *s).collect());
                    }
                }
                Op::AddScalar(x) | Op::Reshape(x) => {
                    if wants(*x) {
                        push(*x, g.to_vec());
                    }
                }
                &Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    shared_b,
                } => {
                    let (va, vb) = (val(a), val(b));
                    if wants(a) {
                        let mut ga = vec![T::zero(); batch * m * k];
                        for bi in 0..batch {
                            let bo = if shared_b { 0 } else { bi * k * n };
                            kernels::gemm_nt(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &vb.data()[bo..bo + k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        push(a, ga);
                    }
                    if wants(b) {
                        let mut gb = vec![T::zero(); vb.len()];
                        for bi in 0..batch {
                            let bo = if shared_b { 0 } else { bi * k * n };
                            kernels::gemm_tn(
                                &va.data()[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bo..bo + k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        push(b, gb);
                    }
                }
                &Op::TransposeLast2 { x, batch, m, n } => {
                    if wants(x) {
                        let mut gx = Vec::with_capacity(g.len());
                        for chunk in g.chunks_exact((m * n).max(1)).take(batch) {
                            gx.extend(kernels::transpose(chunk, n, m));
                        }
                        push(x, gx);
                    }
                }
                Op::Softmax(x) => {
                    if wants(*x) {
                        let y = &node.value;
                        let n = *y.shape().last().expect("rank >= 1");
                        let mut gx = vec![T::zero(); g.len()];
                        for ((yr, gr), dr) in y
                            .data()
                            .chunks_exact(n)
                            .zip(g.chunks_exact(n))
                            .zip(gx.chunks_exact_mut(n))
                        {
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for i in 0..n {
                                dr[i] = yr[i] * (gr[i] - dot);
                            }
                        }
                        push(*x, gx);
                    }
                }
                Op::LogSoftmax(x) => {
                    if wants(*x) {
                        let xv = val(*x);
                        let n = *xv.shape().last().expect("rank >= 1");
                        let p = softmax_rows(xv.data(), n);
                        let mut gx = vec![T::zero(); g.len()];
                        for ((pr, gr), dr) in p
                            .chunks_exact(n)
                            .zip(g.chunks_exact(n))
                            .zip(gx.chunks_exact_mut(n))
                        {
                            let total: T = gr.iter().copied().sum();
                            for i in 0..n {
                                dr[i] = gr[i] - pr[i] * total;
                            }
                        }
                        push(*x, gx);
                    }
                }
                &Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let (xv, gv) = (val(x), val(gamma));
                    let c = gv.len();
                    let cn = T::from_usize_lossy(c);
                    let mut gx = vec![T::zero(); xv.len()];
                    let mut gg = vec![T::zero(); c];
                    let mut gbeta = vec![T::zero(); c];
                    let mut xhat = vec![T::zero(); c];
                    let mut gxhat = vec![T::zero(); c];
                    for ((xr, gr), dr) in xv
                        .data()
                        .chunks_exact(c)
                        .zip(g.chunks_exact(c))
                        .zip(gx.chunks_exact_mut(c))
                    {
                        let st = ln_stats(xr, eps);
                        for i in 0..c {
                            xhat[i] = (xr[i] - st.mean) * st.rstd;
                            gg[i] += gr[i] * xhat[i];
                            gbeta[i] += gr[i];
                            gxhat[i] = gr[i] * gv.data()[i];
                        }
                        let s1: T = gxhat.iter().copied().sum();
                        let s2: T = gxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                        for i in 0..c {
                            dr[i] = st.rstd / cn * (cn * gxhat[i] - s1 - xhat[i] * s2);
                        }
                    }
                    if wants(x) {
                        push(x, gx);
                    }
                    if wants(gamma) {
                        push(gamma, gg);
                    }
                    if wants(beta) {
                        push(beta, gbeta);
                    }
                }
                Op::Gelu(x) => {
                    if wants(*x) {
                        let xv = val(*x);
                        let inv_sqrt_2pi = T::FRAC_1_SQRT_2() * T::FRAC_2_SQRT_PI() * T::lit(0.5);
                        let gx = xv
                            .data()
                            .iter()
                            .zip(g)
                            .map(|(&v, &gi)| {
                                let cdf = T::lit(0.5) * (T::one() + (v * T::FRAC_1_SQRT_2()).erf());
                                let pdf = (-(v * v) * T::lit(0.5)).exp() * inv_sqrt_2pi;
                                let d = if fault { cdf } else { cdf + v * pdf };
                                gi * d
                            })
                            .collect();
                        push(*x, gx);
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    if wants(*x) {
                        let xv = val(*x);
                        let gx = xv
                            .data()
                            .iter()
                            .zip(g)
                            .map(|(&v, &gi)| if v > T::zero() { gi } else { gi * *slope })
                            .collect();
                        push(*x, gx);
                    }
                }
                Op::Softplus(x) => {
                    if wants(*x) {
                        let xv = val(*x);
                        let gx = xv
                            .data()
                            .iter()
                            .zip(g)
                            .map(|(&v, &gi)| gi * sigmoid_scalar(v))
                            .collect();
                        push(*x, gx);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    if wants(*x) {
                        let wv = val(*w);
                        let mut gx = vec![T::zero(); geom.c_in * geom.h * geom.w];
                        kernels::conv2d_backward_input(g, wv.data(), geom, &mut gx);
                        push(*x, gx);
                    }
                    if wants(*w) {
                        let xv = val(*x);
                        let mut gw = vec![T::zero(); nodes[*w].value.len()];
                        kernels::conv2d_backward_weight(g, xv.data(), geom, &mut gw);
                        push(*w, gw);
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            let plane = geom.out_h * geom.out_w;
                            push(
                                *b,
                                g.chunks_exact(plane)
                                    .map(|p| p.iter().copied().sum())
                                    .collect(),
                            );
                        }
                    }
                }
                &Op::Upsample { x, c, from, to } => {
                    if wants(x) {
                        push(x, kernels::upsample_backward(g, c, from, to));
                    }
                }
                Op::ConcatLast { parts, rows } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for &(pid, width) in parts {
                        if wants(pid) {
                            let mut gp = Vec::with_capacity(rows * width);
                            for r in 0..*rows {
                                gp.extend_from_slice(
                                    &g[r * total + offset..r * total + offset + width],
                                );
                            }
                            push(pid, gp);
                        }
                        offset += width;
                    }
                }
                &Op::NarrowLast { x, start, width } => {
                    if wants(x) {
                        let len = *node.value.shape().last().expect("rank >= 1");
                        let rows = g.len() / len.max(1);
                        let mut gx = vec![T::zero(); rows * width];
                        for r in 0..rows {
                            gx[r * width + start..r * width + start + len]
                                .copy_from_slice(&g[r * len..(r + 1) * len]);
                        }
                        push(x, gx);
                    }
                }
                Op::Sum(x) => {
                    if wants(*x) {
                        push(*x, vec![g[0]; nodes[*x].value.len()]);
                    }
                }
                Op::Mean(x) => {
                    if wants(*x) {
                        let n = nodes[*x].value.len();
                        push(*x, vec![g[0] / T::from_usize_lossy(n); n]);
                    }
                }
            }
        }

        // only leaves keep their gradients
        for (slot, node) in grads.iter_mut().zip(nodes.iter()) {
            if !matches!(node.op, Op::Leaf) {
                *slot = None;
            }
        }
        if matches!(nodes[root].op, Op::Leaf) && grads[root].is_none() {
            grads[root] = Some(Tensor::ones(&[]));
        }
        Gradients { grads }
    }
}
