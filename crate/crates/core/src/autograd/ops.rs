use super::{Op, Var};
use crate::error::{shape_err, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Real;
use crate::tensor::Tensor;

fn last_dim(shape: &[usize]) -> Result<usize> {
    shape
        .last()
        .copied()
        .ok_or_else(|| shape_err!("operation needs rank >= 1, got a scalar"))
}

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    x * T::lit(0.5) * (T::one() + (x * T::FRAC_1_SQRT_2()).erf())
}

pub(crate) fn softplus_scalar<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax of a `[rows × n]` buffer.
pub(crate) fn softmax_rows<T: Real>(data: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (src, dst) in data.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub(crate) struct LnStats<T> {
    pub mean: T,
    pub rstd: T,
}

pub(crate) fn ln_stats<T: Real>(row: &[T], eps: T) -> LnStats<T> {
    let n = T::from_usize_lossy(row.len());
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    LnStats {
        mean,
        rstd: T::one() / (var + eps).sqrt(),
    }
}

impl<'t, T: Real> Var<'t, T> {
    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Result<Var<'t, T>> {
        self.tape.push(value, op)
    }

    fn same_shape(
        &self,
        other: &Var<'t, T>,
        what: &str,
    ) -> Result<(std::rc::Rc<Tensor<T>>, std::rc::Rc<Tensor<T>>)> {
        self.check_same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            ));
        }
        Ok((a, b))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.same_shape(&other, "add")?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        self.unary(Tensor::new(a.shape(), data)?, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.same_shape(&other, "sub")?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x - y)
            .collect();
        self.unary(Tensor::new(a.shape(), data)?, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.same_shape(&other, "mul")?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.unary(Tensor::new(a.shape(), data)?, Op::Mul(self.id, other.id))
    }

    /// Adds a `[C]` vector to every last-dim slice of `[..., C]`.
    pub fn add_bias(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same_tape(&bias)?;
        let (x, b) = (self.value(), bias.value());
        let c = last_dim(x.shape())?;
        if b.shape() != [c] {
            return Err(shape_err!(
                "add_bias: bias {:?} does not match {:?}",
                b.shape(),
                x.shape()
            ));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        self.unary(
            Tensor::new(x.shape(), data)?,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
        )
    }

    pub fn scale(&self, s: T) -> Result<Var<'t, T>> {
        let x = self.value();
        self.unary(x.map(|v| v * s), Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: T) -> Result<Var<'t, T>> {
        let x = self.value();
        self.unary(x.map(|v| v + s), Op::AddScalar(self.id))
    }

    pub fn neg(&self) -> Result<Var<'t, T>> {
        self.scale(-T::one())
    }

    /// Matrix product over the last two dimensions.
    ///
    /// Leading dimensions must agree, or `other` may be rank 2 and is then
    /// shared by every batch entry.
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err!(
                "matmul needs rank >= 2 operands, got {:?} x {:?}",
                sa,
                sb
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2 && !lead.is_empty();
        if k != k2 || (!shared_b && &sb[..sb.len() - 2] != lead) {
            return Err(shape_err!("matmul dimension mismatch: {:?} x {:?}", sa, sb));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let bo = if shared_b { 0 } else { bi * k * n };
            kernels::gemm_nn(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        self.unary(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                shared_b,
            },
        )
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 {
            return Err(shape_err!("transpose needs rank >= 2, got {:?}", s));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = x.len() / (m * n).max(1);
        let mut data = Vec::with_capacity(x.len());
        for chunk in x.data().chunks_exact((m * n).max(1)).take(batch) {
            data.extend(kernels::transpose(chunk, m, n));
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        self.unary(
            Tensor::new(&shape, data)?,
            Op::TransposeLast2 {
                x: self.id,
                batch,
                m,
                n,
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let t = Tensor::clone(&x).reshape(shape)?;
        self.unary(t, Op::Reshape(self.id))
    }

    /// Softmax over the last dimension, max-shifted.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = last_dim(x.shape())?;
        if n == 0 {
            return Err(shape_err!("softmax over an empty dimension"));
        }
        let out = softmax_rows(x.data(), n);
        self.unary(Tensor::new(x.shape(), out)?, Op::Softmax(self.id))
    }

    pub fn log_softmax(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = last_dim(x.shape())?;
        if n == 0 {
            return Err(shape_err!("log_softmax over an empty dimension"));
        }
        let mut out = vec![T::zero(); x.len()];
        for (src, dst) in x.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + src.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        self.unary(Tensor::new(x.shape(), out)?, Op::LogSoftmax(self.id))
    }

    /// Layer normalisation over the last dimension with affine `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.check_same_tape(&gamma)?;
        self.check_same_tape(&beta)?;
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let c = last_dim(x.shape())?;
        if g.shape() != [c] || b.shape() != [c] {
            return Err(shape_err!(
                "layer_norm: gamma {:?} / beta {:?} do not match {:?}",
                g.shape(),
                b.shape(),
                x.shape()
            ));
        }
        let mut out = vec![T::zero(); x.len()];
        for (src, dst) in x.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let st = ln_stats(src, eps);
            for i in 0..c {
                dst[i] = (src[i] - st.mean) * st.rstd * g.data()[i] + b.data()[i];
            }
        }
        self.unary(
            Tensor::new(x.shape(), out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
        )
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        self.unary(x.map(gelu_scalar), Op::Gelu(self.id))
    }

    pub fn leaky_relu(&self, slope: T) -> Result<Var<'t, T>> {
        let x = self.value();
        self.unary(
            x.map(|v| if v > T::zero() { v } else { v * slope }),
            Op::LeakyRelu(self.id, slope),
        )
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        self.unary(x.map(softplus_scalar), Op::Softplus(self.id))
    }

    /// 2-D cross-correlation of a `[C_in×H×W]` input with
    /// `[C_out×C_in/groups×kh×kw]` weights.
    pub fn conv2d(
        &self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var<'t, T>> {
        self.check_same_tape(&weight)?;
        let (x, w) = (self.value(), weight.value());
        let (c_in, h, wd) = x.dims3()?;
        let [c_out, cpg, kh, kw] = w.shape()[..] else {
            return Err(shape_err!(
                "conv2d weight must be rank 4, got {:?}",
                w.shape()
            ));
        };
        if stride == 0
            || groups == 0
            || c_in % groups != 0
            || c_out % groups != 0
            || cpg != c_in / groups
        {
            return Err(shape_err!(
                "conv2d: input {:?} incompatible with weight {:?} (groups {groups}, stride {stride})",
                x.shape(),
                w.shape()
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err!(
                "conv2d: kernel {kh}x{kw} larger than padded input {:?} (pad {pad})",
                x.shape()
            ));
        }
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            groups,
            out_h,
            out_w,
        };
        let mut out = vec![T::zero(); c_out * out_h * out_w];
        if let Some(b) = &bias {
            self.check_same_tape(b)?;
            let bv = b.value();
            if bv.shape() != [c_out] {
                return Err(shape_err!(
                    "conv2d bias {:?} does not match {c_out} outputs",
                    bv.shape()
                ));
            }
            for (plane, &v) in out.chunks_exact_mut(out_h * out_w).zip(bv.data()) {
                plane.fill(v);
            }
        }
        kernels::conv2d_forward(x.data(), w.data(), &geom, &mut out);
        self.unary(
            Tensor::new(&[c_out, out_h, out_w], out)?,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
        )
    }

    /// Bilinear resize of `[C×H×W]` with half-pixel centres.
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, h, w) = x.dims3()?;
        if out_h < h || out_w < w || h == 0 || w == 0 {
            return Err(shape_err!(
                "upsample_bilinear: cannot map {h}x{w} to {out_h}x{out_w}"
            ));
        }
        let data = kernels::upsample_forward(x.data(), c, (h, w), (out_h, out_w));
        self.unary(
            Tensor::new(&[c, out_h, out_w], data)?,
            Op::Upsample {
                x: self.id,
                c,
                from: (h, w),
                to: (out_h, out_w),
            },
        )
    }

    /// Concatenates along the last dimension.
    pub fn concat_last(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let lead = {
            let s = first.shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for (p, v) in parts.iter().zip(&values) {
            first.check_same_tape(p)?;
            let s = v.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err!(
                    "concat: {:?} does not match leading dims {:?}",
                    s,
                    lead
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &wd) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        first.tape.push(
            Tensor::new(&shape, data)?,
            Op::ConcatLast {
                parts: parts.iter().zip(&widths).map(|(p, &w)| (p.id, w)).collect(),
                rows,
            },
        )
    }

    /// Columns `start..start+len` of the last dimension.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let width = last_dim(x.shape())?;
        if start + len > width {
            return Err(shape_err!(
                "narrow {start}..{} out of range for {:?}",
                start + len,
                x.shape()
            ));
        }
        let mut data = Vec::with_capacity(x.len() / width.max(1) * len);
        for row in x.data().chunks_exact(width) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        self.unary(
            Tensor::new(&shape, data)?,
            Op::NarrowLast {
                x: self.id,
                start,
                width,
            },
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        self.unary(Tensor::scalar(x.sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.is_empty() {
            return Err(shape_err!("mean of an empty tensor"));
        }
        let m = x.sum() / T::from_usize_lossy(x.len());
        self.unary(Tensor::scalar(m), Op::Mean(self.id))
    }
}
