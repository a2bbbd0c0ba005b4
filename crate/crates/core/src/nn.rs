//! Parameterised layers shared by the encoder, decoder and discriminator.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::params::{init, Binder, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// `y = x·W + b` with `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.insert(
                format!("{name}.weight"),
                init::trunc_normal(&[in_dim, out_dim], rng),
            ),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(b.get(self.weight))?.add_bias(b.get(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps,
        }
    }

    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(b.get(self.gamma), b.get(self.beta), T::lit(self.eps))
    }
}

/// Convolution over a `[C×H×W]` map.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    /// He-style init, `σ = √(2 / fan_out)`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_out = kernel * kernel * c_out / groups;
        let std = (2.0 / fan_out as f64).sqrt();
        Self {
            weight: store.insert(
                format!("{name}.weight"),
                init::trunc_normal_std(&[c_out, c_in / groups, kernel, kernel], std, rng),
            ),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            pad,
            groups,
        }
    }

    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(
            b.get(self.weight),
            Some(b.get(self.bias)),
            self.stride,
            self.pad,
            self.groups,
        )
    }
}

/// `[N×C]` tokens (row-major grid) to a `[C×h×w]` map.
pub fn tokens_to_map<'t, T: Real>(x: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 2 || s[0] != h * w {
        return Err(shape_err!("{:?} tokens do not form a {h}x{w} grid", s));
    }
    x.transpose()?.reshape(&[s[1], h, w])
}

/// `[C×h×w]` map to `[(h·w)×C]` tokens.
pub fn map_to_tokens<'t, T: Real>(x: Var<'t, T>) -> Result<(Var<'t, T>, usize, usize)> {
    let (c, h, w) = x.value().dims3()?;
    Ok((x.reshape(&[c, h * w])?.transpose()?, h, w))
}
