//! Segmentation and adversarial losses, the output-space discriminator, and
//! the AdamW optimizer with its learning-rate schedule.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::model::class_log_softmax_rows;
use crate::nn::Conv2d;
use crate::params::{Binder, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Result of a masked cross-entropy evaluation.
#[derive(Clone, Copy, Debug)]
pub struct SegLoss<'t, T: Real> {
    pub loss: Var<'t, T>,
    pub valid: usize,
}

impl<T: Real> SegLoss<'_, T> {
    /// True when no pixel contributed and the loss is a constant zero.
    pub fn is_empty(&self) -> bool {
        self.valid == 0
    }
}

/// Pixel-wise cross-entropy of `[C×H×W]` logits against a class map.
///
/// Invalid pixels contribute nothing; the sum is divided by the number of
/// valid pixels. `class_weights[c]` scales the term of every pixel labelled
/// `c`. With no valid pixel the loss is a constant 0 and a warning is logged.
pub fn seg_cross_entropy<'t, T: Real>(
    logits: Var<'t, T>,
    labels: &[u8],
    valid: Option<&[bool]>,
    class_weights: Option<&[T]>,
) -> Result<SegLoss<'t, T>> {
    let (c, h, w) = logits.value().dims3()?;
    let n = h * w;
    if labels.len() != n {
        return Err(shape_err!("{} labels for a {h}x{w} mask", labels.len()));
    }
    if let Some(v) = valid {
        if v.len() != n {
            return Err(shape_err!("{} validity flags for a {h}x{w} mask", v.len()));
        }
    }
    if let Some(cw) = class_weights {
        if cw.len() != c {
            return Err(shape_err!("{} class weights for {c} classes", cw.len()));
        }
    }
    let is_valid = |i: usize| valid.is_none_or(|v| v[i]);
    let count = (0..n).filter(|&i| is_valid(i)).count();
    if count == 0 {
        log::warn!("cross-entropy over a mask with no valid pixels");
        return Ok(SegLoss {
            loss: logits.tape().constant(Tensor::scalar(T::zero())),
            valid: 0,
        });
    }
    let norm = T::from_usize_lossy(count);
    let mut select = vec![T::zero(); n * c];
    for (i, &y) in labels.iter().enumerate() {
        if !is_valid(i) {
            continue;
        }
        let y = y as usize;
        if y >= c {
            return Err(contract_err!("label {y} at pixel {i} outside {c} classes"));
        }
        let wt = class_weights.map_or(T::one(), |cw| cw[y]);
        select[i * c + y] = -wt / norm;
    }
    let logp = class_log_softmax_rows(logits)?;
    let select = logits.tape().constant(Tensor::new(&[n, c], select)?);
    Ok(SegLoss {
        loss: logp.mul(select)?.sum()?,
        valid: count,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    /// Number of mask channels fed in (the class count).
    pub in_channels: usize,
    /// Output channels per layer; the last must be 1.
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            channels: vec![8, 16, 32, 64, 1],
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.last() != Some(&1) {
            return Err(Error::Config(
                "discriminator must end in a single channel".into(),
            ));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config(
                "discriminator channels must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fully convolutional patch discriminator over softmax masks: 4×4 kernels,
/// stride 2, padding 1, leaky ReLU between layers.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub layers: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new<T: Real>(
        config: DiscriminatorConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut prev = config.in_channels;
        let layers = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(store, &format!("disc.conv{i}"), prev, c, 4, 2, 1, 1, rng);
                prev = c;
                conv
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Smallest input side that keeps every layer's output at least 1×1.
    pub fn min_input_side(&self) -> usize {
        1 << self.layers.len()
    }

    /// Patch logits `[1×h×w]` for a `[C×H×W]` probability map.
    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, T>, probs: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = probs.shape();
        let min = self.min_input_side();
        if shape.len() != 3
            || shape[0] != self.config.in_channels
            || shape[1] < min
            || shape[2] < min
        {
            return Err(shape_err!(
                "discriminator needs a [{}×≥{min}×≥{min}] input, got {shape:?}",
                self.config.in_channels
            ));
        }
        let last = self.layers.len() - 1;
        let mut x = probs;
        for (i, conv) in self.layers.iter().enumerate() {
            x = conv.forward(b, x)?;
            if i != last {
                x = x.leaky_relu(T::lit(self.config.leaky_slope))?;
            }
        }
        Ok(x)
    }
}

/// Discriminator and generator losses from patch logits.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialLosses<'t, T: Real> {
    /// `mean softplus(−z_s) + mean softplus(z_t)`: source masks real, target fake.
    pub d_loss: Var<'t, T>,
    /// Non-saturating generator term `mean softplus(−z_t)`.
    pub g_loss: Var<'t, T>,
}

/// `d_src`/`d_tgt` are discriminator logits on source and target masks.
/// `d_tgt_for_g` is the target logit map produced with the discriminator
/// frozen and the mask still attached to the segmentation graph.
pub fn adversarial_losses<'t, T: Real>(
    d_src: Var<'t, T>,
    d_tgt: Var<'t, T>,
    d_tgt_for_g: Var<'t, T>,
) -> Result<AdversarialLosses<'t, T>> {
    let real = d_src.neg()?.softplus()?.mean()?;
    let fake = d_tgt.softplus()?.mean()?;
    Ok(AdversarialLosses {
        d_loss: real.add(fake)?,
        g_loss: d_tgt_for_g.neg()?.softplus()?.mean()?,
    })
}

/// Loss weights of the segmentation objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the target pseudo-label term.
    pub beta1: f64,
    /// Weight of the generator adversarial term.
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 0.1,
            beta2: 1.0,
        }
    }
}

/// `l_seg_s + β1·l_seg_t + β2·g_loss`.
pub fn total_loss<'t, T: Real>(
    l_seg_s: Var<'t, T>,
    l_seg_t: Var<'t, T>,
    g_loss: Var<'t, T>,
    w: LossWeights,
) -> Result<Var<'t, T>> {
    l_seg_s
        .add(l_seg_t.scale(T::lit(w.beta1))?)?
        .add(g_loss.scale(T::lit(w.beta2))?)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(l_seg_s: f64, l_seg_t: f64, g_loss: f64, w: LossWeights) -> f64 {
    l_seg_s + w.beta1 * l_seg_t + w.beta2 * g_loss
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Linear ramp to `base` over `warmup` steps, then linear decay to 0 at
    /// `total`. Steps count from 1.
    WarmupLinear {
        base: f64,
        warmup: u64,
        total: u64,
    },
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            Self::Constant { lr } => lr,
            Self::WarmupLinear {
                base,
                warmup,
                total,
            } => {
                let t = step.max(1);
                if t >= total {
                    0.0
                } else if t <= warmup {
                    base * (t as f64 / warmup as f64)
                } else {
                    base * ((total - t) as f64 / (total - warmup) as f64)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay over every tensor of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Real = f64> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with learning rate `lr`. Aborts before touching any
    /// parameter if a gradient is not finite.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(contract_err!(
                "optimizer holds {} moments, store has {} parameters, got {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(shape_err!(
                    "gradient {:?} for parameter {}",
                    g.shape(),
                    params.name(id)
                ));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: params.name(id).to_string(),
                    index: i,
                    value: g.data()[i].as_f64(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        let lr_t = T::lit(lr);
        let decay = T::one() - T::lit(lr * c.weight_decay);
        let eps = T::lit(c.eps);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, &g) in grads[k].data().iter().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments and step count as a store (`m.<name>`, `v.<name>`, `step`),
    /// for checkpointing.
    pub fn state(&self, params: &ParamStore<T>) -> ParamStore<T> {
        let mut s = ParamStore::new();
        for ((name, _), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            s.insert(format!("m.{name}"), m.clone());
            s.insert(format!("v.{name}"), v.clone());
        }
        s.insert(
            "step",
            Tensor::scalar(T::from_usize_lossy(self.step as usize)),
        );
        s
    }

    pub fn from_state(
        config: AdamWConfig,
        params: &ParamStore<T>,
        state: &ParamStore<T>,
    ) -> Result<Self> {
        let mut opt = Self::new(config, params);
        for (k, (name, t)) in params.iter().enumerate() {
            for (slot, prefix) in [(&mut opt.m, "m"), (&mut opt.v, "v")] {
                let key = format!("{prefix}.{name}");
                let saved = state
                    .by_name(&key)
                    .ok_or_else(|| contract_err!("optimizer state lacks {key}"))?;
                if saved.shape() != t.shape() {
                    return Err(shape_err!(
                        "optimizer state {key} has shape {:?}",
                        saved.shape()
                    ));
                }
                slot[k] = saved.clone();
            }
        }
        let step = state
            .by_name("step")
            .ok_or_else(|| contract_err!("optimizer state lacks the step count"))?;
        opt.step = step.item().as_f64() as u64;
        Ok(opt)
    }
}
