//! Encoder + decoder bundle and whole-image inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::decoder::{Decoder, DecoderConfig, HeadOutput};
use crate::encoder::{Branches, Encoder, EncoderConfig, StageOutput};
use crate::error::Result;
use crate::params::{Binder, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn q0() -> Self {
        Self {
            encoder: EncoderConfig::q0(),
            decoder: DecoderConfig::default(),
        }
    }

    pub fn micro() -> Self {
        Self {
            encoder: EncoderConfig::micro(),
            decoder: DecoderConfig {
                embed_dim: 4,
                ..DecoderConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct QuadFormer {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Both masks of a paired forward pass plus the encoder pyramid.
pub struct PairOutput<'t, T: Real> {
    pub source: HeadOutput<'t, T>,
    pub target: HeadOutput<'t, T>,
    pub stages: Vec<StageOutput<'t, T>>,
}

impl QuadFormer {
    pub fn new<T: Real>(
        config: ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let encoder = Encoder::new(config.encoder.clone(), store, rng)?;
        let decoder = Decoder::new(config.decoder.clone(), &config.encoder.channels, store, rng)?;
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    /// Fresh model and parameters from a seed.
    pub fn init<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn num_classes(&self) -> usize {
        self.config.decoder.num_classes
    }

    pub fn forward_pair<'t, T: Real>(
        &self,
        b: &Binder<'t, T>,
        img_s: Var<'t, T>,
        img_t: Var<'t, T>,
        branches: Branches,
    ) -> Result<PairOutput<'t, T>> {
        let stages = self.encoder.forward(b, img_s, img_t, branches)?;
        let (source, target) = self.decoder.forward_pair(b, &stages)?;
        Ok(PairOutput {
            source,
            target,
            stages,
        })
    }

    /// Single-image forward read from the source head, `[φ_s, φ_s]`.
    /// Identical to a paired forward with both inputs equal.
    pub fn forward_source_single<'t, T: Real>(
        &self,
        b: &Binder<'t, T>,
        img: Var<'t, T>,
    ) -> Result<HeadOutput<'t, T>> {
        let stages = self.encoder.forward_single(b, img)?;
        let (source, _) = self.decoder.forward_pair(b, &stages)?;
        Ok(source)
    }

    /// Source-free target prediction from `[φ_t, φ_t]`.
    pub fn forward_target_sourcefree<'t, T: Real>(
        &self,
        b: &Binder<'t, T>,
        img: Var<'t, T>,
    ) -> Result<HeadOutput<'t, T>> {
        let stages = self.encoder.forward_single(b, img)?;
        self.decoder.forward_target_only(b, &stages)
    }
}

/// Softmax over the class axis of a `[C×H×W]` map.
pub fn class_softmax<'t, T: Real>(logits: Var<'t, T>) -> Result<Var<'t, T>> {
    let (c, h, w) = logits.value().dims3()?;
    logits
        .reshape(&[c, h * w])?
        .transpose()?
        .softmax()?
        .transpose()?
        .reshape(&[c, h, w])
}

/// Log-softmax over the class axis, returned as `[(H·W)×C]` rows.
pub fn class_log_softmax_rows<'t, T: Real>(logits: Var<'t, T>) -> Result<Var<'t, T>> {
    let (c, h, w) = logits.value().dims3()?;
    logits.reshape(&[c, h * w])?.transpose()?.log_softmax()
}

/// Predicted segmentation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask<T = f64> {
    /// `[classes × H/4 × W/4]`
    pub logits: Tensor<T>,
    /// `[classes × H × W]` class probabilities after upsampling the logits.
    pub probs: Option<Tensor<T>>,
}

impl<T: Real> SegMask<T> {
    /// Per-pixel argmax over the full-resolution probabilities (or the
    /// logits if no probabilities are attached). Ties go to the lower class.
    pub fn class_map(&self) -> Vec<u8> {
        let t = self.probs.as_ref().unwrap_or(&self.logits);
        argmax_classes(t)
    }

    /// Max class probability per full-resolution pixel.
    pub fn confidence(&self) -> Option<Vec<T>> {
        let p = self.probs.as_ref()?;
        let (c, h, w) = p.dims3().ok()?;
        let n = h * w;
        Some(
            (0..n)
                .map(|i| {
                    (0..c)
                        .map(|k| p.data()[k * n + i])
                        .fold(T::neg_infinity(), T::max)
                })
                .collect(),
        )
    }
}

pub fn argmax_classes<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let s = t.shape();
    let (c, n) = (s[0], s[1..].iter().product::<usize>());
    (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if t.data()[k * n + i] > t.data()[best * n + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Runs the target branch alone on `img` and returns the target mask with
/// full-resolution probabilities. No source image is needed.
pub fn infer_target_sourcefree<T: Real>(
    model: &QuadFormer,
    store: &ParamStore<T>,
    img: &Tensor<T>,
) -> Result<SegMask<T>> {
    let tape = Tape::new();
    let b = Binder::frozen(&tape, store);
    let (_, h, w) = img.dims3()?;
    let out = model.forward_target_sourcefree(&b, tape.constant(img.clone()))?;
    let probs = class_softmax(out.logits.upsample_bilinear(h, w)?)?;
    Ok(SegMask {
        logits: Tensor::clone(&out.logits.value()),
        probs: Some(Tensor::clone(&probs.value())),
    })
}

/// Paired inference; returns the (source, target) masks.
pub fn infer_pair<T: Real>(
    model: &QuadFormer,
    store: &ParamStore<T>,
    img_s: &Tensor<T>,
    img_t: &Tensor<T>,
    branches: Branches,
) -> Result<(SegMask<T>, SegMask<T>)> {
    let tape = Tape::new();
    let b = Binder::frozen(&tape, store);
    let (_, h, w) = img_t.dims3()?;
    let out = model.forward_pair(
        &b,
        tape.constant(img_s.clone()),
        tape.constant(img_t.clone()),
        branches,
    )?;
    let mask = |o: &HeadOutput<'_, T>| -> Result<SegMask<T>> {
        let probs = class_softmax(o.logits.upsample_bilinear(h, w)?)?;
        Ok(SegMask {
            logits: Tensor::clone(&o.logits.value()),
            probs: Some(Tensor::clone(&probs.value())),
        })
    };
    Ok((mask(&out.source)?, mask(&out.target)?))
}
