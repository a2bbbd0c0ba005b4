//! Experiment configuration: every hyperparameter of a run in one
//! `key = value` file.

use crate::data::AugmentConfig;
use crate::encoder::{Branches, EncoderConfig};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::kv::{KvReader, KvWriter};
use crate::model::ModelConfig;
use crate::objectives::{AdamWConfig, DiscriminatorConfig, LossWeights, LrSchedule};

/// Components of the adaptation stage that can be switched off.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    /// Target pseudo-label loss.
    pub self_training: bool,
    /// Output-space discriminator and generator loss.
    pub adversarial: bool,
    /// Prototype-based pseudo-label correction.
    pub correction: bool,
    /// Cross-attention branch fed by source queries.
    pub cross_source: bool,
    /// Cross-attention branch fed by target queries.
    pub cross_target: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            self_training: true,
            adversarial: true,
            correction: true,
            cross_source: true,
            cross_target: true,
        }
    }
}

impl Toggles {
    pub fn branches(&self) -> Branches {
        Branches {
            cross_source: self.cross_source,
            cross_target: self.cross_target,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub discriminator: DiscriminatorConfig,
    pub augment: AugmentConfig,
    pub toggles: Toggles,
    pub seed: u64,
    /// Source-only iterations.
    pub warmup_iterations: u64,
    /// Adaptation iterations.
    pub iterations: u64,
    /// Images (warm-up) or pairs (adaptation) per step.
    pub batch: usize,
    pub lr: f64,
    /// Linear learning-rate warm-up steps.
    pub lr_warmup: u64,
    pub weight_decay: f64,
    pub disc_lr: f64,
    pub loss: LossWeights,
    /// Weight of line pixels in the segmentation losses when
    /// `class_weighting` is on.
    pub line_weight: f64,
    pub class_weighting: bool,
    /// Confidence threshold of valid pseudo-label pixels.
    pub tau: f64,
    /// Temperature of the prototype affinity softmax.
    pub temperature: f64,
    pub ema_momentum: f64,
    /// Steps between target-validation evaluations in the training log;
    /// 0 evaluates only after the last step.
    pub eval_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::q0(),
            discriminator: DiscriminatorConfig::default(),
            augment: AugmentConfig::default(),
            toggles: Toggles::default(),
            seed: 42,
            warmup_iterations: 1000,
            iterations: 4000,
            batch: 2,
            lr: 1e-3,
            lr_warmup: 150,
            weight_decay: 0.01,
            disc_lr: 1e-4,
            loss: LossWeights::default(),
            line_weight: 10.0,
            class_weighting: true,
            tau: 0.9,
            temperature: 1.0,
            ema_momentum: 0.9999,
            eval_every: 500,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.model.decoder.validate()?;
        self.discriminator.validate()?;
        if self.discriminator.in_channels != self.model.decoder.num_classes {
            return Err(Error::Config(format!(
                "discriminator reads {} channels but the model predicts {} classes",
                self.discriminator.in_channels, self.model.decoder.num_classes
            )));
        }
        let checks = [
            (self.batch > 0, "batch must be positive"),
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be positive"),
            (self.disc_lr > 0.0 && self.disc_lr.is_finite(), "disc_lr must be positive"),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
            ((0.0..=1.0).contains(&self.tau), "tau must lie in [0, 1]"),
            (self.temperature > 0.0, "temperature must be positive"),
            ((0.0..1.0).contains(&self.ema_momentum), "ema_momentum must lie in [0, 1)"),
            (self.line_weight > 0.0, "line_weight must be positive"),
            (self.loss.beta1 >= 0.0 && self.loss.beta2 >= 0.0, "loss weights must be non-negative"),
            (
                self.augment.contrast.0 <= self.augment.contrast.1,
                "augment.contrast must be an ordered range",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Schedule over `total` steps.
    pub fn schedule(&self, total: u64) -> LrSchedule {
        LrSchedule::WarmupLinear {
            base: self.lr,
            warmup: self.lr_warmup.min(total.saturating_sub(1)).max(1),
            total,
        }
    }

    pub fn to_text(&self) -> String {
        let e = &self.model.encoder;
        let d = &self.model.decoder;
        let a = &self.augment;
        let t = &self.toggles;
        let mut w = KvWriter::new();
        w.comment("model")
            .put("encoder.in_channels", e.in_channels)
            .put("encoder.patch_size", e.patch_size)
            .list("encoder.channels", &e.channels)
            .list("encoder.depths", &e.depths)
            .list("encoder.heads", &e.heads)
            .list("encoder.reductions", &e.reductions)
            .put("encoder.mlp_ratio", e.mlp_ratio)
            .put("encoder.share_cross_weights", e.share_cross_weights)
            .put("decoder.embed_dim", d.embed_dim)
            .put("decoder.num_classes", d.num_classes)
            .put("decoder.extra_layer", d.extra_layer)
            .put("decoder.share_heads", d.share_heads)
            .list("disc.channels", &self.discriminator.channels)
            .put("disc.leaky_slope", self.discriminator.leaky_slope)
            .comment("schedule")
            .put("seed", self.seed)
            .put("warmup_iterations", self.warmup_iterations)
            .put("iterations", self.iterations)
            .put("batch", self.batch)
            .put("lr", self.lr)
            .put("lr_warmup", self.lr_warmup)
            .put("weight_decay", self.weight_decay)
            .put("disc_lr", self.disc_lr)
            .put("eval_every", self.eval_every)
            .comment("losses and self-training")
            .put("beta1", self.loss.beta1)
            .put("beta2", self.loss.beta2)
            .put("class_weighting", self.class_weighting)
            .put("line_weight", self.line_weight)
            .put("tau", self.tau)
            .put("temperature", self.temperature)
            .put("ema_momentum", self.ema_momentum)
            .comment("components")
            .put("self_training", t.self_training)
            .put("adversarial", t.adversarial)
            .put("correction", t.correction)
            .put("cross_source", t.cross_source)
            .put("cross_target", t.cross_target)
            .comment("augmentation")
            .put("augment.flip", a.flip)
            .put("augment.photometric", a.photometric)
            .put("augment.crop", a.crop)
            .put("augment.brightness", a.brightness)
            .pair("augment.contrast", a.contrast)
            .put("augment.channel_jitter", a.channel_jitter);
        w.finish()
    }

    /// Parses a config file. Missing keys keep their defaults; unknown keys
    /// are a parse error.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = KvReader::parse(text)?;
        let mut c = Self::default();
        macro_rules! opt {
            ($field:expr, $key:expr) => {
                if let Some(v) = r.get($key)? {
                    $field = v;
                }
            };
        }
        macro_rules! opt_list {
            ($field:expr, $key:expr) => {
                if let Some(v) = r.list($key)? {
                    $field = v;
                }
            };
        }
        let e: &mut EncoderConfig = &mut c.model.encoder;
        opt!(e.in_channels, "encoder.in_channels");
        opt!(e.patch_size, "encoder.patch_size");
        opt_list!(e.channels, "encoder.channels");
        opt_list!(e.depths, "encoder.depths");
        opt_list!(e.heads, "encoder.heads");
        opt_list!(e.reductions, "encoder.reductions");
        opt!(e.mlp_ratio, "encoder.mlp_ratio");
        opt!(e.share_cross_weights, "encoder.share_cross_weights");
        let d: &mut DecoderConfig = &mut c.model.decoder;
        opt!(d.embed_dim, "decoder.embed_dim");
        opt!(d.num_classes, "decoder.num_classes");
        opt!(d.extra_layer, "decoder.extra_layer");
        opt!(d.share_heads, "decoder.share_heads");
        c.discriminator.in_channels = c.model.decoder.num_classes;
        opt_list!(c.discriminator.channels, "disc.channels");
        opt!(c.discriminator.leaky_slope, "disc.leaky_slope");
        opt!(c.seed, "seed");
        opt!(c.warmup_iterations, "warmup_iterations");
        opt!(c.iterations, "iterations");
        opt!(c.batch, "batch");
        opt!(c.lr, "lr");
        opt!(c.lr_warmup, "lr_warmup");
        opt!(c.weight_decay, "weight_decay");
        opt!(c.disc_lr, "disc_lr");
        opt!(c.eval_every, "eval_every");
        opt!(c.loss.beta1, "beta1");
        opt!(c.loss.beta2, "beta2");
        opt!(c.class_weighting, "class_weighting");
        opt!(c.line_weight, "line_weight");
        opt!(c.tau, "tau");
        opt!(c.temperature, "temperature");
        opt!(c.ema_momentum, "ema_momentum");
        let t = &mut c.toggles;
        opt!(t.self_training, "self_training");
        opt!(t.adversarial, "adversarial");
        opt!(t.correction, "correction");
        opt!(t.cross_source, "cross_source");
        opt!(t.cross_target, "cross_target");
        let a = &mut c.augment;
        opt!(a.flip, "augment.flip");
        opt!(a.photometric, "augment.photometric");
        opt!(a.crop, "augment.crop");
        opt!(a.brightness, "augment.brightness");
        if let Some(v) = r.pair("augment.contrast")? {
            a.contrast = v;
        }
        opt!(a.channel_jitter, "augment.channel_jitter");
        r.finish()?;
        c.validate()?;
        Ok(c)
    }

    /// Applies `key=value` overrides on top of this config. Each key must be
    /// one the config file accepts.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        Self::from_text(&crate::kv::apply_overrides(&self.to_text(), overrides)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(crate::error::file_err(path))?;
        Self::from_text(&text)
    }
}
