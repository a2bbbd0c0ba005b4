//! All-MLP cross-domain decoder and the source-free inference path.

use std::cell::RefCell;

use rand::Rng;

use crate::autograd::Var;
use crate::encoder::{QuadFeatures, StageOutput};
use crate::error::{shape_err, Error, Result};
use crate::nn::{map_to_tokens, tokens_to_map, Linear};
use crate::params::{Binder, ParamStore};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Unified channel width `C_e`.
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Extra `C_e → C_e` hidden layer between fuse and classifier.
    pub extra_layer: bool,
    /// Source and target masks use one set of decoder weights.
    pub share_heads: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_classes: 2,
            extra_layer: false,
            share_heads: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("decoder embed_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DecoderHead {
    pub unify: Vec<Linear>,
    pub fuse: Linear,
    pub extra: Option<Linear>,
    pub classify: Linear,
}

impl DecoderHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        stage_channels: &[usize],
        cfg: &DecoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let ce = cfg.embed_dim;
        let n = stage_channels.len();
        Self {
            unify: stage_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| Linear::new(store, &format!("{name}.unify{i}"), c, ce, rng))
                .collect(),
            fuse: Linear::new(store, &format!("{name}.fuse"), 2 * n * ce, ce, rng),
            extra: cfg
                .extra_layer
                .then(|| Linear::new(store, &format!("{name}.extra"), ce, ce, rng)),
            classify: Linear::new(store, &format!("{name}.classify"), ce, cfg.num_classes, rng),
        }
    }
}

/// Maps every stage of one branch to `C_e` channels, upsamples to the
/// stage-1 grid and concatenates: `[(H/4·W/4) × (stages·C_e)]`.
pub fn unify_and_upsample<'t, T: Real>(
    b: &Binder<'t, T>,
    head: &DecoderHead,
    stage_feats: &[(Var<'t, T>, (usize, usize))],
) -> Result<Var<'t, T>> {
    if stage_feats.len() != head.unify.len() {
        return Err(shape_err!(
            "decoder expects {} stages, got {}",
            head.unify.len(),
            stage_feats.len()
        ));
    }
    let (h0, w0) = stage_feats[0].1;
    let parts = stage_feats
        .iter()
        .zip(&head.unify)
        .map(|(&(x, (h, w)), lin)| {
            let y = lin.forward(b, x)?;
            if (h, w) == (h0, w0) {
                return Ok(y);
            }
            let up = tokens_to_map(y, h, w)?.upsample_bilinear(h0, w0)?;
            Ok(map_to_tokens(up)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Var::concat_last(&parts)
}

/// Decoder output for one mask.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput<'t, T: Real> {
    /// `[classes × h × w]` logits on the stage-1 grid.
    pub logits: Var<'t, T>,
    /// Augmented representation `[φ_a, φ_b]`, `[(h·w) × 2·stages·C_e]`.
    pub augmented: Var<'t, T>,
    pub grid: (usize, usize),
}

/// Concatenates `[φ_a, φ_b]`, fuses to `C_e` and classifies.
pub fn fuse_and_predict<'t, T: Real>(
    b: &Binder<'t, T>,
    head: &DecoderHead,
    phi_a: Var<'t, T>,
    phi_b: Var<'t, T>,
    grid: (usize, usize),
) -> Result<HeadOutput<'t, T>> {
    if phi_a.shape() != phi_b.shape() {
        return Err(shape_err!(
            "fuse: φ shapes differ, {:?} vs {:?}",
            phi_a.shape(),
            phi_b.shape()
        ));
    }
    let augmented = Var::concat_last(&[phi_a, phi_b])?;
    let mut x = head.fuse.forward(b, augmented)?.gelu()?;
    if let Some(extra) = &head.extra {
        x = extra.forward(b, x)?.gelu()?;
    }
    let logits = tokens_to_map(head.classify.forward(b, x)?, grid.0, grid.1)?;
    Ok(HeadOutput {
        logits,
        augmented,
        grid,
    })
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub source: DecoderHead,
    pub target: Option<DecoderHead>,
}

impl Decoder {
    pub fn new<T: Real>(
        config: DecoderConfig,
        stage_channels: &[usize],
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let source = DecoderHead::new(store, "decoder", stage_channels, &config, rng);
        let target = (!config.share_heads)
            .then(|| DecoderHead::new(store, "decoder.target", stage_channels, &config, rng));
        Ok(Self {
            config,
            source,
            target,
        })
    }

    pub fn target_head(&self) -> &DecoderHead {
        self.target.as_ref().unwrap_or(&self.source)
    }

    /// Source mask from `[φ_s, φ_ts]`, target mask from `[φ_t, φ_st]`.
    pub fn forward_pair<'t, T: Real>(
        &self,
        b: &Binder<'t, T>,
        stages: &[StageOutput<'t, T>],
    ) -> Result<(HeadOutput<'t, T>, HeadOutput<'t, T>)> {
        let grid = stages
            .first()
            .ok_or_else(|| shape_err!("decoder needs at least one stage"))?
            .grid;
        let src = BranchCache::new(b, &self.source, stages);
        let source =
            fuse_and_predict(b, &self.source, src.phi(|q| q.s)?, src.phi(|q| q.ts)?, grid)?;
        let th = self.target_head();
        let tgt_owned;
        let tgt = if self.target.is_some() {
            tgt_owned = BranchCache::new(b, th, stages);
            &tgt_owned
        } else {
            &src
        };
        let target = fuse_and_predict(b, th, tgt.phi(|q| q.t)?, tgt.phi(|q| q.st)?, grid)?;
        Ok((source, target))
    }

    /// Target mask from `[φ_t, φ_t]`; no source features involved.
    pub fn forward_target_only<'t, T: Real>(
        &self,
        b: &Binder<'t, T>,
        stages: &[StageOutput<'t, T>],
    ) -> Result<HeadOutput<'t, T>> {
        let grid = stages
            .first()
            .ok_or_else(|| shape_err!("decoder needs at least one stage"))?
            .grid;
        let th = self.target_head();
        let cache = BranchCache::new(b, th, stages);
        let phi_t = cache.phi(|q| q.t)?;
        fuse_and_predict(b, th, phi_t, phi_t, grid)
    }
}

/// Memoises φ per distinct feature stream so aliased branches are unified once.
struct BranchCache<'a, 't, T: Real> {
    binder: &'a Binder<'t, T>,
    head: &'a DecoderHead,
    stages: &'a [StageOutput<'t, T>],
    memo: RefCell<Vec<(Vec<usize>, Var<'t, T>)>>,
}

impl<'a, 't, T: Real> BranchCache<'a, 't, T> {
    fn new(
        binder: &'a Binder<'t, T>,
        head: &'a DecoderHead,
        stages: &'a [StageOutput<'t, T>],
    ) -> Self {
        Self {
            binder,
            head,
            stages,
            memo: RefCell::new(Vec::new()),
        }
    }

    fn phi(&self, pick: impl Fn(&QuadFeatures<Var<'t, T>>) -> Var<'t, T>) -> Result<Var<'t, T>> {
        let feats: Vec<_> = self
            .stages
            .iter()
            .map(|s| (pick(&s.features), s.grid))
            .collect();
        let key: Vec<usize> = feats.iter().map(|f| f.0.id()).collect();
        if let Some((_, v)) = self.memo.borrow().iter().find(|(k, _)| *k == key) {
            return Ok(*v);
        }
        let v = unify_and_upsample(self.binder, self.head, &feats)?;
        self.memo.borrow_mut().push((key, v));
        Ok(v)
    }
}
