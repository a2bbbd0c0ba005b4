//! Hierarchical quadruple transformer encoder.
//!
//! Every block carries four token streams: the two self-attentive branches
//! (`s`, `t`) and the two cross-attentive branches. `ts` (target-aware
//! source) holds source queries attending to target keys/values; `st`
//! (source-aware target) holds target queries attending to source
//! keys/values. Attention has no positional encoding; the depthwise
//! convolution inside Mix-FFN supplies locality.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{map_to_tokens, tokens_to_map, Conv2d, LayerNorm, Linear};
use crate::params::{Binder, ParamStore};
use crate::scalar::Real;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub patch_size: usize,
    pub channels: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub reductions: Vec<usize>,
    pub mlp_ratio: usize,
    /// One attention/FFN weight set for all four branches of a block.
    pub share_cross_weights: bool,
}

impl EncoderConfig {
    /// Desk-scale "Q0": MiT-B0 proportions at quarter width.
    pub fn q0() -> Self {
        Self {
            in_channels: 3,
            patch_size: 4,
            channels: vec![8, 16, 32, 64],
            depths: vec![1, 1, 1, 1],
            heads: vec![1, 1, 2, 4],
            reductions: vec![8, 4, 2, 1],
            mlp_ratio: 4,
            share_cross_weights: true,
        }
    }

    /// Tiny four-stage configuration for gradient checks on 8×8 images.
    pub fn micro() -> Self {
        Self {
            in_channels: 3,
            patch_size: 4,
            channels: vec![4, 4, 4, 4],
            depths: vec![1, 1, 1, 1],
            heads: vec![1, 2, 1, 1],
            reductions: vec![2, 1, 1, 1],
            mlp_ratio: 2,
            share_cross_weights: true,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    pub fn stage(&self, i: usize) -> StageConfig {
        StageConfig {
            channels: self.channels[i],
            depth: self.depths[i],
            heads: self.heads[i],
            reduction: self.reductions[i],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.depths.len() != n || self.heads.len() != n || self.reductions.len() != n {
            return Err(Error::Config(format!(
                "encoder stage lists disagree in length: channels {:?}, depths {:?}, heads {:?}, reductions {:?}",
                self.channels, self.depths, self.heads, self.reductions
            )));
        }
        for i in 0..n {
            let s = self.stage(i);
            if s.heads == 0 || s.channels % s.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: {} channels not divisible by {} heads",
                    s.channels, s.heads
                )));
            }
            if s.reduction == 0 || s.depth == 0 {
                return Err(Error::Config(format!(
                    "stage {i}: depth and reduction must be positive"
                )));
            }
        }
        if self.patch_size == 0 || self.mlp_ratio == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "patch size, mlp ratio and input channels must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub reduction: usize,
}

impl StageConfig {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// The four per-stage feature streams, all `[N×C]` tokens of one grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadFeatures<V> {
    /// Source-aware (self-attention on source).
    pub s: V,
    /// Target-aware (self-attention on target).
    pub t: V,
    /// Target-aware source: source queries over target keys/values.
    pub ts: V,
    /// Source-aware target: target queries over source keys/values.
    pub st: V,
}

impl<V> QuadFeatures<V> {
    pub fn map<U>(self, mut f: impl FnMut(V) -> U) -> QuadFeatures<U> {
        QuadFeatures {
            s: f(self.s),
            t: f(self.t),
            ts: f(self.ts),
            st: f(self.st),
        }
    }

    pub fn try_map<U>(self, mut f: impl FnMut(V) -> Result<U>) -> Result<QuadFeatures<U>> {
        Ok(QuadFeatures {
            s: f(self.s)?,
            t: f(self.t)?,
            ts: f(self.ts)?,
            st: f(self.st)?,
        })
    }
}

/// Which cross-attention branches are computed. A disabled branch is
/// replaced by its self-attentive counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub cross_source: bool,
    pub cross_target: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            cross_source: true,
            cross_target: true,
        }
    }
}

/// Efficient multi-head attention with spatially reduced keys and values.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub reduce: Option<(Conv2d, LayerNorm)>,
    pub heads: usize,
    pub reduction: usize,
}

impl Attention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        stage: StageConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let c = stage.channels;
        let reduce = (stage.reduction > 1).then(|| {
            (
                Conv2d::new(
                    store,
                    &format!("{name}.sr"),
                    c,
                    c,
                    stage.reduction,
                    stage.reduction,
                    0,
                    1,
                    rng,
                ),
                LayerNorm::new(store, &format!("{name}.sr_norm"), c, LN_EPS),
            )
        });
        Self {
            query: Linear::new(store, &format!("{name}.q"), c, c, rng),
            key: Linear::new(store, &format!("{name}.k"), c, c, rng),
            value: Linear::new(store, &format!("{name}.v"), c, c, rng),
            proj: Linear::new(store, &format!("{name}.proj"), c, c, rng),
            reduce,
            heads: stage.heads,
            reduction: stage.reduction,
        }
    }
}

/// R×R non-overlapping fold of a token grid with a learned projection back
/// to `C` channels. `R = 1` is the identity.
pub fn sequence_reduce<'t, T: Real>(
    b: &Binder<'t, T>,
    attn: &Attention,
    x: Var<'t, T>,
    (h, w): (usize, usize),
) -> Result<Var<'t, T>> {
    let r = attn.reduction;
    if h % r != 0 || w % r != 0 {
        return Err(shape_err!(
            "sequence reduction ratio {r} does not divide the {h}x{w} grid"
        ));
    }
    match &attn.reduce {
        None => Ok(x),
        Some((conv, norm)) => {
            let map = tokens_to_map(x, h, w)?;
            let (tokens, _, _) = map_to_tokens(conv.forward(b, map)?)?;
            norm.forward(b, tokens)
        }
    }
}

/// Multi-head attention of `x_query` over `x_kv` (whose grid is `kv_grid`).
/// Output projection applied, residual not added.
pub fn attention<'t, T: Real>(
    b: &Binder<'t, T>,
    attn: &Attention,
    x_query: Var<'t, T>,
    x_kv: Var<'t, T>,
    kv_grid: (usize, usize),
) -> Result<Var<'t, T>> {
    let (cq, ckv) = (x_query.shape()[1], x_kv.shape()[1]);
    if cq != ckv {
        return Err(shape_err!(
            "attention channel mismatch: queries {cq}, keys/values {ckv}"
        ));
    }
    let kv = sequence_reduce(b, attn, x_kv, kv_grid)?;
    let q = attn.query.forward(b, x_query)?;
    let k = attn.key.forward(b, kv)?;
    let v = attn.value.forward(b, kv)?;
    let d = cq / attn.heads;
    let scale = T::one() / T::from_usize_lossy(d).sqrt();
    let head = |q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>| -> Result<Var<'t, T>> {
        q.matmul(k.transpose()?)?.scale(scale)?.softmax()?.matmul(v)
    };
    let out = if attn.heads == 1 {
        head(q, k, v)?
    } else {
        let parts = (0..attn.heads)
            .map(|i| {
                head(
                    q.narrow_last(i * d, d)?,
                    k.narrow_last(i * d, d)?,
                    v.narrow_last(i * d, d)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Var::concat_last(&parts)?
    };
    attn.proj.forward(b, out)
}

/// Efficient multi-head self-attention.
pub fn emsa<'t, T: Real>(
    b: &Binder<'t, T>,
    attn: &Attention,
    x: Var<'t, T>,
    grid: (usize, usize),
) -> Result<Var<'t, T>> {
    attention(b, attn, x, x, grid)
}

/// Efficient multi-head cross-attention: queries from one domain, keys and
/// values from the other, with the same weights as [`emsa`].
pub fn emca<'t, T: Real>(
    b: &Binder<'t, T>,
    attn: &Attention,
    x_query: Var<'t, T>,
    x_kv: Var<'t, T>,
    kv_grid: (usize, usize),
) -> Result<Var<'t, T>> {
    attention(b, attn, x_query, x_kv, kv_grid)
}

#[derive(Clone, Debug)]
pub struct MixFfn {
    pub fc1: Linear,
    pub dwconv: Conv2d,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = c * ratio;
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), c, hidden, rng),
            dwconv: Conv2d::new(
                store,
                &format!("{name}.dwconv"),
                hidden,
                hidden,
                3,
                1,
                1,
                hidden,
                rng,
            ),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, c, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.fc1.out_dim
    }
}

/// MLP → depthwise 3×3 conv → GELU → MLP. Residual not added.
pub fn mix_ffn<'t, T: Real>(
    b: &Binder<'t, T>,
    ffn: &MixFfn,
    x: Var<'t, T>,
    (h, w): (usize, usize),
) -> Result<Var<'t, T>> {
    let n = x.shape()[0];
    if n != h * w {
        return Err(shape_err!("mix_ffn: {n} tokens do not form a {h}x{w} grid"));
    }
    let hidden = ffn.fc1.forward(b, x)?;
    let map = ffn.dwconv.forward(b, tokens_to_map(hidden, h, w)?)?;
    let (tokens, _, _) = map_to_tokens(map)?;
    ffn.fc2.forward(b, tokens.gelu()?)
}

/// Pre-norm, attention and Mix-FFN weights of one branch family.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub norm: LayerNorm,
    pub attn: Attention,
    pub ffn: MixFfn,
}

impl BlockWeights {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        stage: StageConfig,
        ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), stage.channels, LN_EPS),
            attn: Attention::new(store, &format!("{name}.attn"), stage, rng),
            ffn: MixFfn::new(store, &format!("{name}.ffn"), stage.channels, ratio, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct QuadBlock {
    pub self_weights: BlockWeights,
    /// Separate weights for the cross branches; `None` means shared.
    pub cross_weights: Option<BlockWeights>,
}

impl QuadBlock {
    pub fn cross(&self) -> &BlockWeights {
        self.cross_weights.as_ref().unwrap_or(&self.self_weights)
    }
}

/// One quadruple transformer block.
///
/// ```text
/// ŝ  = EMSA(LN s)          + s        s'  = FFN(ŝ)  + ŝ
/// t̂  = EMSA(LN t)          + t        t'  = FFN(t̂)  + t̂
/// tŝ = EMCA(LN s ← LN t)   + ts       ts' = FFN(tŝ) + tŝ
/// st̂ = EMCA(LN t ← LN s)   + st       st' = FFN(st̂) + st̂
/// ```
///
/// Cross branches add their own previous activation as the residual.
pub fn quad_block<'t, T: Real>(
    b: &Binder<'t, T>,
    block: &QuadBlock,
    x: QuadFeatures<Var<'t, T>>,
    grid: (usize, usize),
    branches: Branches,
) -> Result<QuadFeatures<Var<'t, T>>> {
    let shape = x.s.shape();
    for (name, v) in [("t", x.t), ("ts", x.ts), ("st", x.st)] {
        if v.shape() != shape {
            return Err(shape_err!(
                "quad_block: branch {name} {:?} differs from {:?}",
                v.shape(),
                shape
            ));
        }
    }
    let sw = &block.self_weights;
    let ls = sw.norm.forward(b, x.s)?;
    let lt = sw.norm.forward(b, x.t)?;
    let finish = |w: &BlockWeights, hat: Var<'t, T>| -> Result<Var<'t, T>> {
        mix_ffn(b, &w.ffn, hat, grid)?.add(hat)
    };

    let s = finish(sw, emsa(b, &sw.attn, ls, grid)?.add(x.s)?)?;
    let t = finish(sw, emsa(b, &sw.attn, lt, grid)?.add(x.t)?)?;

    let cw = block.cross();
    let (cls, clt) = if block.cross_weights.is_some() {
        (cw.norm.forward(b, x.s)?, cw.norm.forward(b, x.t)?)
    } else {
        (ls, lt)
    };
    let ts = if branches.cross_source {
        finish(cw, emca(b, &cw.attn, cls, clt, grid)?.add(x.ts)?)?
    } else {
        s
    };
    let st = if branches.cross_target {
        finish(cw, emca(b, &cw.attn, clt, cls, grid)?.add(x.st)?)?
    } else {
        t
    };
    Ok(QuadFeatures { s, t, ts, st })
}

/// Patch embedding (stage 0) or overlapped patch merging (later stages),
/// followed by layer norm.
#[derive(Clone, Debug)]
pub struct Embed {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

fn embed<'t, T: Real>(
    b: &Binder<'t, T>,
    e: &Embed,
    map: Var<'t, T>,
) -> Result<(Var<'t, T>, usize, usize)> {
    let (tokens, h, w) = map_to_tokens(e.conv.forward(b, map)?)?;
    Ok((e.norm.forward(b, tokens)?, h, w))
}

/// Non-overlapping 4×4 patch projection of a `[3×H×W]` image to
/// `[(H/4·W/4)×C₁]` tokens in row-major order.
pub fn patch_embed<'t, T: Real>(
    b: &Binder<'t, T>,
    e: &Embed,
    img: Var<'t, T>,
) -> Result<(Var<'t, T>, (usize, usize))> {
    let (_, h, w) = img.value().dims3()?;
    let p = e.conv.stride;
    if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
        return Err(shape_err!(
            "image {h}x{w} is not divisible by patch size {p}"
        ));
    }
    let (tokens, gh, gw) = embed(b, e, img)?;
    Ok((tokens, (gh, gw)))
}

/// 2× spatial downsampling with channel projection (3×3 stride-2 conv).
///
/// Each grid side must be even; a side of 1 stays 1.
pub fn patch_merge<'t, T: Real>(
    b: &Binder<'t, T>,
    e: &Embed,
    x: Var<'t, T>,
    (h, w): (usize, usize),
) -> Result<(Var<'t, T>, (usize, usize))> {
    if (h % 2 != 0 && h != 1) || (w % 2 != 0 && w != 1) {
        return Err(shape_err!("patch_merge needs an even grid, got {h}x{w}"));
    }
    let (tokens, gh, gw) = embed(b, e, tokens_to_map(x, h, w)?)?;
    Ok((tokens, (gh, gw)))
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub config: StageConfig,
    pub embed: Embed,
    pub blocks: Vec<QuadBlock>,
    pub norm: LayerNorm,
}

/// Encoder output for one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput<'t, T: Real> {
    pub features: QuadFeatures<Var<'t, T>>,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Real>(
        config: EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.num_stages());
        let mut prev = config.in_channels;
        for i in 0..config.num_stages() {
            let sc = config.stage(i);
            let name = format!("encoder.stage{i}");
            let conv = if i == 0 {
                let p = config.patch_size;
                Conv2d::new(
                    store,
                    &format!("{name}.patch_embed"),
                    prev,
                    sc.channels,
                    p,
                    p,
                    0,
                    1,
                    rng,
                )
            } else {
                Conv2d::new(
                    store,
                    &format!("{name}.patch_merge"),
                    prev,
                    sc.channels,
                    3,
                    2,
                    1,
                    1,
                    rng,
                )
            };
            let embed = Embed {
                conv,
                norm: LayerNorm::new(store, &format!("{name}.embed_norm"), sc.channels, LN_EPS),
            };
            let blocks = (0..sc.depth)
                .map(|j| {
                    let bn = format!("{name}.block{j}");
                    let self_weights = BlockWeights::new(store, &bn, sc, config.mlp_ratio, rng);
                    let cross_weights = (!config.share_cross_weights).then(|| {
                        BlockWeights::new(store, &format!("{bn}.cross"), sc, config.mlp_ratio, rng)
                    });
                    QuadBlock {
                        self_weights,
                        cross_weights,
                    }
                })
                .collect();
            let norm = LayerNorm::new(store, &format!("{name}.norm"), sc.channels, LN_EPS);
            stages.push(Stage {
                config: sc,
                embed,
                blocks,
                norm,
            });
            prev = sc.channels;
        }
        Ok(Self { config, stages })
    }

    /// Four-branch forward of an image pair.
    ///
    /// Cross branches start from the embedded tokens of their query domain:
    /// `ts⁰ = s⁰`, `st⁰ = t⁰`.
    pub fn forward<'t, T: Real>(
        &self,
        b: &Binder<'t, T>,
        img_s: Var<'t, T>,
        img_t: Var<'t, T>,
        branches: Branches,
    ) -> Result<Vec<StageOutput<'t, T>>> {
        if img_s.shape() != img_t.shape() {
            return Err(shape_err!(
                "source image {:?} and target image {:?} differ in size",
                img_s.shape(),
                img_t.shape()
            ));
        }
        let mut outputs = Vec::with_capacity(self.stages.len());
        let mut feats: Option<(QuadFeatures<Var<'t, T>>, (usize, usize))> = None;
        for stage in &self.stages {
            let (mut x, grid) = match feats {
                None => {
                    let (s, grid) = patch_embed(b, &stage.embed, img_s)?;
                    let (t, _) = patch_embed(b, &stage.embed, img_t)?;
                    (QuadFeatures { s, t, ts: s, st: t }, grid)
                }
                Some((prev, grid)) => merge_all(b, &stage.embed, prev, grid, branches)?,
            };
            for block in &stage.blocks {
                x = quad_block(b, block, x, grid, branches)?;
            }
            let s = stage.norm.forward(b, x.s)?;
            let t = stage.norm.forward(b, x.t)?;
            let x = QuadFeatures {
                s,
                t,
                ts: if branches.cross_source {
                    stage.norm.forward(b, x.ts)?
                } else {
                    s
                },
                st: if branches.cross_target {
                    stage.norm.forward(b, x.st)?
                } else {
                    t
                },
            };
            outputs.push(StageOutput { features: x, grid });
            feats = Some((x, grid));
        }
        Ok(outputs)
    }

    /// Single-image forward: only the self-attentive branch is computed and
    /// all four streams alias it. Equals [`Encoder::forward`] with both
    /// inputs set to `img`, branch for branch.
    pub fn forward_single<'t, T: Real>(
        &self,
        b: &Binder<'t, T>,
        img: Var<'t, T>,
    ) -> Result<Vec<StageOutput<'t, T>>> {
        let mut outputs = Vec::with_capacity(self.stages.len());
        let mut prev: Option<(Var<'t, T>, (usize, usize))> = None;
        for stage in &self.stages {
            let (mut x, grid) = match prev {
                None => patch_embed(b, &stage.embed, img)?,
                Some((x, grid)) => patch_merge(b, &stage.embed, x, grid)?,
            };
            for block in &stage.blocks {
                let w = &block.self_weights;
                let hat = emsa(b, &w.attn, w.norm.forward(b, x)?, grid)?.add(x)?;
                x = mix_ffn(b, &w.ffn, hat, grid)?.add(hat)?;
            }
            let x = stage.norm.forward(b, x)?;
            outputs.push(StageOutput {
                features: QuadFeatures {
                    s: x,
                    t: x,
                    ts: x,
                    st: x,
                },
                grid,
            });
            prev = Some((x, grid));
        }
        Ok(outputs)
    }
}

fn merge_all<'t, T: Real>(
    b: &Binder<'t, T>,
    e: &Embed,
    x: QuadFeatures<Var<'t, T>>,
    grid: (usize, usize),
    branches: Branches,
) -> Result<(QuadFeatures<Var<'t, T>>, (usize, usize))> {
    let (s, g) = patch_merge(b, e, x.s, grid)?;
    let (t, _) = patch_merge(b, e, x.t, grid)?;
    let ts = if branches.cross_source {
        patch_merge(b, e, x.ts, grid)?.0
    } else {
        s
    };
    let st = if branches.cross_target {
        patch_merge(b, e, x.st, grid)?.0
    } else {
        t
    };
    Ok((QuadFeatures { s, t, ts, st }, g))
}
