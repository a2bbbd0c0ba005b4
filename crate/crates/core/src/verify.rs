//! Self-check suite run by the `verify` command: gradient fidelity, shape
//! and degeneracy properties of the network, and the numerical oracles of
//! the adaptation machinery.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adaptation::{correct_pseudo_labels, pair_two_way, ssim, GrayImage, PrototypeBank, PseudoLabel};
use crate::autograd::{Tape, Var};
use crate::decoder::unify_and_upsample;
use crate::encoder::Branches;
use crate::error::{contract_err, Result};
use crate::gradcheck::param_gradient_check;
use crate::model::{class_softmax, infer_pair, infer_target_sourcefree, ModelConfig, QuadFormer};
use crate::objectives::{adversarial_losses, seg_cross_entropy, Discriminator, DiscriminatorConfig, LossWeights};
use crate::params::Binder;
use crate::tensor::Tensor;

/// Tolerance of the finite-difference gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Worst relative error of one parameter group.
#[derive(Clone, Debug)]
pub struct GroupError {
    pub name: String,
    pub error: f64,
}

/// Finite-difference check of the adaptation objective on a micro network
/// with 8×8 images, over every coordinate of every parameter.
///
/// Segmentation parameters are checked against
/// `l_seg_s + β1·l_seg_t + β2·g_loss`, discriminator
/// parameters against its own loss on detached masks.
pub fn objective_gradient_check(seed: u64) -> Result<Vec<GroupError>> {
    let mut r = rng(seed);
    let (model, mut store) = QuadFormer::init::<f64>(ModelConfig::micro(), seed)?;
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
    }
    let model_ids: Vec<_> = store.ids().collect();
    let disc = Discriminator::new(
        DiscriminatorConfig {
            channels: vec![3, 1],
            ..DiscriminatorConfig::default()
        },
        &mut store,
        &mut r,
    )?;
    let disc_ids: Vec<_> = store.ids().filter(|id| !model_ids.contains(id)).collect();
    let img_s = uniform(&[3, 8, 8], 0.0, 1.0, &mut r);
    let img_t = uniform(&[3, 8, 8], 0.0, 1.0, &mut r);
    let labels_s: Vec<u8> = (0..64).map(|_| r.random_range(0..2)).collect();
    let labels_t: Vec<u8> = (0..64).map(|_| r.random_range(0..2)).collect();
    let valid_t: Vec<bool> = (0..64).map(|_| r.random_bool(0.7)).collect();
    let weights = [1.0, 3.0];
    let loss_w = LossWeights::default();
    let every = |ids: &[crate::params::ParamId]| -> Vec<_> {
        ids.iter().map(|&id| (id, (0..store.get(id).len()).collect())).collect()
    };
    let name = |id| store.name(id).to_string();
    let mut groups = Vec::new();

    // Discriminator parameters enter only through the (constant) mask
    // inputs here, so only segmentation coordinates are checked.
    let seg = param_gradient_check(
        &store,
        |b| {
            let tape = b.tape();
            let out = model.forward_pair(
                b,
                tape.constant(img_s.clone()),
                tape.constant(img_t.clone()),
                Branches::default(),
            )?;
            let ls = out.source.logits.upsample_bilinear(8, 8)?;
            let lt = out.target.logits.upsample_bilinear(8, 8)?;
            let seg_s = seg_cross_entropy(ls, &labels_s, None, Some(&weights))?.loss;
            let seg_t = seg_cross_entropy(lt, &labels_t, Some(&valid_t), Some(&weights))?.loss;
            let z = disc.forward(b, class_softmax(lt)?)?;
            let g = z.neg()?.softplus()?.mean()?;
            crate::objectives::total_loss(seg_s, seg_t, g, loss_w)
        },
        &every(&model_ids),
        GRAD_STEP,
    )?;
    groups.extend(seg.into_iter().map(|(id, error)| GroupError { name: name(id), error }));

    let (ps, pt) = {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &store);
        let out = model.forward_pair(
            &b,
            tape.constant(img_s.clone()),
            tape.constant(img_t.clone()),
            Branches::default(),
        )?;
        let p = |v: Var<'_, f64>| -> Result<Tensor> {
            Ok(Tensor::clone(&class_softmax(v.upsample_bilinear(8, 8)?)?.value()))
        };
        (p(out.source.logits)?, p(out.target.logits)?)
    };
    let d = param_gradient_check(
        &store,
        |b| {
            let tape = b.tape();
            let zs = disc.forward(b, tape.constant(ps.clone()))?;
            let zt = disc.forward(b, tape.constant(pt.clone()))?;
            Ok(adversarial_losses(zs, zt, zt)?.d_loss)
        },
        &every(&disc_ids),
        GRAD_STEP,
    )?;
    groups.extend(d.into_iter().map(|(id, error)| GroupError { name: name(id), error }));
    Ok(groups)
}

/// Per-stage token counts, branch feature width and fused-input width of
/// the default model on a 64×64 pair.
pub struct ShapeChain {
    pub tokens: Vec<usize>,
    /// `[tokens × channels]` of one branch's unified features.
    pub branch_features: Vec<usize>,
    /// `[tokens × channels]` of the fused decoder input.
    pub fused_input: Vec<usize>,
    pub embed_dim: usize,
}

pub fn shape_chain(seed: u64) -> Result<ShapeChain> {
    let (model, store) = QuadFormer::init::<f64>(ModelConfig::q0(), seed)?;
    let mut r = rng(seed);
    let tape = Tape::new();
    let b = Binder::frozen(&tape, &store);
    let out = model.forward_pair(
        &b,
        tape.constant(uniform(&[3, 64, 64], 0.0, 1.0, &mut r)),
        tape.constant(uniform(&[3, 64, 64], 0.0, 1.0, &mut r)),
        Branches::default(),
    )?;
    let feats: Vec<_> = out.stages.iter().map(|s| (s.features.s, s.grid)).collect();
    let phi = unify_and_upsample(&b, &model.decoder.source, &feats)?;
    Ok(ShapeChain {
        tokens: out.stages.iter().map(|s| s.features.s.shape()[0]).collect(),
        branch_features: phi.shape(),
        fused_input: out.target.augmented.shape(),
        embed_dim: model.config.decoder.embed_dim,
    })
}

/// Largest deviation between cross and self features over all stages for
/// identical inputs, and whether source-free inference reproduces the
/// paired target mask exactly.
pub fn cross_degeneracy(seed: u64) -> Result<(f64, bool)> {
    let (model, store) = QuadFormer::init::<f64>(ModelConfig::q0(), seed)?;
    let img = uniform(&[3, 64, 64], 0.0, 1.0, &mut rng(seed));
    let tape = Tape::new();
    let b = Binder::frozen(&tape, &store);
    let out = model.forward_pair(
        &b,
        tape.constant(img.clone()),
        tape.constant(img.clone()),
        Branches::default(),
    )?;
    let mut worst = 0.0f64;
    for s in &out.stages {
        let f = &s.features;
        worst = worst.max(f.ts.value().max_abs_diff(&f.s.value()));
        worst = worst.max(f.st.value().max_abs_diff(&f.t.value()));
    }
    let free = infer_target_sourcefree(&model, &store, &img)?;
    let (_, paired) = infer_pair(&model, &store, &img, &img, Branches::default())?;
    Ok((worst, free == paired))
}

/// Mean SSIM straight from the definition, two-pass per window.
pub fn direct_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = 8.min(h).min(w);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let at = |img: &[f64], i: usize| img[(y + i / k) * w + x + i % k];
            let ma = (0..k * k).map(|i| at(a, i)).sum::<f64>() / n;
            let mb = (0..k * k).map(|i| at(b, i)).sum::<f64>() / n;
            let mut va = 0.0;
            let mut vb = 0.0;
            let mut cov = 0.0;
            for i in 0..k * k {
                let (da, db) = (at(a, i) - ma, at(b, i) - mb);
                va += da * da;
                vb += db * db;
                cov += da * db;
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn random_gray(h: usize, w: usize, r: &mut impl Rng) -> GrayImage {
    GrayImage::new(h, w, (0..h * w).map(|_| r.random_range(0.0..1.0)).collect()).expect("sizes agree")
}

/// Largest deviation from the direct formula over `pairs` random 16×16
/// images, and whether every self-similarity is exactly 1.
pub fn ssim_oracle(pairs: usize, seed: u64) -> Result<(f64, bool)> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut identity = true;
    for _ in 0..pairs {
        let a = random_gray(16, 16, &mut r);
        let b = random_gray(16, 16, &mut r);
        worst = worst.max((ssim(&a, &b)? - direct_ssim(&a.data, &b.data, 16, 16)).abs());
        identity &= ssim(&a, &a)? == 1.0;
    }
    Ok((worst, identity))
}

/// Deviation of `k` EMA steps toward a constant centroid from the closed
/// form `(1 − λ^k)·v`, starting from a zero prototype.
pub fn ema_closed_form(steps: u64, momentum: f64) -> Result<f64> {
    let v = [0.6, -0.8, 0.25];
    let mut bank = PrototypeBank::new(1, v.len(), momentum);
    bank.mark_initialized();
    for _ in 0..steps {
        bank.ema_update(0, &v)?;
    }
    let factor = 1.0 - momentum.powi(steps as i32);
    Ok(bank
        .prototype(0)
        .iter()
        .zip(v)
        .map(|(p, v)| (p - factor * v).abs())
        .fold(0.0, f64::max))
}

/// Fraction of flipped warm-up labels restored by correction on two noisy
/// antipodal clusters, the number of correct labels it broke, and the
/// largest deviation of any pixel's probabilities from summing to one.
pub fn denoising_oracle(seed: u64, side: usize, flip: f64) -> Result<(f64, usize, f64)> {
    let dim = 16;
    let mut r = rng(seed);
    let n = side * side;
    let mut mu: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
    let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
    mu.iter_mut().for_each(|v| *v /= norm);
    let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut flipped = vec![false; n];
    for &i in &order[..(flip * n as f64).round() as usize] {
        flipped[i] = true;
    }
    let mut feats = Vec::with_capacity(n * dim);
    for &y in &truth {
        let sign = if y == 0 { 1.0 } else { -1.0 };
        let f: Vec<f64> = mu
            .iter()
            .map(|&m| sign * m + 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut r))
            .collect();
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        feats.extend(f.iter().map(|v| v / norm));
    }
    let features = Tensor::new(&[n, dim], feats)?;
    let mut probs = vec![0.0; 2 * n];
    for i in 0..n {
        let label = truth[i] ^ usize::from(flipped[i]);
        probs[label * n + i] = 0.75;
        probs[(1 - label) * n + i] = 0.25;
    }
    let label = PseudoLabel::from_probs(0, Tensor::new(&[2, side, side], probs)?, 0.0)?;
    let mut bank = PrototypeBank::new(2, dim, 0.9999);
    for c in 0..2 {
        let w: Vec<f64> = truth.iter().map(|&y| if y == c { 1.0 } else { 0.0 }).collect();
        bank.accumulate(&features, c, &w)?;
    }
    bank.finish_init()?;
    let corrected = correct_pseudo_labels(&label, &features, (side, side), &bank, 0.1, 0.0)?;
    let hard = corrected.hard_labels();
    let flips = flipped.iter().filter(|&&f| f).count();
    let restored = (0..n).filter(|&i| flipped[i] && hard[i] as usize == truth[i]).count();
    let broken = (0..n).filter(|&i| !flipped[i] && hard[i] as usize != truth[i]).count();
    let p = corrected.probs.data();
    let norm_err = (0..n).map(|i| (p[i] + p[n + i] - 1.0).abs()).fold(0.0, f64::max);
    Ok((restored as f64 / flips.max(1) as f64, broken, norm_err))
}

/// Compares two-way pairing with an exhaustive search on random 5×5
/// corpora, then checks that every image is covered on random corpora.
/// Returns the number of mismatching corpora.
pub fn pairing_oracle(corpora: usize, seed: u64) -> Result<usize> {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..4 {
        let src: Vec<_> = (0..5).map(|_| random_gray(16, 16, &mut r)).collect();
        let tgt: Vec<_> = (0..5).map(|_| random_gray(16, 16, &mut r)).collect();
        let sim: Vec<Vec<f64>> = src
            .iter()
            .map(|s| tgt.iter().map(|t| direct_ssim(&s.resized(64, 64).data, &t.resized(64, 64).data, 64, 64)).collect())
            .collect();
        let best = |v: &mut dyn Iterator<Item = (usize, f64)>| {
            v.fold((0, f64::NEG_INFINITY), |b, (i, x)| if x > b.1 { (i, x) } else { b }).0
        };
        let mut want: Vec<(usize, usize)> = (0..5)
            .map(|s| (s, best(&mut sim[s].iter().copied().enumerate())))
            .chain((0..5).map(|t| (best(&mut (0..5).map(|s| (s, sim[s][t]))), t)))
            .collect();
        want.sort_unstable();
        want.dedup();
        let got: Vec<_> = pair_two_way(&src, &tgt)?.pairs.iter().map(|p| (p.source, p.target)).collect();
        bad += usize::from(got != want);
    }
    for _ in 0..corpora {
        let ns = r.random_range(1..7);
        let nt = r.random_range(1..7);
        let src: Vec<_> = (0..ns).map(|_| random_gray(16, 16, &mut r)).collect();
        let tgt: Vec<_> = (0..nt).map(|_| random_gray(16, 16, &mut r)).collect();
        let p = pair_two_way(&src, &tgt)?;
        let covered = (0..ns).all(|s| p.pairs.iter().any(|q| q.source == s))
            && (0..nt).all(|t| p.pairs.iter().any(|q| q.target == t));
        bad += usize::from(!covered);
    }
    Ok(bad)
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every check. Checks run on the calling thread so a backward fault
/// switched on by the caller is seen by the gradient checks.
pub fn run() -> Report {
    let mut checks = Vec::new();
    checks.push(timed("gradients", || {
        let groups = objective_gradient_check(7)?;
        let worst = groups
            .iter()
            .max_by(|a, b| a.error.total_cmp(&b.error))
            .ok_or_else(|| contract_err!("no parameters checked"))?;
        Ok((
            worst.error < GRAD_TOLERANCE,
            format!("{} groups, worst {:.2e} in {}", groups.len(), worst.error, worst.name),
        ))
    }));
    checks.push(timed("shape chain", || {
        let s = shape_chain(3)?;
        let ce = s.embed_dim;
        let ok = s.tokens == [256, 64, 16, 4]
            && s.branch_features == [256, 4 * ce]
            && s.fused_input == [256, 8 * ce];
        Ok((
            ok,
            format!("tokens {:?}, branch {:?}, fused {:?}", s.tokens, s.branch_features, s.fused_input),
        ))
    }));
    checks.push(timed("cross degeneracy", || {
        let (worst, exact) = cross_degeneracy(5)?;
        Ok((
            worst <= 1e-12 && exact,
            format!("max deviation {worst:.1e}, source-free equals paired: {exact}"),
        ))
    }));
    checks.push(timed("ssim oracle", || {
        let (worst, identity) = ssim_oracle(100, 11)?;
        Ok((
            worst <= 1e-9 && identity,
            format!("max deviation {worst:.1e}, self-similarity exactly 1: {identity}"),
        ))
    }));
    checks.push(timed("ema closed form", || {
        let err = ema_closed_form(10_000, 0.9999)?;
        Ok((err <= 1e-9, format!("deviation {err:.1e} after 10000 steps")))
    }));
    checks.push(timed("label denoising", || {
        let (restored, broken, norm) = denoising_oracle(13, 20, 0.2)?;
        Ok((
            restored >= 0.95 && norm <= 1e-12,
            format!("restored {:.1}% of flips, broke {broken}, normalization error {norm:.1e}", 100.0 * restored),
        ))
    }));
    checks.push(timed("pairing", || {
        let bad = pairing_oracle(100, 17)?;
        Ok((bad == 0, format!("{bad} failing corpora")))
    }));
    Report { checks }
}
