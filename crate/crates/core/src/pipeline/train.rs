//! Source-only warm-up and the adaptation stage.
//!
//! Each step draws its randomness from a generator keyed by (seed, stage,
//! step), and per-image gradients are computed in parallel but summed in
//! batch order, so a run is reproducible bit for bit regardless of thread
//! count and can be resumed from any saved step.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{put_prefixed, restore_exact, take_prefixed, Checkpoint, Stage};
use super::eval::evaluate;
use crate::adaptation::{
    batch_prototype, correct_pseudo_labels, normalize_rows, pair_two_way, pool_probs,
    pseudo_class_weights, GrayImage, PairSet, PrototypeBank, Provenance, PseudoLabel, PseudoLabelSet,
};
use crate::autograd::Tape;
use crate::config::RunConfig;
use crate::data::{augment, augment::photometric, Dataset, Domain, Geometry, Sample};
use crate::error::{contract_err, file_err, Result};
use crate::model::{class_softmax, QuadFormer};
use crate::objectives::{adversarial_losses, seg_cross_entropy, AdamW, Discriminator, LrSchedule};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "step,l_seg_s,l_seg_t,d_loss,g_loss,lr,target_iou\n";
pub const PSEUDO_DIR: &str = "pseudo";
pub const PAIRS_FILE: &str = "pairs.tsv";

const WARMUP_SALT: u64 = 0x7761_726d_7570;
const ADAPT_SALT: u64 = 0x6164_6170_7400;
const DISC_SALT: u64 = 0xd15c_0000;

/// Controls that do not change what a run computes.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from the checkpoint in this directory.
    pub resume: Option<PathBuf>,
    /// Save and return after this many completed steps.
    pub stop_after: Option<u64>,
    /// Pair list to use instead of computing one (adaptation only).
    pub pairs: Option<PathBuf>,
}

fn step_rng(seed: u64, salt: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ salt);
    r.set_stream(step);
    r
}

fn class_weights(config: &RunConfig) -> Option<Vec<f64>> {
    config.class_weighting.then(|| {
        let mut w = vec![1.0; config.model.decoder.num_classes];
        w[1] = config.line_weight;
        w
    })
}

/// Sums per-image gradients in order and divides by the batch size.
fn mean_grads(parts: impl Iterator<Item = Vec<Tensor>>, n: usize) -> Vec<Tensor> {
    let mut acc: Option<Vec<Tensor>> = None;
    for g in parts {
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    x.data_mut().iter_mut().zip(y.data()).for_each(|(p, q)| *p += q);
                }
            }
        }
    }
    let scale = 1.0 / n as f64;
    let mut acc = acc.unwrap_or_default();
    acc.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
    acc
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

struct LogRow {
    step: u64,
    l_seg_s: f64,
    l_seg_t: Option<f64>,
    d_loss: Option<f64>,
    g_loss: Option<f64>,
    lr: f64,
    target_iou: Option<f64>,
}

impl LogRow {
    fn append(&self, log: &mut String) {
        let _ = writeln!(
            log,
            "{},{:.6},{},{},{},{:e},{}",
            self.step,
            self.l_seg_s,
            fmt_opt(self.l_seg_t),
            fmt_opt(self.d_loss),
            fmt_opt(self.g_loss),
            self.lr,
            fmt_opt(self.target_iou)
        );
    }
}

fn due(config: &RunConfig, step: u64, total: u64) -> bool {
    step == total || (config.eval_every > 0 && step % config.eval_every == 0)
}

fn resume_from(dir: &Path, stage: Stage, config: &RunConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(dir)?;
    if ck.stage != stage {
        return Err(contract_err!(
            "{} holds a {} checkpoint, expected {}",
            dir.display(),
            ck.stage.name(),
            stage.name()
        ));
    }
    if ck.config != *config {
        return Err(contract_err!("{} was written with a different configuration", dir.display()));
    }
    Ok(ck)
}

#[derive(Clone, Debug)]
pub struct WarmupOutcome {
    pub checkpoint: Checkpoint,
    /// Set when the stage completed.
    pub pseudo_labels: Option<PseudoLabelSet>,
    pub source_val_iou: Option<f64>,
    pub target_val_iou: Option<f64>,
}

fn warmup_element(
    model: &QuadFormer,
    store: &ParamStore,
    sample: &Sample,
    weights: Option<&[f64]>,
) -> Result<(Vec<Tensor>, f64)> {
    let tape = Tape::new();
    let b = Binder::new(&tape, store);
    let (_, h, w) = sample.image.dims3()?;
    let out = model.forward_source_single(&b, tape.constant(sample.image.clone()))?;
    let loss = seg_cross_entropy(out.logits.upsample_bilinear(h, w)?, &sample.label, None, weights)?;
    let grads = loss.loss.backward()?;
    Ok((b.gradients(&grads), loss.loss.value().item()))
}

/// Source-only training. On completion the source-free predictions on the
/// target training images are written to `<out>/pseudo` as warm-up labels.
pub fn run_warmup(config: &RunConfig, data: &Dataset, out: &Path, opts: &RunOptions) -> Result<WarmupOutcome> {
    config.validate()?;
    let (model, mut store) = QuadFormer::init::<f64>(config.model.clone(), config.seed)?;
    let total = config.warmup_iterations;
    let mut opt = AdamW::new(config.optimizer(), &store);
    let mut log = LOG_HEADER.to_string();
    let mut start = 0;
    if let Some(dir) = &opts.resume {
        let ck = resume_from(dir, Stage::Warmup, config)?;
        restore_exact(&mut store, &ck.params, "model")?;
        opt = AdamW::from_state(config.optimizer(), &store, &take_prefixed(&ck.state, "opt."))?;
        start = ck.step;
        log = ck.log;
    }
    let sources = data.source_train()?;
    let target_val = data.target_val()?;
    let schedule = config.schedule(total);
    let weights = class_weights(config);
    let end = opts.stop_after.map_or(total, |s| s.min(total)).max(start);
    for step in start + 1..=end {
        let mut rng = step_rng(config.seed, WARMUP_SALT, step);
        let batch: Vec<Sample> = (0..config.batch)
            .map(|_| {
                let i = rng.random_range(0..sources.len());
                augment(&sources[i], &config.augment, &mut rng)
            })
            .collect();
        let parts = batch
            .par_iter()
            .map(|s| warmup_element(&model, &store, s, weights.as_deref()))
            .collect::<Result<Vec<_>>>()?;
        let loss = parts.iter().map(|p| p.1).sum::<f64>() / parts.len() as f64;
        let grads = mean_grads(parts.into_iter().map(|p| p.0), config.batch);
        let lr = schedule.lr(step);
        opt.update(&mut store, &grads, lr)?;
        let target_iou = if due(config, step, total) {
            Some(evaluate(&model, &store, &target_val)?.0.iou())
        } else {
            None
        };
        LogRow {
            step,
            l_seg_s: loss,
            l_seg_t: None,
            d_loss: None,
            g_loss: None,
            lr,
            target_iou,
        }
        .append(&mut log);
        log::debug!("warmup step {step}/{total} loss {loss:.4}");
    }
    let mut state = ParamStore::new();
    put_prefixed(&mut state, "opt.", &opt.state(&store));
    let checkpoint = Checkpoint {
        config: config.clone(),
        stage: Stage::Warmup,
        step: end,
        total,
        params: store,
        state,
        log,
    };
    checkpoint.save(out)?;
    if !checkpoint.is_complete() {
        return Ok(WarmupOutcome {
            checkpoint,
            pseudo_labels: None,
            source_val_iou: None,
            target_val_iou: None,
        });
    }
    let store = &checkpoint.params;
    let images = data.target_train_images()?;
    let pseudo = PseudoLabelSet::warmup(&model, store, &images, config.tau)?;
    pseudo.save(out.join(PSEUDO_DIR))?;
    let source_val_iou = evaluate(&model, store, &data.source_val()?)?.0.iou();
    let target_val_iou = evaluate(&model, store, &target_val)?.0.iou();
    Ok(WarmupOutcome {
        checkpoint,
        pseudo_labels: Some(pseudo),
        source_val_iou: Some(source_val_iou),
        target_val_iou: Some(target_val_iou),
    })
}

/// Image path relative to the dataset root, as used in pair files.
pub fn relative_image_path(domain: Domain, id: usize) -> String {
    format!("{}/images/{id:04}.ppm", domain.dir())
}

fn resolve(path: &str, domain: Domain, count: usize) -> Option<usize> {
    let p = Path::new(path);
    let dir = p.parent()?;
    if dir.file_name()? != "images" || dir.parent()?.file_name()? != domain.dir() {
        return None;
    }
    let id: usize = p.file_stem()?.to_str()?.parse().ok()?;
    (id < count).then_some(id)
}

/// Two-way SSIM pairing of the source and target training images.
pub fn compute_pairs(data: &Dataset) -> Result<PairSet> {
    let gray = |v: Vec<Tensor>| -> Result<Vec<GrayImage>> { v.iter().map(GrayImage::from_tensor).collect() };
    let sources = gray(data.source_train()?.into_iter().map(|s| s.image).collect())?;
    let targets = gray(data.target_train_images()?.into_iter().map(|(_, t)| t).collect())?;
    pair_two_way(&sources, &targets)
}

pub fn pairs_to_tsv(pairs: &PairSet) -> String {
    pairs.to_tsv(
        |i| relative_image_path(Domain::Source, i),
        |i| relative_image_path(Domain::Target, i),
    )
}

pub fn read_pairs(path: &Path, data: &Dataset) -> Result<PairSet> {
    let text = std::fs::read_to_string(path).map_err(file_err(path))?;
    let pairs = PairSet::from_tsv(
        &text,
        |p| resolve(p, Domain::Source, data.spec.source_train),
        |p| resolve(p, Domain::Target, data.spec.target_train),
    )?;
    if pairs.is_empty() {
        return Err(contract_err!("{} lists no pairs", path.display()));
    }
    Ok(pairs)
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub checkpoint: Checkpoint,
    pub pairs: PairSet,
    pub pseudo_labels: PseudoLabelSet,
    /// Set when the stage completed.
    pub target_val_iou: Option<f64>,
}

/// Per-pixel weights of class `c`, pooled to the feature grid.
fn grid_weights(probs: &Tensor, c: usize, grid: (usize, usize)) -> Result<Vec<f64>> {
    let (_, h, w) = probs.dims3()?;
    let weights = Tensor::new(&[1, h, w], pseudo_class_weights(probs, c)?)?;
    if grid.0 == 0 || h % grid.0 != 0 || w / (h / grid.0) != grid.1 {
        return Err(contract_err!("cannot pool a {h}x{w} map onto a {}x{} grid", grid.0, grid.1));
    }
    Ok(pool_probs(&weights, h / grid.0)?.into_data())
}

/// One pass over the target images with their warm-up labels. Each target
/// is paired with the first source it appears with. A class that is never
/// the top prediction falls back to its soft probability as weight.
fn init_bank(
    config: &RunConfig,
    model: &QuadFormer,
    store: &ParamStore,
    sources: &[Sample],
    targets: &[(usize, Tensor)],
    pairs: &PairSet,
    pseudo: &PseudoLabelSet,
) -> Result<PrototypeBank> {
    let classes = model.num_classes();
    let parts = targets
        .par_iter()
        .map(|(id, img)| {
            let partner = pairs
                .pairs
                .iter()
                .find(|p| p.target == *id)
                .map_or(0, |p| p.source);
            let tape = Tape::new();
            let b = Binder::frozen(&tape, store);
            let out = model.forward_pair(
                &b,
                tape.constant(sources[partner].image.clone()),
                tape.constant(img.clone()),
                config.toggles.branches(),
            )?;
            let grid = out.target.grid;
            let features = normalize_rows(&out.target.augmented.value())?;
            let label = pseudo.get(*id).ok_or_else(|| contract_err!("no pseudo label for target {id}"))?;
            let hard = (0..classes)
                .map(|c| grid_weights(&label.warmup, c, grid))
                .collect::<Result<Vec<_>>>()?;
            let (_, h, _) = label.warmup.dims3()?;
            let soft = pool_probs(&label.warmup, h / grid.0)?.into_data();
            Ok((features, hard, soft))
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = parts.first().map_or(0, |p| p.0.shape()[1]);
    let mut bank = PrototypeBank::new(classes, dim, config.ema_momentum);
    for c in 0..classes {
        let seen = parts.iter().any(|p| p.1[c].iter().any(|&w| w > 0.0));
        if !seen {
            log::warn!("class {c} is never predicted by the warm-up model; using soft weights for its prototype");
        }
        for (features, hard, soft) in &parts {
            let n = features.shape()[0];
            let w = if seen { &hard[c][..] } else { &soft[c * n..(c + 1) * n] };
            bank.accumulate(features, c, w)?;
        }
    }
    bank.finish_init()?;
    Ok(bank)
}

/// Everything one batch element needs; drawn sequentially from the step
/// generator.
struct Element {
    id: usize,
    source: Sample,
    target: Tensor,
    geometry: Geometry,
    warmup_view: Tensor,
    current_view: Tensor,
}

struct ElementResult {
    grads: Vec<Tensor>,
    disc_grads: Option<Vec<Tensor>>,
    l_seg_s: f64,
    l_seg_t: Option<f64>,
    d_loss: Option<f64>,
    g_loss: Option<f64>,
    /// Unit-norm target features and their grid, for the prototype update.
    features: Option<(Tensor, (usize, usize))>,
    corrected: Option<Tensor>,
}

struct AdaptContext<'a> {
    config: &'a RunConfig,
    model: &'a QuadFormer,
    store: &'a ParamStore,
    disc: &'a Discriminator,
    disc_store: &'a ParamStore,
    bank: Option<&'a PrototypeBank>,
    weights: Option<Vec<f64>>,
}

impl AdaptContext<'_> {
    fn element(&self, e: &Element) -> Result<ElementResult> {
        let cfg = self.config;
        let toggles = cfg.toggles;
        let tau = cfg.tau;
        let tape = Tape::new();
        let b = Binder::new(&tape, self.store);
        let (_, h, w) = e.source.image.dims3()?;
        let out = self.model.forward_pair(
            &b,
            tape.constant(e.source.image.clone()),
            tape.constant(e.target.clone()),
            toggles.branches(),
        )?;
        let weights = self.weights.as_deref();
        let logits_s = out.source.logits.upsample_bilinear(h, w)?;
        let logits_t = out.target.logits.upsample_bilinear(h, w)?;
        let seg_s = seg_cross_entropy(logits_s, &e.source.label, None, weights)?;
        let mut total = seg_s.loss;
        let mut result = ElementResult {
            grads: Vec::new(),
            disc_grads: None,
            l_seg_s: seg_s.loss.value().item(),
            l_seg_t: None,
            d_loss: None,
            g_loss: None,
            features: None,
            corrected: None,
        };
        if toggles.self_training {
            let label = match self.bank {
                Some(bank) => {
                    let features = normalize_rows(&out.target.augmented.value())?;
                    let warm = PseudoLabel::from_probs(e.id, e.warmup_view.clone(), tau)?;
                    let corrected =
                        correct_pseudo_labels(&warm, &features, out.target.grid, bank, cfg.temperature, tau)?;
                    result.features = Some((features, out.target.grid));
                    result.corrected = Some(corrected.probs.clone());
                    corrected
                }
                None => PseudoLabel::from_probs(e.id, e.current_view.clone(), tau)?,
            };
            let seg_t = seg_cross_entropy(logits_t, &label.hard_labels(), Some(&label.valid), weights)?;
            result.l_seg_t = Some(seg_t.loss.value().item());
            total = total.add(seg_t.loss.scale(cfg.loss.beta1)?)?;
        }
        let db = Binder::new(&tape, self.disc_store);
        if toggles.adversarial {
            let dbf = Binder::frozen(&tape, self.disc_store);
            let p_s = class_softmax(logits_s)?;
            let p_t = class_softmax(logits_t)?;
            let adv = adversarial_losses(
                self.disc.forward(&db, p_s.detach())?,
                self.disc.forward(&db, p_t.detach())?,
                self.disc.forward(&dbf, p_t)?,
            )?;
            result.d_loss = Some(adv.d_loss.value().item());
            result.g_loss = Some(adv.g_loss.value().item());
            total = total.add(adv.g_loss.scale(cfg.loss.beta2)?)?.add(adv.d_loss)?;
        }
        let grads = total.backward()?;
        result.grads = b.gradients(&grads);
        if toggles.adversarial {
            result.disc_grads = Some(db.gradients(&grads));
        }
        Ok(result)
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn restore_pseudo(pseudo: &mut PseudoLabelSet, state: &ParamStore, tau: f64) -> Result<()> {
    for label in &mut pseudo.labels {
        let key = format!("pseudo.{:04}", label.id);
        let probs = state
            .by_name(&key)
            .ok_or_else(|| contract_err!("checkpoint lacks {key}"))?
            .clone();
        let provenance = if probs == label.warmup {
            Provenance::Warmup
        } else {
            Provenance::Corrected
        };
        label.set_probs(probs, tau, provenance)?;
    }
    Ok(())
}

/// Adaptation from a completed warm-up checkpoint. Writes the checkpoint,
/// the pair list and (on completion) the current pseudo labels to `out`.
pub fn run_adapt(
    config: &RunConfig,
    data: &Dataset,
    warmup: &Path,
    out: &Path,
    opts: &RunOptions,
) -> Result<AdaptOutcome> {
    config.validate()?;
    let warm = Checkpoint::load(warmup)?;
    if warm.stage != Stage::Warmup || !warm.is_complete() {
        return Err(contract_err!("{} is not a completed warm-up checkpoint", warmup.display()));
    }
    if warm.config.model != config.model {
        return Err(contract_err!("warm-up model configuration differs from the adaptation one"));
    }
    let (model, mut store) = QuadFormer::init::<f64>(config.model.clone(), config.seed)?;
    restore_exact(&mut store, &warm.params, "model")?;
    let mut disc_store = ParamStore::new();
    let disc = Discriminator::new(
        config.discriminator.clone(),
        &mut disc_store,
        &mut ChaCha8Rng::seed_from_u64(config.seed ^ DISC_SALT),
    )?;
    let mut pseudo = PseudoLabelSet::load(warmup.join(PSEUDO_DIR))?;
    pseudo.tau = config.tau;
    for label in &mut pseudo.labels {
        let probs = label.probs.clone();
        label.set_probs(probs, config.tau, Provenance::Warmup)?;
    }
    let sources = data.source_train()?;
    let targets = data.target_train_images()?;
    if pseudo.labels.len() != targets.len() || targets.iter().any(|(id, _)| pseudo.get(*id).is_none()) {
        return Err(contract_err!("warm-up pseudo labels do not cover the target training images"));
    }
    let pairs = match &opts.pairs {
        Some(p) => read_pairs(p, data)?,
        None => compute_pairs(data)?,
    };
    std::fs::create_dir_all(out).map_err(file_err(out))?;
    let pairs_path = out.join(PAIRS_FILE);
    std::fs::write(&pairs_path, pairs_to_tsv(&pairs)).map_err(file_err(&pairs_path))?;

    let total = config.iterations;
    let correction = config.toggles.correction && config.toggles.self_training;
    let mut opt = AdamW::new(config.optimizer(), &store);
    let mut disc_opt = AdamW::new(config.optimizer(), &disc_store);
    let mut bank = None;
    let mut log = LOG_HEADER.to_string();
    let mut start = 0;
    if let Some(dir) = &opts.resume {
        let ck = resume_from(dir, Stage::Adapt, config)?;
        restore_exact(&mut store, &ck.params, "model")?;
        restore_exact(&mut disc_store, &take_prefixed(&ck.state, "d."), "discriminator")?;
        opt = AdamW::from_state(config.optimizer(), &store, &take_prefixed(&ck.state, "opt."))?;
        disc_opt = AdamW::from_state(config.optimizer(), &disc_store, &take_prefixed(&ck.state, "dopt."))?;
        if correction {
            let eta = ck.state.by_name("bank.eta").ok_or_else(|| contract_err!("checkpoint lacks the prototypes"))?;
            let updates = ck
                .state
                .by_name("bank.updates")
                .ok_or_else(|| contract_err!("checkpoint lacks the prototype counters"))?;
            let updates = updates.data().iter().map(|&v| v as u64).collect();
            bank = Some(PrototypeBank::from_parts(eta.clone(), updates, config.ema_momentum)?);
        }
        restore_pseudo(&mut pseudo, &ck.state, config.tau)?;
        start = ck.step;
        log = ck.log;
    } else if correction {
        bank = Some(init_bank(config, &model, &store, &sources, &targets, &pairs, &pseudo)?);
    }

    let target_val = data.target_val()?;
    let schedule = config.schedule(total);
    let disc_schedule = match schedule {
        LrSchedule::WarmupLinear { warmup, total, .. } => LrSchedule::WarmupLinear {
            base: config.disc_lr,
            warmup,
            total,
        },
        LrSchedule::Constant { .. } => LrSchedule::Constant { lr: config.disc_lr },
    };
    let weights = class_weights(config);
    let end = opts.stop_after.map_or(total, |s| s.min(total)).max(start);
    for step in start + 1..=end {
        let mut rng = step_rng(config.seed, ADAPT_SALT, step);
        let batch: Vec<Element> = (0..config.batch)
            .map(|_| {
                let pair = pairs.pairs[rng.random_range(0..pairs.len())];
                let source = augment(&sources[pair.source], &config.augment, &mut rng);
                let label = pseudo
                    .get(pair.target)
                    .ok_or_else(|| contract_err!("no pseudo label for target {}", pair.target))?;
                let (_, h, w) = label.probs.dims3()?;
                let hard = label.hard_labels();
                let geometry = Geometry::sample(h, w, &config.augment, Some(&hard), &mut rng);
                let mut target = geometry.apply_tensor(&targets[pair.target].1);
                if config.augment.photometric {
                    target = photometric(&target, &config.augment, &mut rng);
                }
                Ok(Element {
                    id: pair.target,
                    source,
                    target,
                    geometry,
                    warmup_view: geometry.apply_tensor(&label.warmup),
                    current_view: geometry.apply_tensor(&label.probs),
                })
            })
            .collect::<Result<_>>()?;
        let ctx = AdaptContext {
            config,
            model: &model,
            store: &store,
            disc: &disc,
            disc_store: &disc_store,
            bank: bank.as_ref(),
            weights: weights.clone(),
        };
        let results = batch.par_iter().map(|e| ctx.element(e)).collect::<Result<Vec<_>>>()?;
        let n = results.len();
        let row = LogRow {
            step,
            l_seg_s: results.iter().map(|r| r.l_seg_s).sum::<f64>() / n as f64,
            l_seg_t: mean_of(results.iter().map(|r| r.l_seg_t)),
            d_loss: mean_of(results.iter().map(|r| r.d_loss)),
            g_loss: mean_of(results.iter().map(|r| r.g_loss)),
            lr: schedule.lr(step),
            target_iou: None,
        };
        let mut model_grads = Vec::with_capacity(n);
        let mut disc_grads = Vec::with_capacity(n);
        for (e, r) in batch.iter().zip(results) {
            model_grads.push(r.grads);
            disc_grads.extend(r.disc_grads);
            if let (Some(bank), Some((features, grid)), Some(corrected)) = (bank.as_mut(), &r.features, &r.corrected) {
                for c in 0..bank.classes() {
                    if let Some(centroid) = batch_prototype(features, &grid_weights(corrected, c, *grid)?)? {
                        bank.ema_update(c, &centroid)?;
                    }
                }
                let label = pseudo.get_mut(e.id).expect("element ids come from the label set");
                let mut probs = label.probs.clone();
                e.geometry.scatter_into(corrected.data(), corrected.shape()[0], probs.data_mut());
                label.set_probs(probs, config.tau, Provenance::Corrected)?;
            }
        }
        opt.update(&mut store, &mean_grads(model_grads.into_iter(), n), row.lr)?;
        if !disc_grads.is_empty() {
            disc_opt.update(&mut disc_store, &mean_grads(disc_grads.into_iter(), n), disc_schedule.lr(step))?;
        }
        let target_iou = if due(config, step, total) {
            Some(evaluate(&model, &store, &target_val)?.0.iou())
        } else {
            None
        };
        LogRow { target_iou, ..row }.append(&mut log);
        log::debug!("adapt step {step}/{total}");
    }

    let mut state = ParamStore::new();
    put_prefixed(&mut state, "opt.", &opt.state(&store));
    put_prefixed(&mut state, "d.", &disc_store);
    put_prefixed(&mut state, "dopt.", &disc_opt.state(&disc_store));
    if let Some(bank) = &bank {
        state.insert("bank.eta", bank.eta.clone());
        let updates: Vec<f64> = bank.updates.iter().map(|&u| u as f64).collect();
        state.insert("bank.updates", Tensor::new(&[updates.len()], updates)?);
    }
    for label in &pseudo.labels {
        state.insert(format!("pseudo.{:04}", label.id), label.probs.clone());
    }
    let checkpoint = Checkpoint {
        config: config.clone(),
        stage: Stage::Adapt,
        step: end,
        total,
        params: store,
        state,
        log,
    };
    checkpoint.save(out)?;
    let target_val_iou = if checkpoint.is_complete() {
        pseudo.save(out.join(PSEUDO_DIR))?;
        Some(evaluate(&model, &checkpoint.params, &target_val)?.0.iou())
    } else {
        None
    };
    Ok(AdaptOutcome {
        checkpoint,
        pairs,
        pseudo_labels: pseudo,
        target_val_iou,
    })
}

