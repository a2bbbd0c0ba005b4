mod common;

use common::{brute_ssim, noisy_clusters, rng};
use proptest::prelude::*;
use quadformer::adaptation::{
    batch_prototype, correct_pseudo_labels, normalize_rows, pair_two_way, pool_probs,
    pseudo_class_weights, ssim, GrayImage, Origin, PairSet, Provenance, PseudoLabel,
};
use quadformer::model::{ModelConfig, QuadFormer};
use quadformer::Error;

type Tensor = quadformer::Tensor<f64>;
type PrototypeBank = quadformer::adaptation::PrototypeBank<f64>;
type PseudoLabelSet = quadformer::adaptation::PseudoLabelSet<f64>;
use rand::Rng;

fn random_gray(h: usize, w: usize, r: &mut impl Rng) -> GrayImage {
    GrayImage::new(h, w, (0..h * w).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

// --- prototypes -------------------------------------------------------------

#[test]
fn batch_prototype_reference_cases() {
    let f = Tensor::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(batch_prototype(&f, &[0.0, 0.7, 0.0]).unwrap(), Some(vec![3.0, 4.0]));
    let mean = batch_prototype(&f, &[1.0, 1.0, 1.0]).unwrap().unwrap();
    common::assert_close(&mean, &[3.0, 4.0], 1e-15, "uniform weights");
    assert_eq!(batch_prototype(&f, &[0.0; 3]).unwrap(), None);
    assert!(batch_prototype(&f, &[1.0; 2]).is_err());
}

#[test]
fn batch_prototype_matches_direct_summation() {
    let mut r = rng(1);
    for _ in 0..20 {
        let f = common::random_tensor(&[10, 7], 2.0, &mut r);
        let w: Vec<f64> = (0..10).map(|_| r.random_range(0.0..1.0)).collect();
        let got = batch_prototype(&f, &w).unwrap().unwrap();
        let total: f64 = w.iter().sum();
        for d in 0..7 {
            let want: f64 = (0..10).map(|i| w[i] * f.data()[i * 7 + d]).sum::<f64>() / total;
            assert!((got[d] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn ema_reference_steps() {
    let mut bank = PrototypeBank::new(2, 3, 0.9999);
    bank.mark_initialized();
    bank.ema_update(1, &[1.0, 1.0, 1.0]).unwrap();
    for &v in bank.prototype(1) {
        assert!((v - 1e-4).abs() < 1e-15);
    }
    assert_eq!(bank.prototype(0), [0.0; 3]);
    let before = bank.prototype(1).to_vec();
    bank.ema_update(1, &before).unwrap();
    for (a, b) in bank.prototype(1).iter().zip(&before) {
        assert!((a - b).abs() < 1e-18);
    }
    assert_eq!(bank.updates, [0, 2]);
    assert!(bank.ema_update(0, &[f64::NAN, 0.0, 0.0]).is_err());
    assert!(bank.ema_update(2, &[0.0; 3]).is_err());
    assert!(bank.ema_update(0, &[0.0; 2]).is_err());
}

#[test]
fn ema_follows_closed_form() {
    let v = [0.3, -1.2, 2.5, 0.0];
    let mut bank = PrototypeBank::new(1, 4, 0.9999);
    bank.mark_initialized();
    for k in 1..=10_000u32 {
        bank.ema_update(0, &v).unwrap();
        if k % 2500 == 0 || k == 1 {
            let frac = 1.0 - 0.9999f64.powi(k as i32);
            for (e, &vi) in bank.prototype(0).iter().zip(&v) {
                assert!((e - frac * vi).abs() < 1e-9, "step {k}: {e} vs {}", frac * vi);
            }
        }
    }
    let frac = bank.prototype(0)[2] / 2.5;
    assert!((frac - 0.632).abs() < 1e-3);
}

proptest! {
    #[test]
    fn ema_contracts_toward_constant_target(
        start in prop::collection::vec(-5.0f64..5.0, 3),
        target in prop::collection::vec(-5.0f64..5.0, 3),
        lambda in 0.0f64..1.0,
    ) {
        let t = Tensor::new(&[1, 3], start).unwrap();
        let mut bank = PrototypeBank::from_parts(t, vec![0], lambda).unwrap();
        let dist = |b: &PrototypeBank| -> f64 {
            b.prototype(0).iter().zip(&target).map(|(a, v)| (a - v).powi(2)).sum::<f64>().sqrt()
        };
        let before = dist(&bank);
        bank.ema_update(0, &target).unwrap();
        prop_assert!((dist(&bank) - lambda * before).abs() <= 1e-12 * (1.0 + before));
    }
}

#[test]
fn initialization_pass_and_weights() {
    let probs = Tensor::from_f64(&[2, 1, 3], &[0.9, 0.2, 0.5, 0.1, 0.8, 0.5]).unwrap();
    assert_eq!(pseudo_class_weights(&probs, 0).unwrap(), [0.9, 0.0, 0.5]);
    assert_eq!(pseudo_class_weights(&probs, 1).unwrap(), [0.0, 0.8, 0.0]);
    let f = Tensor::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let mut bank = PrototypeBank::new(2, 2, 0.9999);
    assert!(!bank.is_initialized());
    assert!(matches!(bank.affinity(&f, 1.0), Err(Error::Contract(_))));
    bank.accumulate(&f, 0, &pseudo_class_weights(&probs, 0).unwrap()).unwrap();
    assert!(bank.finish_init().is_err(), "class 1 has no evidence yet");
    bank.accumulate(&f, 1, &pseudo_class_weights(&probs, 1).unwrap()).unwrap();
    bank.finish_init().unwrap();
    let p0 = bank.prototype(0);
    assert!((p0[0] - 1.0).abs() < 1e-15 && (p0[1] - 0.5 / 1.4).abs() < 1e-15);
    assert_eq!(bank.prototype(1), [0.0, 1.0]);
}

// --- correction -------------------------------------------------------------

fn bank_from(protos: &[f64], dim: usize) -> PrototypeBank {
    let c = protos.len() / dim;
    PrototypeBank::from_parts(Tensor::from_f64(&[c, dim], protos).unwrap(), vec![0; c], 0.9999).unwrap()
}

#[test]
fn pixel_on_a_prototype_is_pulled_to_its_class() {
    let bank = bank_from(&[1.0, 0.0, -1.0, 0.0], 2);
    let feats = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
    let warm = Tensor::from_f64(&[2, 1, 1], &[0.3, 0.7]).unwrap();
    let label = PseudoLabel::from_probs(0, warm.clone(), 0.9).unwrap();
    let out = correct_pseudo_labels(&label, &feats, (1, 1), &bank, 0.01, 0.9).unwrap();
    assert!(out.probs.data()[0] > 1.0 - 1e-12);
    assert_eq!(out.valid, [true]);
    assert_eq!(out.provenance, Provenance::Corrected);
    assert_eq!(out.warmup, warm);
    // T = 1 still moves the label toward the near prototype
    let out = correct_pseudo_labels(&label, &feats, (1, 1), &bank, 1.0, 0.9).unwrap();
    assert!(out.probs.data()[0] > 0.7);
}

#[test]
fn equidistant_prototypes_leave_labels_unchanged() {
    let bank = bank_from(&[1.0, 0.0, -1.0, 0.0], 2);
    let feats = Tensor::from_f64(&[2, 2], &[0.0, 1.0, 0.0, -1.0]).unwrap();
    let warm = Tensor::from_f64(&[2, 1, 2], &[0.3, 0.95, 0.7, 0.05]).unwrap();
    let label = PseudoLabel::from_probs(0, warm.clone(), 0.9).unwrap();
    let out = correct_pseudo_labels(&label, &feats, (1, 2), &bank, 1.0, 0.9).unwrap();
    assert_eq!(out.probs, warm);
    assert_eq!(out.valid, [false, true]);
}

#[test]
fn correction_always_starts_from_warmup_probabilities() {
    let c = noisy_clusters(3, 6, 8, 0.2, 0.7);
    let mut bank = PrototypeBank::new(2, 8, 0.9999);
    for k in 0..2 {
        bank.accumulate(&c.features, k, &pseudo_class_weights(&c.warmup, k).unwrap()).unwrap();
    }
    bank.finish_init().unwrap();
    let label = PseudoLabel::from_probs(0, c.warmup.clone(), 0.9).unwrap();
    let once = correct_pseudo_labels(&label, &c.features, (6, 6), &bank, 1.0, 0.9).unwrap();
    let twice = correct_pseudo_labels(&once, &c.features, (6, 6), &bank, 1.0, 0.9).unwrap();
    assert_eq!(once, twice);
}

#[test]
fn coarse_affinities_are_upsampled_to_label_resolution() {
    let bank = bank_from(&[1.0, 0.0, -1.0, 0.0], 2);
    let feats = Tensor::from_f64(&[4, 2], &[1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
    let label = PseudoLabel::from_probs(0, Tensor::full(&[2, 8, 8], 0.5), 0.9).unwrap();
    let out = correct_pseudo_labels(&label, &feats, (2, 2), &bank, 0.5, 0.6).unwrap();
    assert_eq!(out.grid(), (8, 8));
    let labels = out.hard_labels();
    assert_eq!((labels[0], labels[7], labels[56], labels[63]), (0, 1, 0, 1));
    assert!(correct_pseudo_labels(&label, &feats, (3, 2), &bank, 0.5, 0.6).is_err());
}

proptest! {
    #[test]
    fn correction_preserves_normalization(seed in any::<u64>(), temp in 0.05f64..5.0) {
        let mut r = rng(seed);
        let dim = 5;
        let feats = normalize_rows(&common::random_tensor(&[9, dim], 1.0, &mut r)).unwrap();
        let bank = bank_from(&common::random_tensor(&[3, dim], 1.0, &mut r).into_data(), dim);
        let raw: Vec<f64> = (0..27).map(|_| r.random_range(0.01..1.0)).collect();
        let mut probs = raw.clone();
        for i in 0..9 {
            let s: f64 = (0..3).map(|k| raw[k * 9 + i]).sum();
            for k in 0..3 {
                probs[k * 9 + i] = raw[k * 9 + i] / s;
            }
        }
        let label = PseudoLabel::from_probs(0, Tensor::new(&[3, 3, 3], probs).unwrap(), 0.9).unwrap();
        let out = correct_pseudo_labels(&label, &feats, (3, 3), &bank, temp, 0.9).unwrap();
        let conf = out.confidence();
        for i in 0..9 {
            let s: f64 = (0..3).map(|k| out.probs.data()[k * 9 + i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert_eq!(out.valid[i], conf[i] >= 0.9);
        }
    }
}

#[test]
fn correction_recovers_flipped_cluster_labels() {
    for seed in 0..5 {
        let c = noisy_clusters(seed, 20, 16, 0.2, 0.75);
        let mut bank = PrototypeBank::new(2, 16, 0.9999);
        for k in 0..2 {
            bank.accumulate(&c.features, k, &pseudo_class_weights(&c.warmup, k).unwrap()).unwrap();
        }
        bank.finish_init().unwrap();
        let label = PseudoLabel::from_probs(0, c.warmup.clone(), 0.9).unwrap();
        let out = correct_pseudo_labels(&label, &c.features, (20, 20), &bank, 1.0, 0.9).unwrap();
        let hard = out.hard_labels();
        let flips: Vec<usize> = (0..400).filter(|&i| c.flipped[i]).collect();
        let fixed = flips.iter().filter(|&&i| hard[i] == c.truth[i]).count();
        assert!(fixed as f64 >= 0.95 * flips.len() as f64, "seed {seed}: {fixed}/{}", flips.len());
        let kept = (0..400).filter(|&i| !c.flipped[i] && hard[i] == c.truth[i]).count();
        assert_eq!(kept, 400 - flips.len());
    }
}

#[test]
fn probability_pooling() {
    let p = Tensor::from_f64(&[1, 2, 4], &[1.0, 0.0, 0.5, 0.5, 0.0, 1.0, 0.25, 0.75]).unwrap();
    assert_eq!(pool_probs(&p, 2).unwrap().data(), [0.5, 0.5]);
    assert!(pool_probs(&p, 3).is_err());
}

// --- pseudo-label sets -------------------------------------------------------

#[test]
fn warmup_labels_follow_the_threshold() {
    let (model, mut store) = QuadFormer::init::<f64>(ModelConfig::micro(), 0).unwrap();
    for name in ["decoder.classify.weight", "decoder.classify.bias"] {
        let id = store.id(name).unwrap();
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut r = rng(4);
    let images: Vec<_> = (0..3).map(|i| (i, common::random_tensor(&[3, 8, 8], 1.0, &mut r))).collect();
    let set = PseudoLabelSet::warmup(&model, &store, &images, 0.6).unwrap();
    assert_eq!(set.labels.len(), 3);
    assert!(set.labels.iter().all(|l| l.valid_count() == 0 && l.grid() == (8, 8)));
    let set = PseudoLabelSet::warmup(&model, &store, &images, 0.0).unwrap();
    assert!(set.labels.iter().all(|l| l.valid_count() == 64));
    assert_eq!(set.get(2).unwrap().provenance, Provenance::Warmup);

    common::randomize(&mut store, 0.5, 9);
    let set = PseudoLabelSet::warmup(&model, &store, &images, 0.5).unwrap();
    for l in &set.labels {
        for i in 0..64 {
            let s = l.probs.data()[i] + l.probs.data()[64 + i];
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn pseudo_label_files_round_trip() {
    let mut r = rng(5);
    let labels: Vec<_> = [3usize, 11]
        .iter()
        .map(|&id| {
            let p: Vec<f64> = (0..12).map(|_| r.random_range(0.0..1.0)).collect();
            let probs = [p.clone(), p.iter().map(|v| 1.0 - v).collect()].concat();
            PseudoLabel::from_probs(id, Tensor::new(&[2, 3, 4], probs).unwrap(), 0.7).unwrap()
        })
        .collect();
    let set = PseudoLabelSet { tau: 0.7, labels };
    let dir = tempfile::tempdir().unwrap();
    set.save(dir.path()).unwrap();
    assert!(dir.path().join("0011.pgm").is_file() && dir.path().join("0003.conf").is_file());
    let back = PseudoLabelSet::load(dir.path()).unwrap();
    assert_eq!(back.tau, 0.7);
    for (a, b) in set.labels.iter().zip(&back.labels) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.hard_labels(), b.hard_labels());
        assert_eq!(a.valid, b.valid);
        assert!(a.probs.max_abs_diff(&b.probs) < 1e-15);
    }
    std::fs::write(dir.path().join("0003.conf"), [0u8; 5]).unwrap();
    assert!(matches!(PseudoLabelSet::load(dir.path()), Err(Error::Parse { .. })));
}

// --- SSIM -------------------------------------------------------------------

#[test]
fn ssim_matches_windowed_oracle() {
    let mut r = rng(6);
    for _ in 0..100 {
        let (a, b) = (random_gray(16, 16, &mut r), random_gray(16, 16, &mut r));
        let got = ssim(&a, &b).unwrap();
        let want = brute_ssim(&a.data, &b.data, 16, 16);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
    let (a, b) = (random_gray(5, 12, &mut r), random_gray(5, 12, &mut r));
    assert!((ssim(&a, &b).unwrap() - brute_ssim(&a.data, &b.data, 5, 12)).abs() < 1e-9);
}

#[test]
fn ssim_identity_and_anticorrelation() {
    let mut r = rng(7);
    for _ in 0..20 {
        let a = random_gray(16, 16, &mut r);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }
    let bin = GrayImage::new(16, 16, (0..256).map(|i| ((i * 7 + i / 16) % 2) as f64).collect()).unwrap();
    let inv = GrayImage::new(16, 16, bin.data.iter().map(|v| 1.0 - v).collect()).unwrap();
    assert!(ssim(&bin, &inv).unwrap() < 0.0);
    assert!(matches!(ssim(&bin, &random_gray(16, 8, &mut r)), Err(Error::Shape(_))));
}

proptest! {
    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (random_gray(12, 10, &mut r), random_gray(12, 10, &mut r));
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }
}

#[test]
fn grayscale_conversion_and_resampling() {
    let t = Tensor::from_f64(&[3, 1, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.5]).unwrap();
    let g = GrayImage::from_tensor(&t).unwrap();
    assert!((g.data[0] - 0.299).abs() < 1e-15 && (g.data[1] - (0.587 + 0.057)).abs() < 1e-15);
    let img = GrayImage::new(2, 4, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
    assert_eq!(img.resized(1, 2).data, [2.5, 4.5]);
    assert_eq!(img.resized(2, 4), img);
    assert_eq!(img.resized(4, 8).data.len(), 32);
}

// --- pairing ----------------------------------------------------------------

/// Exhaustive two-way pairing from the brute-force SSIM.
fn oracle_pairs(src: &[GrayImage], tgt: &[GrayImage]) -> Vec<(usize, usize)> {
    let sim: Vec<Vec<f64>> = src
        .iter()
        .map(|s| tgt.iter().map(|t| brute_ssim(&s.data, &t.data, s.height, s.width)).collect())
        .collect();
    let mut pairs = Vec::new();
    for (i, row) in sim.iter().enumerate() {
        let j = (0..tgt.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        pairs.push((i, j));
    }
    for j in 0..tgt.len() {
        let i = (0..src.len()).fold(0, |b, i| if sim[i][j] > sim[b][j] { i } else { b });
        pairs.push((i, j));
    }
    pairs.sort();
    pairs.dedup();
    pairs
}

#[test]
fn pairing_matches_exhaustive_search() {
    let mut r = rng(8);
    for _ in 0..4 {
        let src: Vec<_> = (0..5).map(|_| random_gray(64, 64, &mut r)).collect();
        let tgt: Vec<_> = (0..5).map(|_| random_gray(64, 64, &mut r)).collect();
        let got = pair_two_way(&src, &tgt).unwrap();
        let keys: Vec<_> = got.pairs.iter().map(|p| (p.source, p.target)).collect();
        assert_eq!(keys, oracle_pairs(&src, &tgt));
        for p in &got.pairs {
            let want = brute_ssim(&src[p.source].data, &tgt[p.target].data, 64, 64);
            assert!((p.ssim - want).abs() < 1e-9);
        }
    }
}

#[test]
fn pairing_trivial_corpora() {
    let mut r = rng(9);
    let one = vec![random_gray(64, 64, &mut r)];
    let p = pair_two_way(&one, &[random_gray(64, 64, &mut r)]).unwrap();
    assert_eq!(p.len(), 1);
    assert_eq!(p.pairs[0].origin, Origin::Both);

    let corpus: Vec<_> = (0..6).map(|_| random_gray(64, 64, &mut r)).collect();
    let p = pair_two_way(&corpus, &corpus).unwrap();
    assert_eq!(p.len(), 6);
    assert!(p.pairs.iter().all(|q| q.source == q.target && q.ssim == 1.0));
    assert!(pair_two_way(&[], &corpus).is_err());
}

#[test]
fn pairing_covers_every_image() {
    let mut r = rng(10);
    for _ in 0..100 {
        let ns = r.random_range(1..7);
        let nt = r.random_range(1..7);
        let src: Vec<_> = (0..ns).map(|_| random_gray(16, 16, &mut r)).collect();
        let tgt: Vec<_> = (0..nt).map(|_| random_gray(16, 16, &mut r)).collect();
        let p = pair_two_way(&src, &tgt).unwrap();
        assert!(p.len() <= ns + nt);
        assert!((0..ns).all(|s| p.pairs.iter().any(|q| q.source == s)));
        assert!((0..nt).all(|t| p.pairs.iter().any(|q| q.target == t)));
    }
}

#[test]
fn pair_file_round_trip() {
    let mut r = rng(11);
    let src: Vec<_> = (0..4).map(|_| random_gray(64, 64, &mut r)).collect();
    let tgt: Vec<_> = (0..3).map(|_| random_gray(64, 64, &mut r)).collect();
    let p = pair_two_way(&src, &tgt).unwrap();
    let text = p.to_tsv(|s| format!("src/{s:04}.ppm"), |t| format!("tgt/{t:04}.ppm"));
    assert!(text.lines().filter(|l| !l.starts_with('#')).all(|l| l.split('\t').count() == 3));
    let id = |prefix: &'static str| {
        move |s: &str| s.strip_prefix(prefix)?.strip_suffix(".ppm")?.parse().ok()
    };
    let back = PairSet::from_tsv(&text, id("src/"), id("tgt/")).unwrap();
    assert_eq!(back, p);
    let bad = "src/0000.ppm\ttgt/0009.ppm\t0.5\n";
    let tgt_id = |s: &str| id("tgt/")(s).filter(|&t: &usize| t < 3);
    assert!(matches!(PairSet::from_tsv(bad, id("src/"), tgt_id), Err(Error::Parse { .. })));
    assert!(PairSet::from_tsv("a\tb\n", id("src/"), id("tgt/")).is_err());
}
