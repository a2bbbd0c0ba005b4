#![allow(dead_code)]

use quadformer::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Overwrites every parameter (biases and norm affines included) with
/// uniform noise so no test relies on init-time zeros or ones.
pub fn randomize(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = r.random_range(-scale..scale);
        }
    }
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
    }
}

/// Mean SSIM written straight from the definition: for every 8×8 window,
/// two-pass means, variances and covariance.
pub fn brute_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = 8.min(h).min(w);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let px = |img: &[f64], i: usize| img[(y + i / k) * w + x + i % k];
            let ma = (0..k * k).map(|i| px(a, i)).sum::<f64>() / n;
            let mb = (0..k * k).map(|i| px(b, i)).sum::<f64>() / n;
            let va = (0..k * k).map(|i| (px(a, i) - ma).powi(2)).sum::<f64>() / n;
            let vb = (0..k * k).map(|i| (px(b, i) - mb).powi(2)).sum::<f64>() / n;
            let cov = (0..k * k).map(|i| (px(a, i) - ma) * (px(b, i) - mb)).sum::<f64>() / n;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Two antipodal feature clusters on a `side×side` grid with a fraction of
/// the warm-up labels flipped.
pub struct NoisyClusters {
    /// Unit-norm `[(side²) × dim]` features.
    pub features: Tensor,
    pub truth: Vec<u8>,
    pub flipped: Vec<bool>,
    /// `[2 × side × side]` warm-up probabilities; every pixel puts
    /// `confidence` on its (possibly flipped) label.
    pub warmup: Tensor,
    pub side: usize,
}

pub fn noisy_clusters(seed: u64, side: usize, dim: usize, flip: f64, confidence: f64) -> NoisyClusters {
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    let n = side * side;
    let mut mu: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect::<Vec<f64>>();
    let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
    mu.iter_mut().for_each(|v| *v /= norm);
    let truth: Vec<u8> = (0..n).map(|_| r.random_range(0..2u8)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut flipped = vec![false; n];
    for &i in &order[..(flip * n as f64).round() as usize] {
        flipped[i] = true;
    }
    let mut feats = Vec::with_capacity(n * dim);
    for &y in &truth {
        let sign = if y == 0 { 1.0 } else { -1.0 };
        let mut f: Vec<f64> = mu
            .iter()
            .map(|&m| sign * m + 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut r))
            .collect();
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        f.iter_mut().for_each(|v| *v /= norm);
        feats.extend(f);
    }
    let mut probs = vec![0.0; 2 * n];
    for i in 0..n {
        let label = (truth[i] ^ flipped[i] as u8) as usize;
        probs[label * n + i] = confidence;
        probs[(1 - label) * n + i] = 1.0 - confidence;
    }
    NoisyClusters {
        features: Tensor::new(&[n, dim], feats).unwrap(),
        truth,
        flipped,
        warmup: Tensor::new(&[2, side, side], probs).unwrap(),
        side,
    }
}
