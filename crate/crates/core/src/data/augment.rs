//! Training-time augmentation: horizontal flip, photometric distortion and
//! random cropping, with geometry shared between an image and its per-pixel
//! annotations.

use rand::Rng;

use super::generate::Sample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip: bool,
    pub photometric: bool,
    /// Square crop side; 0 or the image side disables cropping.
    pub crop: usize,
    /// Maximum additive brightness shift.
    pub brightness: f64,
    /// Range of the contrast factor around the image mean.
    pub contrast: (f64, f64),
    /// Maximum per-channel additive shift.
    pub channel_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            photometric: true,
            crop: 64,
            brightness: 0.1,
            contrast: (0.8, 1.2),
            channel_jitter: 0.05,
        }
    }
}

/// Attempts at finding a crop that contains a line pixel.
pub const CROP_RETRIES: usize = 8;

/// Geometric part of an augmentation, applied identically to an image and
/// every map aligned with it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub flip: bool,
    pub y0: usize,
    pub x0: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl Geometry {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            flip: false,
            y0: 0,
            x0: 0,
            out_h: h,
            out_w: w,
            in_h: h,
            in_w: w,
        }
    }

    /// Draws a flip and a crop window. With a `label`, up to
    /// [`CROP_RETRIES`] windows are tried for one containing class 1; the
    /// last draw is kept otherwise.
    pub fn sample(h: usize, w: usize, cfg: &AugmentConfig, label: Option<&[u8]>, rng: &mut impl Rng) -> Self {
        let mut g = Self::identity(h, w);
        g.flip = cfg.flip && rng.random_bool(0.5);
        let crop = if cfg.crop == 0 { h.min(w) } else { cfg.crop.min(h).min(w) };
        if crop < h || crop < w {
            g.out_h = crop;
            g.out_w = crop;
            for _ in 0..CROP_RETRIES {
                g.y0 = rng.random_range(0..=h - crop);
                g.x0 = rng.random_range(0..=w - crop);
                match label {
                    Some(l) if !g.apply(l, 1).contains(&1) => continue,
                    _ => break,
                }
            }
        }
        g
    }

    /// Applies the transform to channel-planar data `[channels×H×W]`.
    pub fn apply<T: Copy>(&self, data: &[T], channels: usize) -> Vec<T> {
        let (h, w) = (self.in_h, self.in_w);
        assert_eq!(data.len(), channels * h * w, "map does not match the geometry");
        let mut out = Vec::with_capacity(channels * self.out_h * self.out_w);
        for c in 0..channels {
            for y in 0..self.out_h {
                for x in 0..self.out_w {
                    let sx = self.x0 + x;
                    let sx = if self.flip { w - 1 - sx } else { sx };
                    out.push(data[c * h * w + (self.y0 + y) * w + sx]);
                }
            }
        }
        out
    }

    /// Writes a transformed map back to its source positions in `dst`;
    /// pixels outside the crop window are left alone.
    pub fn scatter_into<T: Copy>(&self, view: &[T], channels: usize, dst: &mut [T]) {
        let (h, w) = (self.in_h, self.in_w);
        assert_eq!(view.len(), channels * self.out_h * self.out_w, "view does not match the geometry");
        assert_eq!(dst.len(), channels * h * w, "map does not match the geometry");
        let mut i = 0;
        for c in 0..channels {
            for y in 0..self.out_h {
                for x in 0..self.out_w {
                    let sx = self.x0 + x;
                    let sx = if self.flip { w - 1 - sx } else { sx };
                    dst[c * h * w + (self.y0 + y) * w + sx] = view[i];
                    i += 1;
                }
            }
        }
    }

    pub fn apply_tensor(&self, t: &Tensor) -> Tensor {
        let c = t.shape()[0];
        Tensor::new(&[c, self.out_h, self.out_w], self.apply(t.data(), c)).expect("shape follows the geometry")
    }
}

/// Brightness, contrast and per-channel shifts; result clamped to `[0, 1]`.
pub fn photometric(image: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Tensor {
    let c = image.shape()[0];
    let plane = image.len() / c;
    let shift = rng.random_range(-cfg.brightness..=cfg.brightness);
    let gain = rng.random_range(cfg.contrast.0..=cfg.contrast.1);
    let jitter: Vec<f64> = (0..c)
        .map(|_| rng.random_range(-cfg.channel_jitter..=cfg.channel_jitter))
        .collect();
    let mean = image.sum() / image.len() as f64;
    Tensor::from_fn(image.shape(), |i| {
        ((image.data()[i] - mean) * gain + mean + shift + jitter[i / plane]).clamp(0.0, 1.0)
    })
}

/// Full augmentation of a labelled sample.
pub fn augment(s: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let g = Geometry::sample(s.height(), s.width(), cfg, Some(&s.label), rng);
    let mut image = g.apply_tensor(&s.image);
    if cfg.photometric {
        image = photometric(&image, cfg, rng);
    }
    Sample {
        id: s.id,
        image,
        label: g.apply(&s.label, 1),
    }
}

/// Mirror image of a sample; its own inverse.
pub fn hflip(s: &Sample) -> Sample {
    let g = Geometry {
        flip: true,
        ..Geometry::identity(s.height(), s.width())
    };
    Sample {
        id: s.id,
        image: g.apply_tensor(&s.image),
        label: g.apply(&s.label, 1),
    }
}
