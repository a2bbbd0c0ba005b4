//! Windowed structural similarity on grayscale images.

use crate::error::{shape_err, Result};
use crate::kernels;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Side of the square averaging window.
pub const WINDOW: usize = 8;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
/// Dynamic range of unit-range images.
pub const RANGE: f64 = 1.0;

/// Single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage<T: Real = f64> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> GrayImage<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("{} pixels for a {height}x{width} image", data.len()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Luma `0.299 R + 0.587 G + 0.114 B` of a `[3×H×W]` tensor; a
    /// `[1×H×W]` tensor is taken as is.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let n = h * w;
        let d = t.data();
        let data = match c {
            1 => d.to_vec(),
            3 => {
                let (r, g, b) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
                (0..n).map(|i| r * d[i] + g * d[n + i] + b * d[2 * n + i]).collect()
            }
            _ => return Err(shape_err!("expected 1 or 3 channels, got {c}")),
        };
        Self::new(h, w, data)
    }

    /// Resampled to `height × width`: block averages for integer shrink
    /// factors, bilinear otherwise.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let (fy, fx) = (self.height / height.max(1), self.width / width.max(1));
        if fy > 0 && fx > 0 && fy * height == self.height && fx * width == self.width {
            let area = T::from_usize_lossy(fy * fx);
            let mut data = vec![T::zero(); height * width];
            for y in 0..self.height {
                for x in 0..self.width {
                    data[(y / fy) * width + x / fx] += self.data[y * self.width + x];
                }
            }
            data.iter_mut().for_each(|v| *v /= area);
            return Self {
                height,
                width,
                data,
            };
        }
        Self {
            height,
            width,
            data: kernels::upsample_forward(
                &self.data,
                1,
                (self.height, self.width),
                (height, width),
            ),
        }
    }
}

/// Summed-area table with a zero border: `(h+1) × (w+1)`.
fn integral<T: Real>(h: usize, w: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    let mut s = vec![T::zero(); (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = T::zero();
        for x in 0..w {
            row += f(y * w + x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

#[inline]
fn box_sum<T: Real>(s: &[T], w: usize, y: usize, x: usize, k: usize) -> T {
    let stride = w + 1;
    (s[(y + k) * stride + x + k] - s[y * stride + x + k]) - (s[(y + k) * stride + x] - s[y * stride + x])
}

/// Per-image sums reused across many comparisons.
#[derive(Clone, Debug)]
pub struct SsimPrepared<T: Real = f64> {
    image: GrayImage<T>,
    sum: Vec<T>,
    sq: Vec<T>,
}

impl<T: Real> SsimPrepared<T> {
    pub fn new(image: GrayImage<T>) -> Self {
        let (h, w) = (image.height, image.width);
        let d = &image.data;
        let sum = integral(h, w, |i| d[i]);
        let sq = integral(h, w, |i| d[i] * d[i]);
        Self { image, sum, sq }
    }

    pub fn image(&self) -> &GrayImage<T> {
        &self.image
    }
}

/// Mean SSIM over all `8×8` windows (stride 1) of two equally sized images.
/// Images smaller than the window use a single window covering the image.
pub fn ssim<T: Real>(a: &GrayImage<T>, b: &GrayImage<T>) -> Result<T> {
    ssim_prepared(&SsimPrepared::new(a.clone()), &SsimPrepared::new(b.clone()))
}

pub fn ssim_prepared<T: Real>(a: &SsimPrepared<T>, b: &SsimPrepared<T>) -> Result<T> {
    let (ia, ib) = (&a.image, &b.image);
    if (ia.height, ia.width) != (ib.height, ib.width) {
        return Err(shape_err!(
            "ssim of a {}x{} and a {}x{} image",
            ia.height,
            ia.width,
            ib.height,
            ib.width
        ));
    }
    let (h, w) = (ia.height, ia.width);
    if h == 0 || w == 0 {
        return Err(shape_err!("ssim of an empty image"));
    }
    let k = WINDOW.min(h).min(w);
    let cross = integral(h, w, |i| ia.data[i] * ib.data[i]);
    let n = T::from_usize_lossy(k * k);
    let c1 = T::lit((K1 * RANGE) * (K1 * RANGE));
    let c2 = T::lit((K2 * RANGE) * (K2 * RANGE));
    let two = T::lit(2.0);
    let mut total = T::zero();
    for y in 0..=h - k {
        for x in 0..=w - k {
            let mu_a = box_sum(&a.sum, w, y, x, k) / n;
            let mu_b = box_sum(&b.sum, w, y, x, k) / n;
            let var_a = box_sum(&a.sq, w, y, x, k) / n - mu_a * mu_a;
            let var_b = box_sum(&b.sq, w, y, x, k) / n - mu_b * mu_b;
            let cov = box_sum(&cross, w, y, x, k) / n - mu_a * mu_b;
            let num = (two * mu_a * mu_b + c1) * (two * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
        }
    }
    Ok(total / T::from_usize_lossy((h - k + 1) * (w - k + 1)))
}
