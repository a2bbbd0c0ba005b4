//! Procedural thin-line scenes for two visual domains.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Flat,
    Gradient,
    /// Multi-octave value noise.
    Noise,
}

impl Texture {
    pub fn name(self) -> &'static str {
        match self {
            Self::Flat => "flat",
            Self::Gradient => "gradient",
            Self::Noise => "noise",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "flat" => Some(Self::Flat),
            "gradient" => Some(Self::Gradient),
            "noise" => Some(Self::Noise),
            _ => None,
        }
    }
}

/// Everything that differs between the two domains: background texture,
/// colour and line contrast. Geometry lives in [`SceneSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub textures: Vec<Texture>,
    /// Range of the mean background intensity.
    pub brightness: (f64, f64),
    /// Maximum per-channel colour offset of the background.
    pub tint: f64,
    /// Gradient span or noise amplitude.
    pub texture_amplitude: f64,
    /// Range of the fraction by which a line darkens the background.
    pub contrast: (f64, f64),
    /// Width in pixels of the anti-aliased edge ramp.
    pub edge_softness: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub pixel_noise: f64,
}

impl Appearance {
    /// Bright flat or gradient backgrounds with dark crisp lines.
    pub fn source_default() -> Self {
        Self {
            textures: vec![Texture::Flat, Texture::Gradient],
            brightness: (0.6, 0.9),
            tint: 0.05,
            texture_amplitude: 0.2,
            contrast: (0.55, 0.75),
            edge_softness: 1.0,
            pixel_noise: 0.0,
        }
    }

    /// Dim noise-textured backgrounds with low-contrast lines.
    pub fn target_default() -> Self {
        Self {
            textures: vec![Texture::Noise],
            brightness: (0.25, 0.45),
            tint: 0.08,
            texture_amplitude: 0.12,
            contrast: (0.25, 0.45),
            edge_softness: 1.5,
            pixel_noise: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |(a, b): (f64, f64)| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a <= b;
        if self.textures.is_empty() {
            return Err(Error::Config("at least one background texture is required".into()));
        }
        if !unit(self.brightness) || !unit(self.contrast) {
            return Err(Error::Config("brightness and contrast ranges must lie in [0, 1]".into()));
        }
        if self.edge_softness < 1.0 || self.tint < 0.0 || self.texture_amplitude < 0.0 || self.pixel_noise < 0.0 {
            return Err(Error::Config("invalid appearance parameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Square image side, a multiple of 32.
    pub size: usize,
    /// Inclusive range of lines per image.
    pub lines: (usize, usize),
    /// Range of line widths in pixels, within [1, 3].
    pub width: (f64, f64),
    pub appearance: Appearance,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 32 != 0 {
            return Err(Error::Config(format!("image size {} is not a positive multiple of 32", self.size)));
        }
        if self.lines.0 == 0 || self.lines.0 > self.lines.1 {
            return Err(Error::Config(format!("line count range {:?} must start at 1 or more", self.lines)));
        }
        if !(1.0 <= self.width.0 && self.width.0 <= self.width.1 && self.width.1 <= 3.0) {
            return Err(Error::Config(format!("line width range {:?} outside [1, 3]", self.width)));
        }
        self.appearance.validate()
    }
}

/// One image with its per-pixel class map (0 background, 1 line).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `[3×H×W]` in `[0, 1]`.
    pub image: Tensor,
    pub label: Vec<u8>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Image rounded to the 8-bit grid used on disk.
    pub fn quantized(mut self) -> Self {
        for v in self.image.data_mut() {
            *v = f64::from(super::pnm::quantize(*v)) / 255.0;
        }
        self
    }
}

/// A straight line through `(px, py)` at angle `theta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Line {
    pub px: f64,
    pub py: f64,
    pub theta: f64,
    pub width: f64,
}

impl Line {
    /// Signed perpendicular distance of point `(x, y)`.
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        -(x - self.px) * self.theta.sin() + (y - self.py) * self.theta.cos()
    }

    /// Marks the line's pixels in `label`.
    ///
    /// The line is walked along its major axis one pixel centre at a time.
    /// At each step the strip's extent along the minor axis is `w / |cos|`
    /// of the angle to the major axis; the number of pixels marked is that
    /// extent with its rounding error carried to the next step, and they are
    /// the pixels whose centres are nearest the line. A width-`w` line
    /// crossing an `n`-pixel image therefore marks `round(n·w/|cos|)` pixels
    /// when unclipped: `n` axis-aligned, `round(n·√2)` on the diagonal for
    /// `w = 1`.
    pub fn rasterize(&self, label: &mut [u8], h: usize, w: usize) {
        let (s, c) = self.theta.sin_cos();
        let x_major = c.abs() >= s.abs();
        let (steps, across) = if x_major { (w, h) } else { (h, w) };
        let extent = self.width / if x_major { c.abs() } else { s.abs() };
        let mut acc = 0.0f64;
        for u in 0..steps {
            let t = u as f64 + 0.5;
            let centre = if x_major {
                self.py + (t - self.px) * s / c
            } else {
                self.px + (t - self.py) * c / s
            };
            let k = ((acc + extent).round() - acc.round()) as i64;
            acc += extent;
            let start = (centre - k as f64 / 2.0).round() as i64;
            for v in start..start + k {
                if v < 0 || v >= across as i64 {
                    continue;
                }
                let (x, y) = if x_major { (u, v as usize) } else { (v as usize, u) };
                label[y * w + x] = 1;
            }
        }
    }

    /// Anti-aliased coverage of the pixel centred at `(x, y)`.
    pub fn coverage(&self, x: f64, y: f64, softness: f64) -> f64 {
        ((self.width / 2.0 - self.distance(x, y).abs()) / softness + 0.5).clamp(0.0, 1.0)
    }
}

/// Generator stream for sample `id` of a scene spec.
pub fn sample_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise in roughly `[-1, 1]`, octaves at cell sizes `size/2, size/4, size/8`.
fn value_noise(size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut amp = 0.6;
    let mut cells = 2;
    let mut total = 0.0;
    for _ in 0..3 {
        let g = cells + 1;
        let grid: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cell = size as f64 / cells as f64;
        for y in 0..size {
            let fy = (y as f64 + 0.5) / cell;
            let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for x in 0..size {
                let fx = (x as f64 + 0.5) / cell;
                let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let at = |yy: usize, xx: usize| grid[yy.min(cells) * g + xx.min(cells)];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                out[y * size + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        total += amp;
        amp *= 0.5;
        cells *= 2;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn background(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<f64> {
    let a = &spec.appearance;
    let n = spec.size;
    let texture = a.textures[rng.random_range(0..a.textures.len())];
    let mean = rng.random_range(a.brightness.0..=a.brightness.1);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-a.tint..=a.tint));
    let field: Vec<f64> = match texture {
        Texture::Flat => vec![0.0; n * n],
        Texture::Gradient => {
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = phi.sin_cos();
            (0..n * n)
                .map(|i| {
                    let (y, x) = ((i / n) as f64 + 0.5, (i % n) as f64 + 0.5);
                    ((x / n as f64 - 0.5) * c + (y / n as f64 - 0.5) * s) * a.texture_amplitude
                })
                .collect()
        }
        Texture::Noise => value_noise(n, rng).into_iter().map(|v| v * a.texture_amplitude).collect(),
    };
    let mut img = vec![0.0; 3 * n * n];
    for ch in 0..3 {
        for i in 0..n * n {
            img[ch * n * n + i] = mean + tint[ch] + field[i];
        }
    }
    img
}

/// Renders sample `id` of `spec`. Deterministic in `(spec, id)`.
pub fn generate_sample(spec: &SceneSpec, id: usize) -> Result<Sample> {
    spec.validate()?;
    let n = spec.size;
    let a = &spec.appearance;
    let mut rng = sample_rng(spec.seed, id);
    let mut img = background(spec, &mut rng);
    let count = rng.random_range(spec.lines.0..=spec.lines.1);
    let lines: Vec<(Line, f64)> = (0..count)
        .map(|_| {
            let line = Line {
                px: rng.random_range(0.25..0.75) * n as f64,
                py: rng.random_range(0.25..0.75) * n as f64,
                theta: rng.random_range(0.0..std::f64::consts::PI),
                width: rng.random_range(spec.width.0..=spec.width.1),
            };
            (line, rng.random_range(a.contrast.0..=a.contrast.1))
        })
        .collect();
    let mut label = vec![0u8; n * n];
    for (line, _) in &lines {
        line.rasterize(&mut label, n, n);
    }
    for y in 0..n {
        for x in 0..n {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let dark = lines
                .iter()
                .map(|(l, k)| l.coverage(cx, cy, a.edge_softness) * k)
                .fold(0.0, f64::max);
            for ch in 0..3 {
                let v = &mut img[ch * n * n + y * n + x];
                *v *= 1.0 - dark;
            }
        }
    }
    if a.pixel_noise > 0.0 {
        let normal = rand_distr::Normal::new(0.0, a.pixel_noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut img {
            *v += rng.sample(normal);
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    debug_assert!(label.iter().any(|&l| l == 1));
    Ok(Sample {
        id,
        image: Tensor::new(&[3, n, n], img)?,
        label,
    })
}

/// Samples `ids` of one domain, generated in parallel.
pub fn generate_domain(spec: &SceneSpec, ids: std::ops::Range<usize>) -> Result<Vec<Sample>> {
    spec.validate()?;
    if ids.is_empty() {
        return Err(Error::Contract("asked for an empty set of samples".into()));
    }
    ids.into_par_iter().map(|id| generate_sample(spec, id)).collect()
}
