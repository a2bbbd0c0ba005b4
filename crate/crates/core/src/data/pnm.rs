//! Binary PGM (P5) and PPM (P6) reading and writing.
//!
//! Header grammar: magic, then width, height and maxval as decimal integers
//! separated by whitespace, with `#` comments running to end of line allowed
//! anywhere whitespace is. A single whitespace byte separates maxval from the
//! raster. Samples are one byte for maxval < 256 and two big-endian bytes
//! otherwise.
//!
//! Float images are quantised as `round(clamp(v, 0, 1) · 255)` on write and
//! read back as `q / maxval`, so 8-bit data round-trips exactly.

use std::path::Path;

use crate::error::{file_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    /// P5, one channel.
    Gray,
    /// P6, three channels.
    Rgb,
}

impl PnmKind {
    pub fn channels(self) -> usize {
        match self {
            Self::Gray => 1,
            Self::Rgb => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub samples: Vec<u16>,
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    /// Returns the value and the offset of its first digit.
    fn number(&mut self, what: &str, max: u64) -> Result<(u64, usize)> {
        let start_ws = self.pos;
        self.skip_space_and_comments();
        if self.pos == start_ws {
            return Err(parse_err(self.pos, format!("expected whitespace before {what}")));
        }
        let start = self.pos;
        let mut value: u64 = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value * 10 + u64::from(b - b'0');
            if value > max {
                return Err(parse_err(start, format!("{what} exceeds {max}")));
            }
            self.pos += 1;
        }
        if self.pos == start {
            return match self.bytes.get(self.pos) {
                None => Err(parse_err(self.pos, format!("file ends before {what}"))),
                Some(&b) => Err(parse_err(self.pos, format!("expected {what}, found byte 0x{b:02x}"))),
            };
        }
        Ok((value, start))
    }
}

/// Largest width or height accepted.
pub const MAX_SIDE: u64 = 1 << 20;

impl Pnm {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let kind = match bytes.get(..2) {
            Some(b"P5") => PnmKind::Gray,
            Some(b"P6") => PnmKind::Rgb,
            Some(_) => return Err(parse_err(0, "unsupported magic, expected P5 or P6")),
            None => return Err(parse_err(bytes.len(), "file ends inside the magic number")),
        };
        let mut c = Cursor { bytes, pos: 2 };
        let (width, width_at) = c.number("width", MAX_SIDE)?;
        let (height, height_at) = c.number("height", MAX_SIDE)?;
        let (maxval, maxval_at) = c.number("maxval", 65535)?;
        let (width, height, maxval) = (width as usize, height as usize, maxval as u16);
        if width == 0 || height == 0 {
            let at = if width == 0 { width_at } else { height_at };
            return Err(parse_err(at, format!("empty image {width}x{height}")));
        }
        if maxval == 0 {
            return Err(parse_err(maxval_at, "maxval must be at least 1"));
        }
        match bytes.get(c.pos) {
            Some(b) if b.is_ascii_whitespace() => c.pos += 1,
            Some(_) => return Err(parse_err(c.pos, "expected a whitespace byte after maxval")),
            None => return Err(parse_err(c.pos, "file ends before the raster")),
        }
        let n = width * height * kind.channels();
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        let raster = &bytes[c.pos..];
        if raster.len() < need {
            return Err(parse_err(
                bytes.len(),
                format!("raster truncated: {} of {need} bytes", raster.len()),
            ));
        }
        if raster.len() > need {
            return Err(parse_err(c.pos + need, "trailing bytes after the raster"));
        }
        let samples: Vec<u16> = if wide {
            raster.chunks_exact(2).map(|p| u16::from_be_bytes([p[0], p[1]])).collect()
        } else {
            raster.iter().map(|&b| u16::from(b)).collect()
        };
        if let Some(i) = samples.iter().position(|&s| s > maxval) {
            let at = c.pos + if wide { 2 * i } else { i };
            return Err(parse_err(at, format!("sample {} exceeds maxval {maxval}", samples[i])));
        }
        Ok(Self {
            kind,
            width,
            height,
            maxval,
            samples,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let magic = match self.kind {
            PnmKind::Gray => "P5",
            PnmKind::Rgb => "P6",
        };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(file_err(path))?;
        Self::parse(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(file_err(path))
    }

    /// `[C×H×W]` tensor with samples scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let c = self.kind.channels();
        let (h, w) = (self.height, self.width);
        let scale = f64::from(self.maxval);
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            f64::from(self.samples[p * c + ch]) / scale
        })
    }

    /// 8-bit image from a `[1|3 × H × W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let kind = match c {
            1 => PnmKind::Gray,
            3 => PnmKind::Rgb,
            _ => return Err(crate::error::shape_err!("cannot store {c} channels as PNM")),
        };
        let samples = (0..h * w * c)
            .map(|i| {
                let (p, ch) = (i / c, i % c);
                quantize(t.data()[ch * h * w + p])
            })
            .collect();
        Ok(Self {
            kind,
            width: w,
            height: h,
            maxval: 255,
            samples,
        })
    }

    /// 8-bit single-channel map, e.g. class indices.
    pub fn gray(width: usize, height: usize, values: &[u8]) -> Self {
        Self {
            kind: PnmKind::Gray,
            width,
            height,
            maxval: 255,
            samples: values.iter().map(|&v| u16::from(v)).collect(),
        }
    }

    /// Samples as bytes; fails for maxval above 255.
    pub fn bytes(&self) -> Result<Vec<u8>> {
        if self.maxval > 255 {
            return Err(Error::Contract(format!("maxval {} does not fit in a byte", self.maxval)));
        }
        Ok(self.samples.iter().map(|&s| s as u8).collect())
    }
}

pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u16
}
