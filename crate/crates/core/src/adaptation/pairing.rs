//! Two-way SSIM pairing of source and target images.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::ssim::{ssim_prepared, GrayImage, SsimPrepared};
use crate::error::{contract_err, Error, Result};

/// Side of the grayscale thumbnails compared during pairing.
pub const PAIR_SIDE: usize = 64;

/// Which direction of the search selected a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    /// Best target for a source image.
    SourceWay,
    /// Best source for a target image.
    TargetWay,
    /// Selected from both directions.
    Both,
}

impl Origin {
    fn name(self) -> &'static str {
        match self {
            Self::SourceWay => "s-way",
            Self::TargetWay => "t-way",
            Self::Both => "both",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "s-way" => Some(Self::SourceWay),
            "t-way" => Some(Self::TargetWay),
            "both" => Some(Self::Both),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair {
    pub source: usize,
    pub target: usize,
    pub ssim: f64,
    pub origin: Origin,
}

/// Deduplicated union of both pairing directions, sorted by (source, target).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Full `|sources| × |targets|` SSIM matrix, computed on grayscale images
/// resampled to 64×64.
pub fn similarity_matrix(sources: &[GrayImage], targets: &[GrayImage]) -> Result<Vec<Vec<f64>>> {
    let prep = |imgs: &[GrayImage]| -> Vec<SsimPrepared> {
        imgs.par_iter()
            .map(|g| SsimPrepared::new(g.resized(PAIR_SIDE, PAIR_SIDE)))
            .collect()
    };
    let (ps, pt) = (prep(sources), prep(targets));
    ps.par_iter()
        .map(|s| pt.iter().map(|t| ssim_prepared(s, t)).collect())
        .collect()
}

/// For every source its most similar target, for every target its most
/// similar source, merged without duplicates. Indices refer to the input
/// slices.
pub fn pair_two_way(sources: &[GrayImage], targets: &[GrayImage]) -> Result<PairSet> {
    if sources.is_empty() || targets.is_empty() {
        return Err(contract_err!(
            "pairing needs images on both sides, got {} source and {} target",
            sources.len(),
            targets.len()
        ));
    }
    let sim = similarity_matrix(sources, targets)?;
    Ok(pairs_from_matrix(&sim))
}

/// Two-way selection on a precomputed similarity matrix.
pub fn pairs_from_matrix(sim: &[Vec<f64>]) -> PairSet {
    let ns = sim.len();
    let nt = sim.first().map_or(0, Vec::len);
    let mut pairs: Vec<Pair> = Vec::new();
    let mut add = |s: usize, t: usize, origin: Origin| {
        if let Some(p) = pairs.iter_mut().find(|p| p.source == s && p.target == t) {
            if p.origin != origin {
                p.origin = Origin::Both;
            }
        } else {
            pairs.push(Pair {
                source: s,
                target: t,
                ssim: sim[s][t],
                origin,
            });
        }
    };
    for (s, row) in sim.iter().enumerate() {
        add(s, argmax(row.iter().copied()), Origin::SourceWay);
    }
    for t in 0..nt {
        add(argmax((0..ns).map(|s| sim[s][t])), t, Origin::TargetWay);
    }
    pairs.sort_by_key(|p| (p.source, p.target));
    PairSet { pairs }
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One `source_path<TAB>target_path<TAB>ssim` line per pair. Each line
    /// is preceded by a `# <origin>` comment.
    pub fn to_tsv(
        &self,
        source_path: impl Fn(usize) -> String,
        target_path: impl Fn(usize) -> String,
    ) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let _ = writeln!(out, "# {}", p.origin.name());
            let _ = writeln!(out, "{}\t{}\t{}", source_path(p.source), target_path(p.target), p.ssim);
        }
        out
    }

    /// Parses [`PairSet::to_tsv`] output. `resolve_source`/`resolve_target`
    /// map a path back to an index. Lines without a preceding origin comment
    /// count as selected from both sides.
    pub fn from_tsv(
        text: &str,
        resolve_source: impl Fn(&str) -> Option<usize>,
        resolve_target: impl Fn(&str) -> Option<usize>,
    ) -> Result<Self> {
        let err = |offset: usize, msg: String| Error::Parse { offset, msg };
        let mut pairs = Vec::new();
        let mut origin = None;
        let mut offset = 0;
        for raw in text.split_inclusive('\n') {
            let at = offset;
            offset += raw.len();
            let line = raw.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                origin = Origin::from_name(c.trim());
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [s, t, v] = fields[..] else {
                return Err(err(at, format!("expected 3 tab-separated fields, got {}", fields.len())));
            };
            let source = resolve_source(s).ok_or_else(|| err(at, format!("unknown source image {s:?}")))?;
            let target = resolve_target(t).ok_or_else(|| err(at, format!("unknown target image {t:?}")))?;
            let ssim: f64 = v
                .parse()
                .map_err(|e| err(at + s.len() + t.len() + 2, format!("bad ssim {v:?}: {e}")))?;
            pairs.push(Pair {
                source,
                target,
                ssim,
                origin: origin.take().unwrap_or(Origin::Both),
            });
        }
        pairs.sort_by_key(|p| (p.source, p.target));
        pairs.dedup_by_key(|p| (p.source, p.target));
        Ok(Self { pairs })
    }
}
