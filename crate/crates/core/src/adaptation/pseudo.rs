use std::path::Path;

use rayon::prelude::*;

use super::prototypes::PrototypeBank;
use crate::data::Pnm;
use crate::error::{contract_err, file_err, shape_err, Error, Result};
use crate::kernels;
use crate::kv::{KvReader, KvWriter};
use crate::model::{argmax_classes, infer_target_sourcefree, QuadFormer};
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Warmup,
    Corrected,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Self::Warmup => "warmup",
            Self::Corrected => "corrected",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "warmup" => Some(Self::Warmup),
            "corrected" => Some(Self::Corrected),
            _ => None,
        }
    }
}

/// Soft pseudo label of one target image.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel<T: Real = f64> {
    pub id: usize,
    /// `[classes × H × W]` probabilities from the warm-up model. Never modified.
    pub warmup: Tensor<T>,
    /// Current probabilities, equal to `warmup` until corrected.
    pub probs: Tensor<T>,
    /// Pixels whose top probability reaches the threshold.
    pub valid: Vec<bool>,
    pub provenance: Provenance,
}

fn validity<T: Real>(probs: &Tensor<T>, tau: T) -> Result<Vec<bool>> {
    let (c, h, w) = probs.dims3()?;
    let n = h * w;
    let d = probs.data();
    Ok((0..n)
        .map(|i| (0..c).map(|k| d[k * n + i]).fold(T::neg_infinity(), T::max) >= tau)
        .collect())
}

impl<T: Real> PseudoLabel<T> {
    pub fn from_probs(id: usize, probs: Tensor<T>, tau: T) -> Result<Self> {
        let valid = validity(&probs, tau)?;
        Ok(Self {
            id,
            warmup: probs.clone(),
            probs,
            valid,
            provenance: Provenance::Warmup,
        })
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.probs.shape()[1], self.probs.shape()[2])
    }

    /// Argmax class per pixel, ties to the lower class.
    pub fn hard_labels(&self) -> Vec<u8> {
        argmax_classes(&self.probs)
    }

    /// Top class probability per pixel.
    pub fn confidence(&self) -> Vec<T> {
        let (c, h, w) = (self.classes(), self.grid().0, self.grid().1);
        let n = h * w;
        let d = self.probs.data();
        (0..n)
            .map(|i| (0..c).map(|k| d[k * n + i]).fold(T::neg_infinity(), T::max))
            .collect()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Replaces the current probabilities and recomputes validity.
    pub fn set_probs(&mut self, probs: Tensor<T>, tau: T, provenance: Provenance) -> Result<()> {
        if probs.shape() != self.warmup.shape() {
            return Err(shape_err!(
                "pseudo label {} has shape {:?}, got {:?}",
                self.id,
                self.warmup.shape(),
                probs.shape()
            ));
        }
        self.valid = validity(&probs, tau)?;
        self.probs = probs;
        self.provenance = provenance;
        Ok(())
    }
}

/// Average-pools `[C×H×W]` probabilities by an integer factor.
pub fn pool_probs<T: Real>(probs: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = probs.dims3()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err!("cannot pool a {h}x{w} map by {factor}"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let area = T::from_usize_lossy(factor * factor);
    let mut out = vec![T::zero(); c * oh * ow];
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(k * oh + y / factor) * ow + x / factor] += probs.data()[(k * h + y) * w + x];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= area);
    Tensor::new(&[c, oh, ow], out)
}

/// Reweights the fixed warm-up probabilities of `label` by prototype
/// affinity and renormalizes.
///
/// `features` are unit-norm `[(h·w) × D]` target features on the `grid`;
/// the `[h×w]` affinity map is upsampled bilinearly to the label resolution.
/// A pixel whose affinities are all equal keeps its warm-up probabilities.
pub fn correct_pseudo_labels<T: Real>(
    label: &PseudoLabel<T>,
    features: &Tensor<T>,
    grid: (usize, usize),
    bank: &PrototypeBank<T>,
    temperature: T,
    tau: T,
) -> Result<PseudoLabel<T>> {
    let (c, h, w) = label.warmup.dims3()?;
    if bank.classes() != c {
        return Err(contract_err!("{} prototypes for {c}-class labels", bank.classes()));
    }
    let (n, _) = features.dims2()?;
    if n != grid.0 * grid.1 {
        return Err(shape_err!("{n} feature rows on a {}x{} grid", grid.0, grid.1));
    }
    let k = bank.affinity(features, temperature)?;
    let k_map = kernels::transpose(k.data(), n, c);
    let k_full = if grid == (h, w) {
        k_map
    } else {
        kernels::upsample_forward(&k_map, c, grid, (h, w))
    };
    let hw = h * w;
    let p0 = label.warmup.data();
    let mut out = p0.to_vec();
    for i in 0..hw {
        let first = k_full[i];
        if (1..c).all(|j| k_full[j * hw + i] == first) {
            continue;
        }
        let mut s = T::zero();
        for j in 0..c {
            let v = k_full[j * hw + i] * p0[j * hw + i];
            out[j * hw + i] = v;
            s += v;
        }
        if s > T::zero() {
            for j in 0..c {
                out[j * hw + i] /= s;
            }
        } else {
            for j in 0..c {
                out[j * hw + i] = p0[j * hw + i];
            }
        }
    }
    let mut corrected = label.clone();
    corrected.set_probs(Tensor::new(&[c, h, w], out)?, tau, Provenance::Corrected)?;
    Ok(corrected)
}

/// Pseudo labels for a set of target images.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet<T: Real = f64> {
    pub tau: T,
    pub labels: Vec<PseudoLabel<T>>,
}

const MANIFEST: &str = "labels.txt";

impl<T: Real> PseudoLabelSet<T> {
    /// Source-free predictions of `model` on each `(id, image)`; pixels
    /// with top probability `≥ tau` are valid.
    pub fn warmup(
        model: &QuadFormer,
        store: &ParamStore<T>,
        images: &[(usize, Tensor<T>)],
        tau: T,
    ) -> Result<Self> {
        let labels = images
            .par_iter()
            .map(|(id, img)| {
                let mask = infer_target_sourcefree(model, store, img)?;
                let probs = mask.probs.expect("source-free inference attaches probabilities");
                PseudoLabel::from_probs(*id, probs, tau)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tau, labels })
    }

    pub fn get(&self, id: usize) -> Option<&PseudoLabel<T>> {
        self.labels.iter().find(|l| l.id == id)
    }

    pub fn get_mut(&mut self, id: usize) -> Option<&mut PseudoLabel<T>> {
        self.labels.iter_mut().find(|l| l.id == id)
    }

    /// Writes `NNNN.pgm` hard labels and `NNNN.conf` confidence maps
    /// (little-endian f64 per pixel) plus a `labels.txt` manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(file_err(dir))?;
        let classes = self.labels.first().map_or(2, PseudoLabel::classes);
        let provenance = self
            .labels
            .first()
            .map_or(Provenance::Warmup, |l| l.provenance);
        let mut kv = KvWriter::new();
        kv.put("classes", classes)
            .put("tau", self.tau)
            .put("provenance", provenance.name())
            .list(
                "ids",
                &self.labels.iter().map(|l| l.id).collect::<Vec<_>>(),
            );
        let manifest = dir.join(MANIFEST);
        std::fs::write(&manifest, kv.finish()).map_err(file_err(&manifest))?;
        self.labels.par_iter().try_for_each(|l| {
            let (h, w) = l.grid();
            Pnm::gray(w, h, &l.hard_labels()).write(dir.join(format!("{:04}.pgm", l.id)))?;
            let bytes: Vec<u8> = l
                .confidence()
                .iter()
                .flat_map(|v| v.as_f64().to_le_bytes())
                .collect();
            let path = dir.join(format!("{:04}.conf", l.id));
            std::fs::write(&path, bytes).map_err(file_err(&path))
        })
    }

    /// Reads a set written by [`PseudoLabelSet::save`]. Soft probabilities
    /// are rebuilt from hard label and confidence, which is exact for two
    /// classes; with more classes the remainder is spread evenly.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&manifest).map_err(file_err(&manifest))?;
        let mut kv = KvReader::parse(&text)?;
        let classes: usize = kv.require("classes")?;
        let tau: f64 = kv.require("tau")?;
        let (prov, off) = kv
            .raw("provenance")
            .ok_or_else(|| Error::Parse {
                offset: text.len(),
                msg: "missing key \"provenance\"".into(),
            })?;
        let provenance = Provenance::from_name(&prov).ok_or(Error::Parse {
            offset: off,
            msg: format!("unknown provenance {prov:?}"),
        })?;
        let ids: Vec<usize> = kv.list("ids")?.unwrap_or_default();
        kv.finish()?;
        if classes < 2 {
            return Err(contract_err!("pseudo labels need at least 2 classes"));
        }
        let tau = T::lit(tau);
        let labels = ids
            .par_iter()
            .map(|&id| {
                let pgm = Pnm::read(dir.join(format!("{id:04}.pgm")))?;
                let hard = pgm.bytes()?;
                let (h, w) = (pgm.height, pgm.width);
                let path = dir.join(format!("{id:04}.conf"));
                let raw = std::fs::read(&path).map_err(file_err(&path))?;
                if raw.len() != h * w * 8 {
                    return Err(Error::Parse {
                        offset: raw.len().min(h * w * 8),
                        msg: format!("{}: expected {} confidence bytes", path.display(), h * w * 8),
                    });
                }
                let n = h * w;
                let rest = T::from_usize_lossy(classes - 1);
                let mut probs = vec![T::zero(); classes * n];
                for (i, (chunk, &cls)) in raw.chunks_exact(8).zip(&hard).enumerate() {
                    let conf = T::lit(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
                    let cls = cls as usize;
                    if cls >= classes {
                        return Err(contract_err!("label {cls} in {id:04}.pgm outside {classes} classes"));
                    }
                    for k in 0..classes {
                        probs[k * n + i] = if k == cls {
                            conf
                        } else {
                            (T::one() - conf) / rest
                        };
                    }
                }
                let mut l = PseudoLabel::from_probs(id, Tensor::new(&[classes, h, w], probs)?, tau)?;
                l.provenance = provenance;
                Ok(l)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tau, labels })
    }
}
