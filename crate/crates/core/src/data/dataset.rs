//! On-disk two-domain dataset.
//!
//! ```text
//! <root>/spec.txt
//! <root>/source/images/NNNN.ppm   <root>/source/labels/NNNN.pgm
//! <root>/target/images/NNNN.ppm   <root>/target/labels/NNNN.pgm
//! ```
//!
//! Target ids below `target_train` form the adaptation split and the rest
//! the validation split. Labels are class indices (0 background, 1 line).
//! Held-out source images are not stored; they are regenerated from the
//! manifest on demand.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::generate::{generate_sample, Appearance, Sample, SceneSpec, Texture};
use super::pnm::Pnm;
use crate::error::{file_err, shape_err, Error, Result};
use crate::kv::{KvReader, KvWriter};

pub const MANIFEST: &str = "spec.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub size: usize,
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub lines: (usize, usize),
    pub width: (f64, f64),
    pub source: Appearance,
    pub target: Appearance,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            size: 64,
            source_train: 200,
            source_val: 50,
            target_train: 200,
            target_val: 50,
            lines: (1, 3),
            width: (1.0, 3.0),
            source: Appearance::source_default(),
            target: Appearance::target_default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn dir(self) -> &'static str {
        match self {
            Self::Source => "source",
            Self::Target => "target",
        }
    }
}

impl DatasetSpec {
    /// Scene spec of one domain; the domains share geometry and differ in
    /// appearance and random stream.
    pub fn scene(&self, domain: Domain) -> SceneSpec {
        let (appearance, salt) = match domain {
            Domain::Source => (self.source.clone(), 0x5eed_0001),
            Domain::Target => (self.target.clone(), 0x5eed_0002),
        };
        SceneSpec {
            size: self.size,
            lines: self.lines,
            width: self.width,
            appearance,
            seed: self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_train == 0 || self.target_train == 0 {
            return Err(Error::Config("both training splits need at least one image".into()));
        }
        self.scene(Domain::Source).validate()?;
        self.scene(Domain::Target).validate()
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new();
        w.comment("two-domain thin-line dataset")
            .put("seed", self.seed)
            .put("size", self.size)
            .put("source_train", self.source_train)
            .put("source_val", self.source_val)
            .put("target_train", self.target_train)
            .put("target_val", self.target_val)
            .pair("lines", self.lines)
            .pair("width", self.width);
        for (prefix, a) in [("source", &self.source), ("target", &self.target)] {
            let names: Vec<&str> = a.textures.iter().map(|t| t.name()).collect();
            w.list(&format!("{prefix}.textures"), &names)
                .pair(&format!("{prefix}.brightness"), a.brightness)
                .put(&format!("{prefix}.tint"), a.tint)
                .put(&format!("{prefix}.texture_amplitude"), a.texture_amplitude)
                .pair(&format!("{prefix}.contrast"), a.contrast)
                .put(&format!("{prefix}.edge_softness"), a.edge_softness)
                .put(&format!("{prefix}.pixel_noise"), a.pixel_noise);
        }
        w.finish()
    }

    /// Parses a manifest; missing keys keep their defaults, unknown keys
    /// are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = KvReader::parse(text)?;
        let mut s = Self::default();
        macro_rules! opt {
            ($field:expr, $key:expr) => {
                if let Some(v) = r.get($key)? {
                    $field = v;
                }
            };
        }
        opt!(s.seed, "seed");
        opt!(s.size, "size");
        opt!(s.source_train, "source_train");
        opt!(s.source_val, "source_val");
        opt!(s.target_train, "target_train");
        opt!(s.target_val, "target_val");
        if let Some(v) = r.pair("lines")? {
            s.lines = v;
        }
        if let Some(v) = r.pair("width")? {
            s.width = v;
        }
        for (prefix, a) in [("source", &mut s.source), ("target", &mut s.target)] {
            let key = format!("{prefix}.textures");
            if let Some((raw, at)) = r.raw(&key) {
                a.textures = raw
                    .split(',')
                    .map(|t| {
                        Texture::from_name(t.trim()).ok_or_else(|| Error::Parse {
                            offset: at,
                            msg: format!("{key}: unknown texture {:?}", t.trim()),
                        })
                    })
                    .collect::<Result<_>>()?;
            }
            if let Some(v) = r.pair(&format!("{prefix}.brightness"))? {
                a.brightness = v;
            }
            if let Some(v) = r.pair(&format!("{prefix}.contrast"))? {
                a.contrast = v;
            }
            opt!(a.tint, &format!("{prefix}.tint"));
            opt!(a.texture_amplitude, &format!("{prefix}.texture_amplitude"));
            opt!(a.edge_softness, &format!("{prefix}.edge_softness"));
            opt!(a.pixel_noise, &format!("{prefix}.pixel_noise"));
        }
        r.finish()?;
        s.validate()?;
        Ok(s)
    }

    /// Applies `key=value` overrides; keys are those of the manifest.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        Self::from_text(&crate::kv::apply_overrides(&self.to_text(), overrides)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(file_err(path))?;
        Self::from_text(&text)
    }
}

/// Handle on a generated dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub spec: DatasetSpec,
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(file_err(p))
}

impl Dataset {
    pub fn image_path(&self, domain: Domain, id: usize) -> PathBuf {
        self.root.join(domain.dir()).join("images").join(format!("{id:04}.ppm"))
    }

    pub fn label_path(&self, domain: Domain, id: usize) -> PathBuf {
        self.root.join(domain.dir()).join("labels").join(format!("{id:04}.pgm"))
    }

    /// Renders every stored sample and writes the manifest. Parent
    /// directories are created as needed.
    pub fn generate(spec: &DatasetSpec, root: impl Into<PathBuf>) -> Result<Self> {
        spec.validate()?;
        let ds = Self {
            root: root.into(),
            spec: spec.clone(),
        };
        for d in [Domain::Source, Domain::Target] {
            create_dir(&ds.root.join(d.dir()).join("images"))?;
            create_dir(&ds.root.join(d.dir()).join("labels"))?;
        }
        let jobs: Vec<(Domain, usize)> = (0..spec.source_train)
            .map(|i| (Domain::Source, i))
            .chain((0..spec.target_train + spec.target_val).map(|i| (Domain::Target, i)))
            .collect();
        jobs.par_iter().try_for_each(|&(d, id)| -> Result<()> {
            let s = generate_sample(&spec.scene(d), id)?;
            Pnm::from_tensor(&s.image)?.write(ds.image_path(d, id))?;
            Pnm::gray(s.width(), s.height(), &s.label).write(ds.label_path(d, id))
        })?;
        let manifest = ds.root.join(MANIFEST);
        std::fs::write(&manifest, spec.to_text()).map_err(file_err(&manifest))?;
        Ok(ds)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = root.join(MANIFEST);
        let text = std::fs::read_to_string(&manifest).map_err(file_err(&manifest))?;
        Ok(Self {
            spec: DatasetSpec::from_text(&text)?,
            root,
        })
    }

    pub fn read_image(&self, domain: Domain, id: usize) -> Result<crate::tensor::Tensor> {
        let p = Pnm::read(self.image_path(domain, id))?;
        if p.kind != super::pnm::PnmKind::Rgb {
            return Err(shape_err!("{} is not an RGB image", self.image_path(domain, id).display()));
        }
        Ok(p.to_tensor())
    }

    pub fn read_label(&self, domain: Domain, id: usize) -> Result<Vec<u8>> {
        Pnm::read(self.label_path(domain, id))?.bytes()
    }

    fn read_samples(&self, domain: Domain, ids: std::ops::Range<usize>) -> Result<Vec<Sample>> {
        ids.into_par_iter()
            .map(|id| {
                Ok(Sample {
                    id,
                    image: self.read_image(domain, id)?,
                    label: self.read_label(domain, id)?,
                })
            })
            .collect()
    }

    pub fn source_train(&self) -> Result<Vec<Sample>> {
        self.read_samples(Domain::Source, 0..self.spec.source_train)
    }

    /// Held-out source samples, regenerated and quantised like stored ones.
    pub fn source_val(&self) -> Result<Vec<Sample>> {
        let scene = self.spec.scene(Domain::Source);
        let start = self.spec.source_train;
        (start..start + self.spec.source_val)
            .into_par_iter()
            .map(|id| Ok(generate_sample(&scene, id)?.quantized()))
            .collect()
    }

    /// Adaptation-split target images; labels are not read.
    pub fn target_train_images(&self) -> Result<Vec<(usize, crate::tensor::Tensor)>> {
        (0..self.spec.target_train)
            .into_par_iter()
            .map(|id| Ok((id, self.read_image(Domain::Target, id)?)))
            .collect()
    }

    /// Adaptation-split target labels, for diagnostics only.
    pub fn target_train_labels(&self) -> Result<Vec<Vec<u8>>> {
        (0..self.spec.target_train)
            .into_par_iter()
            .map(|id| self.read_label(Domain::Target, id))
            .collect()
    }

    pub fn target_val(&self) -> Result<Vec<Sample>> {
        let start = self.spec.target_train;
        self.read_samples(Domain::Target, start..start + self.spec.target_val)
    }
}
