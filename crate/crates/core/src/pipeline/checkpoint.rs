//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.txt    run configuration
//! <dir>/progress.txt  stage and completed steps
//! <dir>/model.bin     segmentation model parameters
//! <dir>/state.bin     optimizer moments and stage-specific state
//! <dir>/log.csv       training log up to the saved step
//! ```

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{contract_err, file_err, Error, Result};
use crate::kv::{KvReader, KvWriter};
use crate::params::ParamStore;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Adapt,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Warmup => "warmup",
            Self::Adapt => "adapt",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "warmup" => Some(Self::Warmup),
            "adapt" => Some(Self::Adapt),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real = f64> {
    pub config: RunConfig,
    pub stage: Stage,
    /// Completed steps of the stage.
    pub step: u64,
    /// Steps the stage runs for in total.
    pub total: u64,
    pub params: ParamStore<T>,
    pub state: ParamStore<T>,
    pub log: String,
}

pub const CONFIG_FILE: &str = "config.txt";
const PROGRESS_FILE: &str = "progress.txt";
const MODEL_FILE: &str = "model.bin";
const STATE_FILE: &str = "state.bin";
pub const LOG_FILE: &str = "log.csv";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(file_err(path))
}

impl<T: Real> Checkpoint<T> {
    pub fn is_complete(&self) -> bool {
        self.step >= self.total
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(file_err(dir))?;
        write(&dir.join(CONFIG_FILE), self.config.to_text())?;
        let mut kv = KvWriter::new();
        kv.put("stage", self.stage.name())
            .put("step", self.step)
            .put("total", self.total);
        write(&dir.join(PROGRESS_FILE), kv.finish())?;
        self.params.save(dir.join(MODEL_FILE))?;
        self.state.save(dir.join(STATE_FILE))?;
        write(&dir.join(LOG_FILE), &self.log)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = RunConfig::load(dir.join(CONFIG_FILE))?;
        let path = dir.join(PROGRESS_FILE);
        let text = std::fs::read_to_string(&path).map_err(file_err(&path))?;
        let mut kv = KvReader::parse(&text)?;
        let (name, at) = kv.raw("stage").ok_or_else(|| Error::Parse {
            offset: text.len(),
            msg: format!("{}: missing key \"stage\"", path.display()),
        })?;
        let stage = Stage::from_name(&name).ok_or_else(|| Error::Parse {
            offset: at,
            msg: format!("unknown stage {name:?}"),
        })?;
        let step = kv.require("step")?;
        let total = kv.require("total")?;
        kv.finish()?;
        let path = dir.join(LOG_FILE);
        let log = std::fs::read_to_string(&path).map_err(file_err(&path))?;
        Ok(Self {
            config,
            stage,
            step,
            total,
            params: ParamStore::load(dir.join(MODEL_FILE))?,
            state: ParamStore::load(dir.join(STATE_FILE))?,
            log,
        })
    }

    /// Model parameters and configuration only, for inference.
    pub fn load_model(dir: impl AsRef<Path>) -> Result<(RunConfig, ParamStore<T>)> {
        let dir = dir.as_ref();
        Ok((
            RunConfig::load(dir.join(CONFIG_FILE))?,
            ParamStore::load(dir.join(MODEL_FILE))?,
        ))
    }
}

/// Copies every tensor of `src` into `dst` under `prefix`.
pub fn put_prefixed<T: Real>(dst: &mut ParamStore<T>, prefix: &str, src: &ParamStore<T>) {
    for (name, t) in src.iter() {
        dst.insert(format!("{prefix}{name}"), t.clone());
    }
}

/// The tensors of `src` whose names start with `prefix`, prefix removed.
pub fn take_prefixed<T: Real>(src: &ParamStore<T>, prefix: &str) -> ParamStore<T> {
    let mut out = ParamStore::new();
    for (name, t) in src.iter() {
        if let Some(rest) = name.strip_prefix(prefix) {
            out.insert(rest, t.clone());
        }
    }
    out
}

/// Copies values from `saved` into `store`, requiring every tensor of
/// `store` to be present with the same shape.
pub fn restore_exact<T: Real>(store: &mut ParamStore<T>, saved: &ParamStore<T>, what: &str) -> Result<()> {
    let n = store.load_matching(saved)?;
    if n != store.len() || saved.len() != store.len() {
        return Err(contract_err!(
            "{what}: checkpoint holds {} tensors, {n} of {} expected ones matched",
            saved.len(),
            store.len()
        ));
    }
    Ok(())
}
