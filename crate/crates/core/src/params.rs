//! Named parameter storage, tape binding, and the checkpoint file format.
//!
//! Checkpoint layout: a UTF-8 manifest
//!
//! ```text
//! quadformer-checkpoint 1
//! tensors <count>
//! <name> <d0>x<d1>x...     (one line per tensor, "scalar" for rank 0)
//! end
//! ```
//!
//! followed immediately by every tensor's elements as little-endian `f64`,
//! in manifest order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{file_err, shape_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

const MAGIC: &str = "quadformer-checkpoint 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a tensor; re-inserting an existing name replaces its value.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
            return ParamId(i);
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies every tensor whose name also exists in `other`.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut n = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(t) = other.by_name(name) {
                if t.shape() != self.tensors[i].shape() {
                    return Err(shape_err!(
                        "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                        t.shape(),
                        self.tensors[i].shape()
                    ));
                }
                self.tensors[i] = t.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = format!("{MAGIC}\ntensors {}\n", self.len());
        for (name, t) in self.iter() {
            let dims = if t.rank() == 0 {
                "scalar".to_string()
            } else {
                t.shape()
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x")
            };
            header.push_str(&format!("{name} {dims}\n"));
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        let mut buf = Vec::with_capacity(self.numel() * 8);
        for t in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(file_err(dir))?;
        }
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        std::fs::write(path, bytes).map_err(file_err(path))
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(file_err(path))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<(usize, String)> {
            let start = *pos;
            let end = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|i| start + i)
                .ok_or(Error::Parse {
                    offset: start,
                    msg: "unterminated manifest line".into(),
                })?;
            *pos = end + 1;
            let line = std::str::from_utf8(&bytes[start..end]).map_err(|_| Error::Parse {
                offset: start,
                msg: "manifest is not UTF-8".into(),
            })?;
            Ok((start, line.to_string()))
        };
        let bad = |offset: usize, msg: &str| Error::Parse {
            offset,
            msg: msg.to_string(),
        };

        let (off, magic) = next_line(&mut pos)?;
        if magic != MAGIC {
            return Err(bad(off, "not a quadformer checkpoint"));
        }
        let (off, count_line) = next_line(&mut pos)?;
        let count: usize = count_line
            .strip_prefix("tensors ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(off, "expected `tensors <count>`"))?;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let (off, line) = next_line(&mut pos)?;
            let (name, dims) = line
                .rsplit_once(' ')
                .ok_or_else(|| bad(off, "expected `<name> <shape>`"))?;
            let shape: Vec<usize> = if dims == "scalar" {
                Vec::new()
            } else {
                dims.split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(off, "malformed shape"))?
            };
            entries.push((name.to_string(), shape));
        }
        let (off, end) = next_line(&mut pos)?;
        if end != "end" {
            return Err(bad(off, "expected `end`"));
        }
        let mut store = Self::new();
        for (name, shape) in entries {
            let n: usize = shape.iter().product();
            let need = n * 8;
            if bytes.len() < pos + need {
                return Err(bad(pos, &format!("payload truncated while reading {name}")));
            }
            let data = bytes[pos..pos + need]
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            pos += need;
            store.insert(name, Tensor::new(&shape, data)?);
        }
        if pos != bytes.len() {
            return Err(bad(pos, "trailing bytes after payload"));
        }
        Ok(store)
    }
}

/// Weight initialisers.
pub mod init {
    use super::*;

    /// Truncated normal (±2σ) with σ = 0.02.
    pub fn trunc_normal<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
        trunc_normal_std(shape, 0.02, rng)
    }

    pub fn trunc_normal_std<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
    }
}

/// Lazily maps parameters of a store onto a tape.
///
/// Each parameter becomes one leaf the first time it is requested, so weights
/// used by several branches accumulate their gradients on a single node.
pub struct Binder<'t, T: Real = f64> {
    tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    trainable: bool,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
}

impl<'t, T: Real> Binder<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            trainable: true,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Binds every parameter as a constant.
    pub fn frozen(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(tape, store)
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore<T> {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            let value = self.store.get(id).clone();
            if self.trainable {
                self.tape.leaf(value)
            } else {
                self.tape.constant(value)
            }
        })
    }

    /// Gradient per parameter; parameters never used get zeros.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        let bound = self.bound.borrow();
        self.store
            .ids()
            .map(|id| match bound[id.0] {
                Some(v) => grads.wrt_or_zero(v),
                None => Tensor::zeros(self.store.get(id).shape()),
            })
            .collect()
    }
}
