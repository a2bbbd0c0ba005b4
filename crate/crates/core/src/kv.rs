//! Line-based `key = value` text files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may not repeat,
//! and every key must be consumed by the reader.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug)]
struct Entry {
    value: String,
    offset: usize,
    used: bool,
}

/// Parsed file; values are taken out by key and leftovers are rejected by
/// [`KvReader::finish`].
#[derive(Debug)]
pub struct KvReader {
    entries: BTreeMap<String, Entry>,
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

impl KvReader {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut offset = 0;
        for raw in text.split_inclusive('\n') {
            let line_start = offset;
            offset += raw.len();
            let line = raw.trim_end_matches(['\n', '\r']);
            let trimmed = line.trim_start();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(parse_err(line_start, format!("expected `key = value`, got {line:?}")));
            };
            let key = line[..eq].trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(parse_err(line_start, format!("invalid key {key:?}")));
            }
            let value_start = line_start + eq + 1;
            let value = line[eq + 1..].trim().to_string();
            if entries.contains_key(key) {
                return Err(parse_err(line_start, format!("duplicate key {key:?}")));
            }
            entries.insert(
                key.to_string(),
                Entry {
                    value,
                    offset: value_start,
                    used: false,
                },
            );
        }
        Ok(Self { entries })
    }

    /// Raw value and its byte offset.
    pub fn raw(&mut self, key: &str) -> Option<(String, usize)> {
        let e = self.entries.get_mut(key)?;
        e.used = true;
        Some((e.value.clone(), e.offset))
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((v, at)) => v
                .parse()
                .map(Some)
                .map_err(|e| parse_err(at, format!("{key}: cannot parse {v:?}: {e}"))),
        }
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((v, at)) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|e| parse_err(at, format!("{key}: cannot parse {p:?}: {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Two comma-separated values.
    pub fn pair<T: FromStr + Copy>(&mut self, key: &str) -> Result<Option<(T, T)>>
    where
        T::Err: Display,
    {
        let at = self.entries.get(key).map_or(0, |e| e.offset);
        match self.list::<T>(key)? {
            None => Ok(None),
            Some(v) if v.len() == 2 => Ok(Some((v[0], v[1]))),
            Some(v) => Err(parse_err(at, format!("{key}: expected 2 values, got {}", v.len()))),
        }
    }

    /// Fails on the first key nobody asked for.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().find(|(_, e)| !e.used) {
            None => Ok(()),
            Some((k, e)) => Err(parse_err(e.offset, format!("unknown key {k:?}"))),
        }
    }
}

/// Accumulates `key = value` lines.
#[derive(Debug, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        self.out.push_str(&format!("# {text}\n"));
        self
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn list<T: Display>(&mut self, key: &str, values: &[T]) -> &mut Self {
        let v: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.put(key, v.join(", "))
    }

    pub fn pair<T: Display>(&mut self, key: &str, (a, b): (T, T)) -> &mut Self {
        self.put(key, format!("{a}, {b}"))
    }

    pub fn finish(&mut self) -> String {
        std::mem::take(&mut self.out)
    }
}

/// Rewrites `text` with `key=value` overrides applied. Every overridden key
/// must already be present; comments are dropped.
pub fn apply_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<String> {
    let mut lines: Vec<(String, String)> = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    for (i, o) in overrides.iter().enumerate() {
        let o = o.as_ref();
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| parse_err(0, format!("override #{} {o:?} is not key=value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        match lines.iter_mut().find(|(key, _)| key == k) {
            Some(entry) => entry.1 = v.to_string(),
            None => return Err(parse_err(0, format!("override #{}: unknown key {k:?}", i + 1))),
        }
    }
    Ok(lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
}
