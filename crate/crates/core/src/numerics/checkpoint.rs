//! Checkpoint container.
//!
//! ```text
//! ALTER-CHECKPOINT 1
//! meta <key> <value...>
//! tensor <name> <d0,d1,...|-> <byte offset>
//! payload <byte length>
//! <little-endian f64 payload>
//! ```
//!
//! The text manifest is followed directly by the payload; offsets are
//! relative to the first payload byte. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "ALTER-CHECKPOINT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            tensors: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    /// Overwrites every parameter of `store` from this checkpoint; every
    /// store parameter must be present with a matching shape.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::shape(format!(
                    "parameter {name}: model expects {:?}, checkpoint has {:?}",
                    store.get(id).shape(),
                    t.shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut manifest = format!("{MAGIC} {VERSION}\n");
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Format(format!("invalid meta entry {k:?}")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Format(format!("invalid tensor name {name:?}")));
            }
            let dims = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            };
            manifest.push_str(&format!("tensor {name} {dims} {offset}\n"));
            offset += t.numel() * 8;
        }
        manifest.push_str(&format!("payload {offset}\n"));
        w.write_all(manifest.as_bytes())?;
        let mut buf = Vec::with_capacity(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<_>, line: &mut String| -> Result<()> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(Error::Truncated("checkpoint manifest ended early".into()));
            }
            if line.ends_with('\n') {
                line.pop();
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        let version = line
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Format("not a checkpoint (bad magic)".into()))?
            .parse::<u32>()
            .map_err(|_| Error::Format("bad checkpoint version".into()))?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let mut meta = BTreeMap::new();
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let payload_len = loop {
            next_line(&mut r, &mut line)?;
            let mut parts = line.splitn(2, ' ');
            let kind = parts.next().unwrap_or_default();
            let rest = parts.next().unwrap_or_default();
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(Error::Format(format!("bad tensor line {line:?}")));
                    }
                    let shape = if f[1] == "-" {
                        Vec::new()
                    } else {
                        f[1].split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| Error::Format(format!("bad shape in {line:?}")))?
                    };
                    let off = f[2].parse().map_err(|_| Error::Format(format!("bad offset in {line:?}")))?;
                    entries.push((f[0].to_string(), shape, off));
                }
                "payload" => {
                    break rest.parse::<usize>().map_err(|_| Error::Format("bad payload length".into()))?;
                }
                _ => return Err(Error::Format(format!("unexpected manifest line {line:?}"))),
            }
        };
        let mut payload = Vec::with_capacity(payload_len);
        r.read_to_end(&mut payload)?;
        if payload.len() != payload_len {
            return Err(Error::Truncated(format!(
                "payload holds {} bytes, manifest declares {payload_len}",
                payload.len()
            )));
        }
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, off) in entries {
            let n: usize = shape.iter().product();
            let end = off + n * 8;
            if end > payload.len() {
                return Err(Error::Truncated(format!("tensor {name} extends past the payload")));
            }
            let data = payload[off..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::read_from(fs::File::open(path)?)
    }
}
