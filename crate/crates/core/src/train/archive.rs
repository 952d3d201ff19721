//! Keyed tensor archive: UTF-8 header, blank line, little-endian `f32`
//! payload.
//!
//! ```text
//! PIXELSAIL-ARCHIVE 1
//! @key value
//! name 3x4 0
//! other 5 48
//!
//! <payload>
//! ```
//!
//! Offsets are byte positions inside the payload.

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &str = "PIXELSAIL-ARCHIVE 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    /// Ordered `@key value` header entries; keys may repeat.
    pub meta: Vec<(String, String)>,
    pub tensors: IndexMap<String, Tensor>,
}

impl Archive {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::checkpoint(format!("header entry {k:?} cannot be encoded")));
            }
            head.push_str(&format!("@{k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) || name.starts_with('@') {
                return Err(Error::checkpoint(format!("tensor name {name:?} cannot be encoded")));
            }
            let shape = t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            let shape = if shape.is_empty() { "scalar".to_string() } else { shape };
            head.push_str(&format!("{name} {shape} {offset}\n"));
            offset += 4 * t.numel();
        }
        head.push('\n');
        let mut out = head.into_bytes();
        out.reserve(offset);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<(usize, String)> {
            let start = *pos;
            let end = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::checkpoint(format!("unterminated header line at byte {start}")))?;
            *pos = start + end + 1;
            let line = std::str::from_utf8(&bytes[start..start + end])
                .map_err(|_| Error::checkpoint(format!("header line at byte {start} is not UTF-8")))?;
            Ok((start, line.to_string()))
        };
        let (_, magic) = next_line(&mut pos)?;
        if magic != MAGIC {
            return Err(Error::checkpoint(format!("bad magic {magic:?} at byte 0")));
        }
        let mut meta = Vec::new();
        let mut manifest = Vec::new();
        loop {
            let (at, line) = next_line(&mut pos)?;
            if line.is_empty() {
                break;
            }
            if let Some(rest) = line.strip_prefix('@') {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.push((k.to_string(), v.to_string()));
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 3 {
                return Err(Error::checkpoint(format!("malformed manifest line at byte {at}: {line:?}")));
            }
            let shape: Vec<usize> = if parts[1] == "scalar" {
                Vec::new()
            } else {
                parts[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::checkpoint(format!("bad shape {:?} at byte {at}", parts[1])))?
            };
            let offset: usize = parts[2]
                .parse()
                .map_err(|_| Error::checkpoint(format!("bad offset {:?} at byte {at}", parts[2])))?;
            manifest.push((at, parts[0].to_string(), shape, offset));
        }
        let payload = &bytes[pos..];
        let mut tensors = IndexMap::new();
        let mut expected = 0usize;
        for (at, name, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            if offset != expected {
                return Err(Error::checkpoint(format!(
                    "tensor {name} (manifest byte {at}) starts at payload offset {offset}, expected {expected}"
                )));
            }
            let end = offset + 4 * n;
            if end > payload.len() {
                return Err(Error::checkpoint(format!(
                    "payload truncated: tensor {name} needs bytes {offset}..{end} but only {} are present",
                    payload.len()
                )));
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::checkpoint(format!("duplicate tensor {name} at byte {at}")));
            }
            expected = end;
        }
        if expected != payload.len() {
            return Err(Error::checkpoint(format!(
                "{} trailing payload bytes after offset {expected}",
                payload.len() - expected
            )));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)
            .map_err(|e| Error::checkpoint(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| Error::checkpoint(format!("{}: {e}", path.display())))
    }
}
