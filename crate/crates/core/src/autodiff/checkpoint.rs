//! Parameter checkpoints: named tensors in a flat little-endian binary file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "TSCKPT01"
//! count   u32
//! entry*  { name_len u32, name utf-8, ndim u32, dims u64*, data f64* }
//! ```
//!
//! The format round-trips bit-exactly: floats are stored as raw IEEE 754
//! bits. Writes go through a temp file and an atomic rename.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Tensor;

const MAGIC: &[u8; 8] = b"TSCKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A named-parameter snapshot, ordered as saved.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    /// Snapshot of live parameters, in registry order.
    pub fn from_params(params: &[(String, Tensor)]) -> Self {
        let entries = params
            .iter()
            .map(|(name, t)| CheckpointEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.value(),
            })
            .collect();
        Checkpoint { entries }
    }

    /// Copies stored values into live parameters; names and shapes must match.
    pub fn load_into(&self, params: &[(String, Tensor)]) -> Result<()> {
        if self.entries.len() != params.len() {
            return Err(Error::format(format!(
                "checkpoint has {} parameters, model has {}",
                self.entries.len(),
                params.len()
            )));
        }
        for (entry, (name, tensor)) in self.entries.iter().zip(params) {
            if &entry.name != name {
                return Err(Error::format(format!(
                    "checkpoint parameter `{}` does not match model parameter `{}`",
                    entry.name, name
                )));
            }
            if entry.shape != tensor.shape() {
                return Err(Error::format(format!(
                    "parameter `{name}`: checkpoint shape {:?} vs model shape {:?}",
                    entry.shape,
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(&entry.data);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for entry in &self.entries {
            let name = entry.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
            for &d in &entry.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &entry.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> std::result::Result<&[u8], String> {
            if *pos + n > bytes.len() {
                return Err("truncated checkpoint".to_string());
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err("bad magic, not a checkpoint file".to_string());
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| "parameter name is not utf-8".to_string())?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(CheckpointEntry { name, shape, data });
        }
        if pos != bytes.len() {
            return Err("trailing bytes after last entry".to_string());
        }
        Ok(Checkpoint { entries })
    }
}

/// Elementwise arithmetic mean of several checkpoints.
///
/// All inputs must share the same parameter names and shapes, in order.
pub fn average_entries(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let Some(first) = checkpoints.first() else {
        return Err(Error::contract("no checkpoints to average".to_string()));
    };
    let scale = 1.0 / checkpoints.len() as f64;
    let mut out = first.clone();
    for entry in &mut out.entries {
        for v in &mut entry.data {
            *v *= scale;
        }
    }
    for ckpt in &checkpoints[1..] {
        if ckpt.entries.len() != out.entries.len() {
            return Err(Error::format(
                "checkpoint topology mismatch: differing parameter counts".to_string(),
            ));
        }
        for (acc, entry) in out.entries.iter_mut().zip(&ckpt.entries) {
            if acc.name != entry.name || acc.shape != entry.shape {
                return Err(Error::format(format!(
                    "checkpoint topology mismatch at parameter `{}`",
                    acc.name
                )));
            }
            for (a, v) in acc.data.iter_mut().zip(&entry.data) {
                *a += v * scale;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            entries: vec![
                CheckpointEntry {
                    name: "w".to_string(),
                    shape: vec![2, 2],
                    data: vec![0.1, -0.25, 1e-300, 3.5],
                },
                CheckpointEntry {
                    name: "b".to_string(),
                    shape: vec![2],
                    data: vec![f64::MIN_POSITIVE, -0.0],
                },
            ],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        for (a, b) in ckpt.entries.iter().zip(&loaded.entries) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn average_of_identical_copies_is_identity() {
        let c = sample();
        let avg = average_entries(&[c.clone(), c.clone(), c.clone(), c.clone(), c.clone()])
            .unwrap();
        for (a, b) in avg.entries.iter().zip(&c.entries) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn average_of_zero_and_two_is_one() {
        let mut a = sample();
        let mut b = sample();
        for e in &mut a.entries {
            e.data.iter_mut().for_each(|v| *v = 0.0);
        }
        for e in &mut b.entries {
            e.data.iter_mut().for_each(|v| *v = 2.0);
        }
        let avg = average_entries(&[a, b]).unwrap();
        for e in &avg.entries {
            assert!(e.data.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        }
    }

    #[test]
    fn mismatched_topology_is_rejected() {
        let a = sample();
        let mut b = sample();
        b.entries[0].name = "other".to_string();
        assert!(average_entries(&[a, b]).is_err());
    }
}
