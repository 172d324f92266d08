//! Binary weights file.
//!
//! ```text
//! "VTFF"  u32 version  u32 count
//! count × { u32 name_len, name (UTF-8), u32 rank, rank × u64 dim, f32 data }
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VTFF";
pub const VERSION: u32 = 1;

/// Serializes every parameter and buffer of `model` in visiting order.
pub fn encode_weights(model: &impl Module<f32>) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    model.visit(&mut |p| entries.push((p.name.clone(), p.value.clone())));
    let mut seen = HashSet::new();
    if let Some((dup, _)) = entries.iter().find(|(n, _)| !seen.insert(n.as_str())) {
        return Err(Error::Tensor {
            name: dup.clone(),
            reason: "duplicate name".into(),
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated file while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a weights file into named tensors, in file order.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a weights file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("entry {i} has a non-UTF-8 name")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = usize::try_from(r.u64("dimension")?).map_err(|_| Error::Format("dimension overflow".into()))?;
            shape.push(d);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data = r
            .take(numel, "tensor data")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Tensor {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        if !seen.insert(name.clone()) {
            return Err(Error::Tensor {
                name,
                reason: "duplicate name".into(),
            });
        }
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Replaces every parameter of `model` with the tensor of the same name.
/// Nothing is modified unless the whole file matches the model.
pub fn apply_weights(model: &mut impl Module<f32>, entries: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let mut map: HashMap<String, Tensor<f32>> = entries.into_iter().collect();
    let mut err = None;
    let mut expected = HashSet::new();
    model.visit(&mut |p| {
        expected.insert(p.name.clone());
        if err.is_some() {
            return;
        }
        match map.get(&p.name) {
            None => {
                err = Some(Error::Tensor {
                    name: p.name.clone(),
                    reason: "missing from weights file".into(),
                })
            }
            Some(t) if t.shape() != p.value.shape() => {
                err = Some(Error::Tensor {
                    name: p.name.clone(),
                    reason: format!("shape {:?} in file, model expects {:?}", t.shape(), p.value.shape()),
                })
            }
            Some(_) => {}
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let mut extra: Vec<_> = map.keys().filter(|k| !expected.contains(*k)).cloned().collect();
    extra.sort();
    if let Some(name) = extra.into_iter().next() {
        return Err(Error::Tensor {
            name,
            reason: "not a parameter of this model".into(),
        });
    }
    model.visit_mut(&mut |p| {
        p.value = map.remove(&p.name).expect("validated above");
    });
    Ok(())
}

pub fn save_weights(model: &impl Module<f32>, path: &Path) -> Result<()> {
    let bytes = encode_weights(model)?;
    let tmp = path.with_extension("vtff.partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_weights(model: &mut impl Module<f32>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    apply_weights(model, decode_weights(&bytes)?)
}
