//! Binary checkpoints: magic `STLDM1`, a `u32` tensor count, then per tensor
//! a length-prefixed UTF-8 name, `u32` rank, `u64` dims and little-endian
//! `f64` values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::write_atomic;
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"STLDM1";

pub type Named = Vec<(String, Tensor)>;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Named> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("dimension overflow".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("dimension overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode(tensors))
}

pub fn load(path: &Path) -> Result<Named> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Parameter values, and with `optimizer` also the AdamW moments and step
/// counts under `adam.m.`, `adam.v.` and `adam.step.`.
pub fn store_tensors(store: &ParamStore, optimizer: bool) -> Named {
    let mut out = Vec::new();
    for id in store.ids() {
        let name = store.name(id);
        let p = store.get(id);
        out.push((name.to_string(), p.value.clone()));
        if optimizer {
            out.push((format!("adam.m.{name}"), p.m.clone()));
            out.push((format!("adam.v.{name}"), p.v.clone()));
            out.push((format!("adam.step.{name}"), Tensor::scalar(p.step as f64)));
        }
    }
    out
}

/// Loads every parameter of `store` from `tensors`; optimizer state is
/// restored when present.
pub fn restore_store(store: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
    let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let value = find(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
        let p = store.get_mut(id);
        if value.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "parameter {name} has shape {:?} in the checkpoint, expected {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value.clone();
        if let (Some(m), Some(v), Some(s)) = (
            find(&format!("adam.m.{name}")),
            find(&format!("adam.v.{name}")),
            find(&format!("adam.step.{name}")),
        ) {
            p.m = m.clone();
            p.v = v.clone();
            p.step = s.data()[0] as u64;
        }
    }
    Ok(())
}

/// `meta.*` entries as name/value pairs.
pub fn meta(tensors: &[(String, Tensor)]) -> Vec<(&str, &Tensor)> {
    tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix("meta.").map(|k| (k, t)))
        .collect()
}

pub fn meta_value(tensors: &[(String, Tensor)], key: &str) -> Option<f64> {
    meta(tensors)
        .into_iter()
        .find(|(k, _)| *k == key)
        .and_then(|(_, t)| t.data().first().copied())
}

/// Stores text (such as a config dump) as one byte per element.
pub fn text_tensor(s: &str) -> Tensor {
    let bytes: Vec<f64> = s.bytes().map(f64::from).collect();
    Tensor::new(&[bytes.len()], bytes).expect("1-d")
}

pub fn tensor_text(t: &Tensor) -> Result<String> {
    let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
    String::from_utf8(bytes).map_err(|_| Error::Format("meta text is not UTF-8".into()))
}
