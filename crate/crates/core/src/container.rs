//! Tensor container shared by the weight (`TDW1`) and contribution-cache
//! (`TDC1`) files.
//!
//! Layout: 4-byte magic, `u32` little-endian header length, a JSON header
//! object (sorted keys) carrying a `tensors` table of
//! `{name, shape, offset}`, then the raw little-endian `f32` payload.
//! Offsets are in bytes from the start of the payload.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

pub fn encode(magic: &[u8; 4], mut meta: Map<String, Value>, tensors: &[TensorRef<'_>]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for t in tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Dimension(format!(
                "tensor {} shape {:?} vs {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        entries.push(TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset });
        offset += t.data.len() * 4;
    }
    meta.insert("tensors".into(), serde_json::to_value(&entries)?);
    let header = serde_json::to_vec(&Value::Object(meta))?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Format("header larger than 4 GiB".into()))?;

    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(magic);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        for x in t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub struct Decoded {
    pub meta: Map<String, Value>,
    pub tensors: Vec<(TensorEntry, Vec<f32>)>,
}

impl Decoded {
    pub fn take(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let idx = self
            .tensors
            .iter()
            .position(|(e, _)| e.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        let (entry, data) = self.tensors.swap_remove(idx);
        Ok((entry.shape, data))
    }
}

pub fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let payload_start = 8usize
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| Error::Format("header length exceeds file".into()))?;
    let mut meta: Map<String, Value> = match serde_json::from_slice(&bytes[8..payload_start])? {
        Value::Object(m) => m,
        _ => return Err(Error::Format("header is not a JSON object".into())),
    };
    let entries: Vec<TensorEntry> = serde_json::from_value(
        meta.remove("tensors").ok_or_else(|| Error::Format("header lacks tensor table".into()))?,
    )?;
    let payload = &bytes[payload_start..];
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let n: usize = e.shape.iter().product();
        let end = e
            .offset
            .checked_add(n * 4)
            .filter(|end| *end <= payload.len() && e.offset % 4 == 0)
            .ok_or_else(|| Error::Format(format!("tensor {} out of bounds", e.name)))?;
        let data: Vec<f32> = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Format(format!("tensor {} has non-finite value at {bad}", e.name)));
        }
        tensors.push((e, data));
    }
    Ok(Decoded { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32];
        let mut meta = Map::new();
        meta.insert("k".into(), Value::from(7));
        let bytes = encode(
            b"TEST",
            meta,
            &[
                TensorRef { name: "a".into(), shape: vec![2, 2], data: &a },
                TensorRef { name: "b".into(), shape: vec![1], data: &b },
            ],
        )
        .unwrap();
        let mut d = decode(b"TEST", &bytes).unwrap();
        assert_eq!(d.meta["k"], 7);
        assert_eq!(d.take("b").unwrap(), (vec![1], vec![5.0]));
        assert_eq!(d.take("a").unwrap().1, a.to_vec());
        assert!(decode(b"NOPE", &bytes).is_err());
        assert!(decode(b"TEST", &bytes[..bytes.len() - 2]).is_err());
    }
}
