//! On-disk container shared by saved networks and spiking models.
//!
//! ```text
//! <MAGIC> <version>\n
//! <header: one line of compact JSON>\n
//! <payload: little-endian f32 blobs, back to back>
//! ```
//!
//! The header lists every blob as `{name, shape, offset, len}` with offset
//! and length counted in `f32` elements from the start of the payload.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Default)]
pub(crate) struct Payload {
    pub entries: Vec<BlobEntry>,
    bytes: Vec<u8>,
}

impl Payload {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f32]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let offset = self.bytes.len() / 4;
        self.bytes.reserve(data.len() * 4);
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(BlobEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            len: data.len(),
        });
    }
}

pub(crate) fn encode<H: Serialize>(magic: &str, version: u32, header: &H, payload: &Payload) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(payload.bytes.len() + 4096);
    writeln!(out, "{magic} {version}")?;
    serde_json::to_writer(&mut out, header)?;
    out.push(b'\n');
    out.extend_from_slice(&payload.bytes);
    Ok(out)
}

pub(crate) struct Decoded<H> {
    pub version: u32,
    pub header: H,
    payload: Vec<u8>,
    payload_offset: usize,
}

impl<H> Decoded<H> {
    pub fn blob(&self, entry: &BlobEntry) -> Result<Vec<f32>> {
        if entry.shape.iter().product::<usize>() != entry.len {
            return Err(Error::Format(format!(
                "blob {} has shape {:?} but length {}",
                entry.name, entry.shape, entry.len
            )));
        }
        let start = entry.offset * 4;
        let end = start + entry.len * 4;
        if end > self.payload.len() {
            return Err(Error::Truncated {
                offset: (self.payload_offset + self.payload.len()) as u64,
                context: format!("blob {} needs bytes up to {}", entry.name, self.payload_offset + end),
            });
        }
        Ok(self.payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

pub(crate) fn decode<H: for<'de> Deserialize<'de>>(bytes: Vec<u8>, magic: &str) -> Result<Decoded<H>> {
    let first = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("missing {magic} signature line")))?;
    let sig = std::str::from_utf8(&bytes[..first]).map_err(|_| Error::Format("signature is not text".into()))?;
    let mut parts = sig.split(' ');
    if parts.next() != Some(magic) {
        return Err(Error::Format(format!(
            "expected a {magic} file, found signature {sig:?}"
        )));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad version in signature {sig:?}")))?;
    let rest = &bytes[first + 1..];
    let second = rest.iter().position(|&b| b == b'\n').ok_or(Error::Truncated {
        offset: bytes.len() as u64,
        context: "header line not terminated".into(),
    })?;
    let header: H = serde_json::from_slice(&rest[..second])?;
    let payload_offset = first + 1 + second + 1;
    let payload = bytes[payload_offset..].to_vec();
    Ok(Decoded {
        version,
        header,
        payload,
        payload_offset,
    })
}

pub(crate) fn find<'a>(entries: &'a [BlobEntry], name: &str) -> Result<&'a BlobEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Format(format!("missing blob {name}")))
}
