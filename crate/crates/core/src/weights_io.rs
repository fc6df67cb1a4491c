//! Weight serialization.
//!
//! Format (all integers little-endian):
//!
//! ```text
//! magic "LDNW" | u32 version=1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 ndim | u32 dims... | f32 data...
//! ```
//!
//! Tensors are written sorted by name, so two saves of the same graph are
//! byte-identical. Loading validates the whole file against the target graph
//! before mutating anything: a truncated or mismatched file leaves the graph
//! untouched.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"LDNW";
const VERSION: u32 = 1;

/// Serialize every named tensor of `graph` (weights and running statistics).
pub fn encode_weights<S: Scalar>(graph: &Graph<S>) -> Vec<u8> {
    let mut tensors = graph.named_tensors();
    tensors.sort_by(|(a, _), (b, _)| a.cmp(b));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.tof() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated weights file: needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parse an LDNW byte stream into (name, shape, data) triples.
fn decode(bytes: &[u8]) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}, expected {VERSION}")));
    }
    let count = c.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let ndim = c.take(1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4, &format!("data of `{name}`"))?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push((name, shape, data));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", bytes.len() - c.pos)));
    }
    Ok(tensors)
}

/// Copy tensors from an LDNW byte stream into `graph`.
///
/// The file must contain exactly the graph's tensor set with matching shapes;
/// any failure is reported before the graph is touched. A successful load
/// also marks batchnorm running statistics as valid.
pub fn decode_weights_into<S: Scalar>(graph: &mut Graph<S>, bytes: &[u8]) -> Result<()> {
    let mut loaded: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for (name, shape, data) in decode(bytes)? {
        if loaded.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}` in weights file")));
        }
    }
    for (name, t) in graph.named_tensors() {
        match loaded.get(&name) {
            None => return Err(Error::Format(format!("weights file is missing tensor `{name}`"))),
            Some((shape, _)) if shape != t.shape() => {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {shape:?} in the file but {:?} in the graph",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    let graph_names: Vec<String> = graph.named_tensors().into_iter().map(|(n, _)| n).collect();
    if let Some(extra) = loaded.keys().find(|n| !graph_names.contains(n)) {
        return Err(Error::Format(format!("weights file has tensor `{extra}` not present in the graph")));
    }
    for (name, t) in graph.named_tensors_mut() {
        let (_, data) = &loaded[&name];
        for (dst, &src) in t.data_mut().iter_mut().zip(data) {
            *dst = S::fromf(src as f64);
        }
        t.grad = None;
    }
    graph.mark_stats_loaded();
    Ok(())
}

pub fn save_weights<S: Scalar>(graph: &Graph<S>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(graph)).map_err(Error::Io)
}

pub fn load_weights<S: Scalar>(graph: &mut Graph<S>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = fs::read(path).map_err(Error::Io)?;
    decode_weights_into(graph, &bytes)
}
