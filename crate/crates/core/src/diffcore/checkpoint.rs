//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! b"WBCK"  u32 version
//! u32 n_networks, then per network:
//!     str name, u32 n_layers, n_layers x (u32 in, u32 out, u8 activation),
//!     n_layers x (in*out f64 weights, out f64 bias)
//! u32 n_scalars, then per scalar: str name, f64 value
//! u32 n_blobs, then per blob: str name, u64 len, len bytes
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8. Readable metadata
//! lives in a JSON sidecar next to the binary file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mlp::{Activation, Dense, Mlp};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub networks: Vec<(String, Mlp)>,
    pub scalars: Vec<(String, f64)>,
    pub blobs: Vec<(String, Vec<u8>)>,
}

/// Human-readable sidecar written as `<checkpoint>.meta.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub seed: u64,
    pub step_count: u64,
    pub env: String,
    pub transform: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

pub(crate) struct Writer {
    pub(crate) buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new() -> Self {
        Self { buf: Vec::new() }
    }
    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
    pub(crate) fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    pub(crate) fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec())
            .map_err(|e| Error::Format(format!("invalid utf-8 name: {e}")))
    }
    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_mlp(w: &mut Writer, mlp: &Mlp) {
    w.u32(mlp.layers().len() as u32);
    for l in mlp.layers() {
        w.u32(l.in_dim() as u32);
        w.u32(l.out_dim() as u32);
        w.u8(l.activation.code());
    }
    for l in mlp.layers() {
        w.f64s(l.weight.data());
        w.f64s(l.bias.data());
    }
}

fn read_mlp(r: &mut Reader<'_>) -> Result<Mlp> {
    let n = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let i = r.u32()? as usize;
        let o = r.u32()? as usize;
        let act = Activation::from_code(r.u8()?)?;
        if i == 0 || o == 0 {
            return Err(Error::Format("zero-width layer".into()));
        }
        shapes.push((i, o, act));
    }
    let mut layers = Vec::with_capacity(n);
    for (i, o, activation) in shapes {
        let weight = Tensor::matrix(i, o, r.f64s(i * o)?);
        let bias = Tensor::matrix(1, o, r.f64s(o)?);
        layers.push(Dense {
            weight,
            bias,
            activation,
        });
    }
    Mlp::from_layers(layers)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_network(mut self, name: &str, mlp: &Mlp) -> Self {
        self.networks.push((name.to_string(), mlp.clone()));
        self
    }

    pub fn with_scalar(mut self, name: &str, value: f64) -> Self {
        self.scalars.push((name.to_string(), value));
        self
    }

    pub fn with_blob(mut self, name: &str, bytes: Vec<u8>) -> Self {
        self.blobs.push((name.to_string(), bytes));
        self
    }

    pub fn network(&self, name: &str) -> Result<&Mlp> {
        self.networks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("checkpoint has no network `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::Format(format!("checkpoint has no scalar `{name}`")))
    }

    pub fn blob(&self, name: &str) -> Option<&[u8]> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.buf.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.networks.len() as u32);
        for (name, mlp) in &self.networks {
            w.str(name);
            write_mlp(&mut w, mlp);
        }
        w.u32(self.scalars.len() as u32);
        for (name, v) in &self.scalars {
            w.str(name);
            w.f64(*v);
        }
        w.u32(self.blobs.len() as u32);
        for (name, b) in &self.blobs {
            w.str(name);
            w.u64(b.len() as u64);
            w.buf.extend_from_slice(b);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a workbench checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            ck.networks.push((name, read_mlp(&mut r)?));
        }
        for _ in 0..r.u32()? {
            let name = r.str()?;
            ck.scalars.push((name, r.f64()?));
        }
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let n = r.u64()? as usize;
            ck.blobs.push((name, r.bytes(n)?.to_vec()));
        }
        r.finish()?;
        Ok(ck)
    }

    /// Hex SHA-256 of the serialized bytes.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            ..meta.clone()
        };
        fs::write(meta_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
        Ok(serde_json::from_str(&fs::read_to_string(meta_path(path))?)?)
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.json");
    PathBuf::from(os)
}
