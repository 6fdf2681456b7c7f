//! Versioned binary checkpoint container.
//!
//! Layout: `b"QAGNCKPT"`, format version (u32 LE), header length (u64 LE),
//! a JSON header, then the raw little-endian tensor payload. The header
//! carries the checkpoint kind, a free-form metadata object (configs, epoch,
//! scores), the vocabulary hash the parameters were trained against, the
//! tensor index and a SHA-256 of the payload which is verified on load.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::tensor_le_bytes;

const MAGIC: &[u8; 8] = b"QAGNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    vocab_hash: Option<String>,
    meta: serde_json::Value,
    payload_sha256: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub vocab_hash: Option<String>,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, vocab_hash: Option<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            vocab_hash,
            meta,
            tensors: BTreeMap::new(),
        }
    }

    /// Add tensors under `prefix/`.
    pub fn insert_section(&mut self, prefix: &str, tensors: BTreeMap<String, Tensor>) {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}/{k}"), v);
        }
    }

    /// Tensors stored under `prefix/`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn has_section(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn check_vocab(&self, expected: &str) -> Result<()> {
        match &self.vocab_hash {
            Some(h) if h == expected => Ok(()),
            Some(h) => Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint has {h}, dataset has {expected}"
            ))),
            None => Err(Error::Checkpoint(
                "checkpoint carries no vocabulary hash".to_string(),
            )),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = tensor_le_bytes(t)?;
            let dtype = match t.dtype() {
                DType::F64 => "f64",
                _ => "f32",
            };
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dtype.to_string(),
                shape: t.dims().to_vec(),
                offset: payload.len() as u64,
                len: bytes.len() as u64,
            });
            payload.extend_from_slice(&bytes);
        }
        let header = Header {
            kind: self.kind.clone(),
            vocab_hash: self.vocab_hash.clone(),
            meta: self.meta.clone(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = |b: &[u8]| f.write_all(b).map_err(|e| Error::io(&tmp, e));
            w(MAGIC)?;
            w(&FORMAT_VERSION.to_le_bytes())?;
            w(&(header.len() as u64).to_le_bytes())?;
            w(&header)?;
            w(&payload)?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if buf.len() < 20 || &buf[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
        if buf.len() < 20 + hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&buf[20..20 + hlen])?;
        let payload = &buf[20 + hlen..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("payload digest mismatch"));
        }
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
            if end > payload.len() {
                return Err(bad(&format!("tensor `{}` out of bounds", e.name)));
            }
            let bytes = &payload[start..end];
            let t = match e.dtype.as_str() {
                "f64" => {
                    let v: Vec<f64> = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
                "f32" => {
                    let v: Vec<f32> = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
                other => return Err(bad(&format!("unknown dtype `{other}`"))),
            };
            tensors.insert(e.name, t);
        }
        Ok(Self {
            kind: header.kind,
            vocab_hash: header.vocab_hash,
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut ck = Checkpoint::new("unit", Some("abc".into()), serde_json::json!({"epoch": 3}));
        let mut sec = BTreeMap::new();
        sec.insert(
            "w".to_string(),
            Tensor::new(&[[1.5f32, -2.0], [0.25, 4.0]], &Device::Cpu).unwrap(),
        );
        sec.insert("d".to_string(), Tensor::new(&[1e-300f64], &Device::Cpu).unwrap());
        ck.insert_section("model", sec);
        ck.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        back.expect_kind("unit").unwrap();
        back.check_vocab("abc").unwrap();
        assert!(back.check_vocab("other").is_err());
        assert_eq!(back.meta["epoch"], 3);
        let s = back.section("model");
        assert_eq!(
            s["w"].to_vec2::<f32>().unwrap(),
            vec![vec![1.5, -2.0], vec![0.25, 4.0]]
        );
        assert_eq!(s["d"].to_vec1::<f64>().unwrap(), vec![1e-300]);

        let mut raw = std::fs::read(&path).unwrap();
        let n = raw.len();
        raw[n - 1] ^= 0xff;
        std::fs::write(&path, raw).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
