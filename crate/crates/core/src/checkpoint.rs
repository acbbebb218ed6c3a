//! Sectioned model checkpoints.
//!
//! Layout (little-endian): `"MSDC"`, u32 version, u32 length + canonical
//! JSON model config, u32 section count, then per section: u32 length +
//! name, u32 tensor count, u64 payload length, payload, SHA-256 of the
//! payload. A payload is a run of (u32 length + tensor name, tensor dump).

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::blocks::{Model, SECTIONS};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSDC";
pub const VERSION: u32 = 1;

fn section_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION).unwrap();
    let cfg = model.cfg.to_json();
    out.write_u32::<LE>(cfg.len() as u32).unwrap();
    out.extend_from_slice(cfg.as_bytes());
    out.write_u32::<LE>(SECTIONS.len() as u32).unwrap();
    for section in SECTIONS {
        let entries: Vec<_> = model
            .params
            .entries()
            .iter()
            .filter(|e| section_of(&e.name) == section)
            .collect();
        let mut payload = Vec::new();
        for e in &entries {
            payload.write_u32::<LE>(e.name.len() as u32).unwrap();
            payload.extend_from_slice(e.name.as_bytes());
            e.value.write_dump(&mut payload).unwrap();
        }
        out.write_u32::<LE>(section.len() as u32).unwrap();
        out.extend_from_slice(section.as_bytes());
        out.write_u32::<LE>(entries.len() as u32).unwrap();
        out.write_u64::<LE>(payload.len() as u64).unwrap();
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
    }
    out
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionInfo {
    pub name: String,
    pub tensors: Vec<(String, Vec<usize>)>,
    pub bytes: u64,
}

/// Parsed checkpoint before it is bound to a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub version: u32,
    pub config: ModelConfig,
    pub sections: Vec<SectionInfo>,
    tensors: Vec<(String, Tensor<T>)>,
}

fn string(r: &mut Cursor<&[u8]>, section: &str) -> Result<String> {
    let bad = |why: &str| Error::corrupt(section, why);
    let len = r.read_u32::<LE>().map_err(|_| bad("truncated"))? as usize;
    if len as u64 > r.get_ref().len() as u64 - r.position() {
        return Err(bad("string length past end of file"));
    }
    let mut buf = vec![0; len];
    r.read_exact(&mut buf).map_err(|_| bad("truncated"))?;
    String::from_utf8(buf).map_err(|_| bad("string is not UTF-8"))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let header = |why: &str| Error::corrupt("header", why);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| header("truncated"))?;
        if &magic != MAGIC {
            return Err(header("bad magic, not a model checkpoint"));
        }
        let version = r.read_u32::<LE>().map_err(|_| header("truncated"))?;
        if version != VERSION {
            return Err(header(&format!("unsupported version {version}")));
        }
        let cfg = string(&mut r, "config")?;
        let config = ModelConfig::from_json(&cfg).map_err(|e| Error::corrupt("config", e.to_string()))?;
        let count = r.read_u32::<LE>().map_err(|_| header("truncated"))?;
        let mut sections = Vec::new();
        let mut tensors = Vec::new();
        for i in 0..count {
            let name = string(&mut r, &format!("section #{i}"))?;
            let bad = |why: &str| Error::corrupt(name.as_str(), why);
            let n = r.read_u32::<LE>().map_err(|_| bad("truncated"))?;
            let len = r.read_u64::<LE>().map_err(|_| bad("truncated"))?;
            if len > bytes.len() as u64 - r.position() {
                return Err(bad("payload length past end of file"));
            }
            let mut payload = vec![0u8; len as usize];
            r.read_exact(&mut payload).map_err(|_| bad("truncated"))?;
            let mut digest = [0u8; 32];
            r.read_exact(&mut digest).map_err(|_| bad("missing digest"))?;
            if Sha256::digest(&payload).as_slice() != digest {
                return Err(bad("digest mismatch"));
            }
            let mut pr = Cursor::new(payload.as_slice());
            let mut info = SectionInfo {
                name: name.clone(),
                tensors: Vec::new(),
                bytes: len,
            };
            for _ in 0..n {
                let tname = string(&mut pr, &name)?;
                let t = Tensor::<T>::read_dump(&mut pr).map_err(|e| bad(&format!("tensor {tname}: {e}")))?;
                info.tensors.push((tname.clone(), t.shape().to_vec()));
                tensors.push((tname, t));
            }
            if pr.position() != len {
                return Err(bad("trailing bytes in payload"));
            }
            sections.push(info);
        }
        if r.position() != bytes.len() as u64 {
            return Err(header("trailing bytes after last section"));
        }
        Ok(Checkpoint {
            version,
            config,
            sections,
            tensors,
        })
    }

    /// Rebuilds the model from the embedded config and fills every tensor.
    pub fn into_model(self) -> Result<Model<T>> {
        let mut model = Model::new(self.config, 0)?;
        if self.tensors.len() != model.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {} tensors, config implies {}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for (name, t) in self.tensors {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::ConfigMismatch(format!("unexpected tensor {name}")))?;
            if model.params.get(id).shape() != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = t;
        }
        Ok(model)
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    Checkpoint::parse(bytes)?.into_model()
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
