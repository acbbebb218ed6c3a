//! JSON-lines dataset files and the binary embedding cache.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Behavior, EmbeddedBehavior, EmbeddedUser, Label, UserRecord};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"MSDE";

#[derive(Serialize, Deserialize)]
struct BehaviorLine {
    text: String,
    image_b64: Option<String>,
    ts: Option<i64>,
}

#[derive(Serialize, Deserialize)]
struct UserLine {
    user_id: String,
    label: Label,
    behaviors: Vec<BehaviorLine>,
}

fn parse_line(line: &str) -> std::result::Result<UserRecord, String> {
    let raw: UserLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let behaviors = raw
        .behaviors
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let image = b
                .image_b64
                .map(|s| {
                    B64.decode(s.as_bytes())
                        .map_err(|e| format!("behavior {i}: bad image_b64: {e}"))
                })
                .transpose()?;
            Behavior::new(b.text, image, b.ts).map_err(|e| format!("behavior {i}: {e}"))
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    UserRecord::new(raw.user_id, raw.label, behaviors).map_err(|e| e.to_string())
}

/// Parses JSON-lines text; blank lines are skipped, line numbers are 1-based.
pub fn parse_dataset(text: &str, origin: &str) -> Result<Vec<UserRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_line(l).map_err(|reason| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                reason,
            })
        })
        .collect()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<UserRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}

pub fn write_dataset(records: &[UserRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = UserLine {
            user_id: r.user_id.clone(),
            label: r.label,
            behaviors: r
                .behaviors
                .iter()
                .map(|b| BehaviorLine {
                    text: String::from_utf8_lossy(&b.text).into_owned(),
                    image_b64: b.image.as_ref().map(|i| B64.encode(i)),
                    ts: b.timestamp,
                })
                .collect(),
        };
        let json = serde_json::to_string(&line).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{json}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    user_id: String,
    index: usize,
    offset: u64,
}

/// Precomputed embeddings: `MSDE`, u32 behavior count, then per behavior
/// the text and image vectors as little-endian f32 blocks. A JSON-lines
/// side index maps `(user_id, behavior index)` to the block's byte offset.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingCache {
    dim: usize,
    offsets: HashMap<(String, usize), u64>,
    bytes: Vec<u8>,
}

impl EmbeddingCache {
    pub fn write(users: &[EmbeddedUser], data_path: &Path, index_path: &Path) -> Result<()> {
        let count: usize = users.iter().map(|u| u.behaviors.len()).sum();
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.write_u32::<LittleEndian>(count as u32).unwrap();
        let mut index = String::new();
        for u in users {
            for (i, b) in u.behaviors.iter().enumerate() {
                let line = IndexLine {
                    user_id: u.user_id.clone(),
                    index: i,
                    offset: buf.len() as u64,
                };
                index.push_str(&serde_json::to_string(&line).unwrap());
                index.push('\n');
                for &v in b.t_vec.iter().chain(&b.i_vec) {
                    buf.write_f32::<LittleEndian>(v).unwrap();
                }
            }
        }
        fs::write(data_path, buf).map_err(|e| Error::io(data_path, e))?;
        fs::write(index_path, index).map_err(|e| Error::io(index_path, e))
    }

    pub fn open(data_path: &Path, index_path: &Path) -> Result<Self> {
        let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
        if bytes.len() < 8 || &bytes[..4] != CACHE_MAGIC {
            return Err(Error::corrupt("embedding-cache", "missing MSDE header"));
        }
        let count = (&bytes[4..8]).read_u32::<LittleEndian>().unwrap() as usize;
        let payload = bytes.len() - 8;
        if count == 0 || payload % (count * 8) != 0 {
            return Err(Error::corrupt(
                "embedding-cache",
                format!("{payload} payload bytes do not split into {count} behaviors"),
            ));
        }
        let dim = payload / (count * 8);
        let f = fs::File::open(index_path).map_err(|e| Error::io(index_path, e))?;
        let mut offsets = HashMap::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(index_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: IndexLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: index_path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            if l.offset as usize + dim * 8 > bytes.len() {
                return Err(Error::corrupt(
                    "embedding-index",
                    format!("offset {} out of range", l.offset),
                ));
            }
            offsets.insert((l.user_id, l.index), l.offset);
        }
        Ok(EmbeddingCache { dim, offsets, bytes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, user_id: &str, index: usize) -> Option<EmbeddedBehavior> {
        let off = *self.offsets.get(&(user_id.to_string(), index))? as usize;
        let mut r = &self.bytes[off..off + self.dim * 8];
        let mut read = |n| {
            (0..n)
                .map(|_| r.read_f32::<LittleEndian>().unwrap())
                .collect::<Vec<f32>>()
        };
        let t_vec = read(self.dim);
        let i_vec = read(self.dim);
        Some(EmbeddedBehavior {
            t_vec,
            i_vec,
            is_padding: false,
        })
    }

    /// Reassembles a user from cached rows.
    pub fn user(&self, record: &UserRecord) -> Result<EmbeddedUser> {
        let behaviors = (0..record.behaviors.len())
            .map(|i| {
                self.get(&record.user_id, i).ok_or_else(|| {
                    Error::ConfigMismatch(format!("embedding cache has no entry for ({}, {i})", record.user_id))
                })
            })
            .collect::<Result<_>>()?;
        Ok(EmbeddedUser {
            user_id: record.user_id.clone(),
            label: record.label,
            behaviors,
        })
    }
}
