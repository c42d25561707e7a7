//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "GRACAPS\0"
//! version    u32
//! config     u64 length + UTF-8 key-value text (model keys, then run metadata)
//! records    u64 count, then per record:
//!              u32 name length + UTF-8 name
//!              u32 rank + rank × u64 extents
//!              numel × f32 payload
//! ```
//!
//! Records are the classifier parameters in layout order, then the decoder
//! (`decoder.*`), then Adam moments (`adam.m.*`, `adam.v.*`). Encoding is
//! canonical, so decode → encode reproduces the input bytes.

use std::fs;
use std::path::{Path, PathBuf};

use gracaps_tensor::Tensor;
use thiserror::Error;

use crate::config::ModelConfig;
use crate::error::{io_err, Result};
use crate::kv::Document;
use crate::model::{decoder_layout, model_layout, ParamSet};
use crate::trainer::AdamState;

pub const MAGIC: &[u8; 8] = b"GRACAPS\0";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 1024;
const MAX_RANK: usize = 8;
const ADAM_STEP_KEY: &str = "adam_step";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (this build reads {VERSION})")]
    Version { found: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("record `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint config differs in `{field}`: file has {found}, expected {expected}")]
    ConfigMismatch {
        field: &'static str,
        found: String,
        expected: String,
    },
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Free-form run metadata (seed, epoch, ...), stored after the model keys.
    pub meta: Document,
    pub model: ParamSet,
    pub decoder: Option<ParamSet>,
    pub adam: Option<AdamState>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| corrupt(format!("{what} {n} overflows")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_record(r: &mut Reader<'_>) -> Result<(String, Tensor), CheckpointError> {
    let name_len = r.u32("record name length")? as usize;
    if name_len > MAX_NAME {
        return Err(corrupt(format!("record name of {name_len} bytes")));
    }
    let name = std::str::from_utf8(r.take(name_len, "record name")?)
        .map_err(|_| corrupt("record name is not UTF-8"))?
        .to_string();
    let rank = r.u32("rank")? as usize;
    if rank > MAX_RANK {
        return Err(corrupt(format!("record `{name}` has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.len("extent")?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
        .ok_or_else(|| corrupt(format!("record `{name}` {shape:?} exceeds the file")))?;
    let payload = r.take(numel * 4, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
    Ok((name, t))
}

/// Moves records matching `layout` (names with `prefix`) out of `records`.
fn collect(
    records: &mut std::collections::VecDeque<(String, Tensor)>,
    layout: &[(String, Vec<usize>)],
    prefix: &str,
) -> Result<ParamSet, CheckpointError> {
    let mut set = ParamSet::new();
    for (name, shape) in layout {
        let want = format!("{prefix}{name}");
        let Some((found, t)) = records.pop_front() else {
            return Err(corrupt(format!("missing record `{want}`")));
        };
        if found != want {
            return Err(corrupt(format!("record `{found}` where `{want}` was expected")));
        }
        if t.shape() != shape.as_slice() {
            return Err(CheckpointError::Shape {
                name: found,
                expected: shape.clone(),
                found: t.shape().to_vec(),
            });
        }
        set.push(name.clone(), t);
    }
    Ok(set)
}

fn config_text(config: &ModelConfig, meta: &Document, adam_step: Option<u64>) -> String {
    let mut text = config.to_kv();
    for (k, v) in meta.iter() {
        text.set(k, v).expect("meta values are single-line");
    }
    if let Some(step) = adam_step {
        text.set(ADAM_STEP_KEY, step).expect("single line");
    }
    text.to_string()
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let text = config_text(&self.config, &self.meta, self.adam.as_ref().map(|a| a.step));

        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());

        let mut records: Vec<(String, &Tensor)> = self.model.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(d) = &self.decoder {
            records.extend(d.iter().map(|(n, t)| (n.to_string(), t)));
        }
        if let Some(a) = &self.adam {
            records.extend(a.m.iter().map(|(n, t)| (format!("adam.m.{n}"), t)));
            records.extend(a.v.iter().map(|(n, t)| (format!("adam.v.{n}"), t)));
        }
        out.extend_from_slice(&(records.len() as u64).to_le_bytes());
        for (name, t) in records {
            put_record(&mut out, &name, t);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let text_len = r.len("config length")?;
        let text = std::str::from_utf8(r.take(text_len, "config")?).map_err(|_| corrupt("config is not UTF-8"))?;
        let doc = Document::parse(text).map_err(|e| corrupt(format!("config: {e}")))?;
        let mut model_doc = Document::new();
        let mut meta = Document::new();
        let mut adam_step = None;
        for (k, v) in doc.iter() {
            if ModelConfig::KEYS.contains(&k) {
                model_doc.set(k, v).expect("single line");
            } else if k == ADAM_STEP_KEY {
                adam_step = Some(v.parse::<u64>().map_err(|_| corrupt(format!("{ADAM_STEP_KEY} = {v}")))?);
            } else {
                meta.set(k, v).expect("single line");
            }
        }
        let config = ModelConfig::from_kv(&model_doc).map_err(|e| corrupt(format!("config: {e}")))?;
        if config_text(&config, &meta, adam_step) != text {
            return Err(corrupt("config block is not in canonical form"));
        }

        let count = r.len("record count")?;
        let mut records = std::collections::VecDeque::new();
        for _ in 0..count {
            records.push_back(read_record(&mut r)?);
        }
        if r.remaining() != 0 {
            return Err(corrupt(format!("{} trailing bytes", r.remaining())));
        }

        let model = collect(&mut records, &model_layout(&config), "")?;
        let dec_layout = decoder_layout(&config);
        let decoder = match records.front() {
            Some((n, _)) if n.starts_with("decoder.") => Some(collect(&mut records, &dec_layout, "")?),
            _ => None,
        };
        let adam = match adam_step {
            None => None,
            Some(step) => {
                let mut layout = model_layout(&config);
                if decoder.is_some() {
                    layout.extend(dec_layout);
                }
                let m = collect(&mut records, &layout, "adam.m.")?;
                let v = collect(&mut records, &layout, "adam.v.")?;
                Some(AdamState { step, m, v })
            }
        };
        if let Some((name, _)) = records.front() {
            return Err(corrupt(format!("unexpected record `{name}`")));
        }
        Ok(Checkpoint {
            config,
            meta,
            model,
            decoder,
            adam,
        })
    }

    /// Writes atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    /// Loads and, if `expected` is given, checks the embedded config.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let ck = Self::decode(&bytes)?;
        if let Some(want) = expected {
            if let Some(field) = want.first_difference(&ck.config) {
                return Err(CheckpointError::ConfigMismatch {
                    field,
                    found: ck.config.get(field).unwrap_or_default(),
                    expected: want.get(field).unwrap_or_default(),
                }
                .into());
            }
        }
        Ok(ck)
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp: PathBuf = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}
