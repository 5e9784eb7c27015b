//! Binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[8] | version u32 | header_len u64 | header JSON
//! repeated: name_len u32 | name | count u64 | f32 * count
//! sha256[32] over everything before it
//! ```
//!
//! Arrays are the parameters in canonical order, then `adam.m.<name>` and
//! `adam.v.<name>` for each. Loader position (the only random state) and
//! schedule progress live in the header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Progress, TrainConfig, TrainRun};
use crate::data::LoaderState;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GRWLCKPT";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub train: TrainConfig,
    pub progress: Progress,
    pub loader: LoaderState,
    pub optimizer_step: u64,
    pub corpus_digest: String,
    /// Final stage length reached; interpolation factors are relative to it.
    pub trained_len: usize,
    pub annotations: BTreeMap<String, String>,
    pub arrays: Vec<(String, u64)>,
}

impl CheckpointHeader {
    pub fn model(&self) -> &ModelConfig {
        &self.train.model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
    pub adam_m: Vec<Vec<f32>>,
    pub adam_v: Vec<Vec<f32>>,
}

fn put_array(buf: &mut Vec<u8>, name: &str, data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode(header: &CheckpointHeader, params: &ModelParams, m: &[Vec<f32>], v: &[Vec<f32>]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Serde(e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + 16 * params.param_count() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let names = params.names();
    for (name, t) in names.iter().zip(params.tensors()) {
        put_array(&mut buf, name, t.data());
    }
    for (name, a) in names.iter().zip(m) {
        put_array(&mut buf, &format!("adam.m.{name}"), a);
    }
    for (name, a) in names.iter().zip(v) {
        put_array(&mut buf, &format!("adam.v.{name}"), a);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(run: &TrainRun, path: impl AsRef<Path>, annotations: BTreeMap<String, String>) -> Result<()> {
    let params = run.params();
    let header = CheckpointHeader {
        train: run.config().clone(),
        progress: run.progress().clone(),
        loader: run.loader_state(),
        optimizer_step: run.optimizer().step_count(),
        corpus_digest: run.corpus().digest().to_string(),
        trained_len: run.seq_len(),
        annotations,
        arrays: params.names().into_iter().zip(params.tensors().iter().map(|t| t.numel() as u64)).collect(),
    };
    let bytes = encode(&header, params, run.optimizer().first_moments(), run.optimizer().second_moments())?;
    write_atomic(path.as_ref(), &bytes)
}

impl Checkpoint {
    /// Re-encodes exactly as [`save_checkpoint`] would.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.header, &self.params, &self.adam_m, &self.adam_v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
            return Err(Error::Integrity(format!("checkpoint truncated at {} bytes", bytes.len())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Integrity("content digest mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = r.u64()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("header: {e}")))?;
        header.train.model.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut params = model::init(&header.train.model)?;
        let names = params.names();
        let n = names.len();
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            let data = r.array(name, t.numel())?;
            t.data_mut().copy_from_slice(&data);
        }
        let mut moments = |prefix: &str, params: &ModelParams| -> Result<Vec<Vec<f32>>> {
            names
                .iter()
                .zip(params.tensors())
                .map(|(name, t)| r.array(&format!("{prefix}{name}"), t.numel()))
                .collect()
        };
        let adam_m = moments("adam.m.", &params)?;
        let adam_v = moments("adam.v.", &params)?;
        if r.pos != body.len() {
            return Err(Error::Integrity(format!("{} trailing bytes after arrays", body.len() - r.pos)));
        }
        debug_assert_eq!(adam_m.len(), n);
        Ok(Self {
            header,
            params,
            adam_m,
            adam_v,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity("section runs past end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array(&mut self, want_name: &str, want_len: usize) -> Result<Vec<f32>> {
        let nlen = self.u32()? as usize;
        let name = self.take(nlen)?;
        if name != want_name.as_bytes() {
            return Err(Error::Format(format!(
                "expected array {want_name}, found {}",
                String::from_utf8_lossy(name)
            )));
        }
        let count = self.u64()? as usize;
        if count != want_len {
            return Err(Error::Format(format!("array {want_name} has {count} values, expected {want_len}")));
        }
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::Integrity("array size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
