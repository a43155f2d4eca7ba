//! Binary tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSMI"                      4 bytes magic
//! version                     u32
//! metadata length             u32, then that many bytes of UTF-8 JSON
//! tensor count                u32
//! per tensor:
//!   name length               u16, then UTF-8 name
//!   ndim                      u8
//!   dims                      ndim × u64
//!   data                      prod(dims) × f64
//! crc32                       u32 over every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FreezeMode, LvlmConfig, LvlmModel};
use crate::numerics::Tensor;
use crate::training::Stage;

pub const MAGIC: &[u8; 4] = b"SSMI";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta_len = u32::try_from(self.meta.len()).map_err(|_| Error::contract("metadata too large"))?;
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::contract("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::contract(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let ndim = u8::try_from(t.shape().len()).map_err(|_| Error::contract("too many dimensions"))?;
            out.push(ndim);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format { check: "magic".into(), offset: 0 });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                check: format!("version {version} (expected {FORMAT_VERSION})"),
                offset: 4,
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Format { check: "length".into(), offset: bytes.len() });
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body]) != stored {
            return Err(Error::Format { check: "crc32".into(), offset: body });
        }
        let mut r = Reader { bytes: &bytes[..body], pos: 8 };
        let meta_len = r.u32("metadata length")? as usize;
        let meta_at = r.pos;
        let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| Error::Format { check: "metadata utf-8".into(), offset: meta_at })?
            .to_string();
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Format { check: "tensor name utf-8".into(), offset: name_at })?
                .to_string();
            let ndim = r.take(1, "ndim")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dims")? as usize);
            }
            let dims_at = r.pos;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format { check: format!("tensor {name} length"), offset: dims_at })?;
            let raw = r.take(numel * 8, "tensor data")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let tensor = Tensor::new(&shape, data)
                .map_err(|e| Error::Format { check: format!("tensor {name}: {e}"), offset: dims_at })?;
            tensors.push((name, tensor));
        }
        if r.remaining() != 0 {
            return Err(Error::Format { check: "trailing bytes".into(), offset: r.pos });
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format { check: format!("length ({what} truncated)"), offset: self.pos });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Model checkpoint metadata, stored as the archive's JSON block. Holds no
/// wall-clock values, so equal runs write equal bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: LvlmConfig,
    pub config_hash: String,
    pub stage: Stage,
    /// Optimizer steps taken by the stage that wrote the checkpoint.
    pub step: usize,
    pub seed: u64,
    pub lambda: Option<f64>,
    /// `field=value` for every command-line flag that replaced a config value.
    #[serde(default)]
    pub overrides: Vec<String>,
}

impl CheckpointMeta {
    pub fn new(config: &LvlmConfig, stage: Stage, step: usize, seed: u64) -> Self {
        Self {
            config: config.clone(),
            config_hash: config.hash(),
            stage,
            step,
            seed,
            lambda: None,
            overrides: Vec::new(),
        }
    }
}

pub fn checkpoint_bytes(model: &LvlmModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if &meta.config != model.config() {
        return Err(Error::Compatibility { fields: meta.config.diff(model.config()) });
    }
    let archive = Archive {
        meta: serde_json::to_string(meta).map_err(|e| Error::contract(e.to_string()))?,
        tensors: model.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
    };
    archive.to_bytes()
}

pub fn save_checkpoint(model: &LvlmModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model, meta)?)
}

/// Parses a model checkpoint. The model comes back in `finetune_ssm` mode.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(CheckpointMeta, LvlmModel)> {
    let archive = Archive::from_bytes(bytes)?;
    let meta: CheckpointMeta = serde_json::from_str(&archive.meta)
        .map_err(|e| Error::Format { check: format!("metadata ({e})"), offset: 12 })?;
    if meta.config_hash != meta.config.hash() {
        return Err(Error::Format { check: "config_hash".into(), offset: 12 });
    }
    meta.config.validate()?;
    let model = LvlmModel::from_named(meta.config.clone(), archive.tensors, FreezeMode::FinetuneSsm)?;
    Ok((meta, model))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, LvlmModel)> {
    checkpoint_from_bytes(&fs::read(path)?)
}
