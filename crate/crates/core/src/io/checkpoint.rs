//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CFM1"  u32 version  u32 kind  [32] sha256(config json)
//! u64 config length, config json
//! u64 step
//! u32 tensor count, then per tensor:
//!     u32 name length, name, u32 rank, u64 dims.., u64 byte offset
//! payload: f64 params in directory order, then the EMA shadow in the same order
//! ```
//!
//! Offsets are relative to the start of the params section; the EMA section
//! repeats the same layout right after it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{CfmError, Result};
use crate::guidance::LogisticReward;
use crate::predictor::{Predictor, PredictorConfig, PredictorParams};

pub const MAGIC: &[u8; 4] = b"CFM1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Predictor,
    Reward,
}

impl CheckpointKind {
    fn tag(self) -> u32 {
        match self {
            CheckpointKind::Predictor => 0,
            CheckpointKind::Reward => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(CheckpointKind::Predictor),
            1 => Ok(CheckpointKind::Reward),
            _ => Err(CfmError::Checkpoint(format!("unknown kind tag {tag}"))),
        }
    }
}

pub type NamedTensors = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// JSON of the model configuration; its digest is stored alongside.
    pub config: String,
    pub step: u64,
    pub params: NamedTensors,
    pub ema: NamedTensors,
}

pub fn config_digest(config: &str) -> [u8; 32] {
    Sha256::digest(config.as_bytes()).into()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| CfmError::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CfmError::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.params.len() != self.ema.len() || self.params.iter().zip(&self.ema).any(|((a, x), (b, y))| a != b || x.shape() != y.shape()) {
            return Err(CfmError::Checkpoint("EMA layout differs from params".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind.tag().to_le_bytes());
        out.extend_from_slice(&config_digest(&self.config));
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.len() as u64;
        }
        for section in [&self.params, &self.ema] {
            for t in section.values() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CfmError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version > VERSION {
            return Err(CfmError::Checkpoint(format!("format version {version} is newer than supported version {VERSION}")));
        }
        let kind = CheckpointKind::from_tag(r.u32()?)?;
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let n = r.len()?;
        let config = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| CfmError::Checkpoint("config is not UTF-8".into()))?;
        if config_digest(&config) != digest {
            return Err(CfmError::Checkpoint("config digest mismatch".into()));
        }
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(count);
        let mut expected = 0u64;
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| CfmError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            if offset != expected {
                return Err(CfmError::Checkpoint(format!("tensor `{name}` at offset {offset}, expected {expected}")));
            }
            expected += 8 * shape.iter().product::<usize>() as u64;
            dir.push((name, shape));
        }
        let read_section = |r: &mut Reader| -> Result<NamedTensors> {
            let mut out = NamedTensors::new();
            for (name, shape) in &dir {
                let len: usize = shape.iter().product();
                let data = r.take(8 * len)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                out.insert(name.clone(), Tensor::new(shape.clone(), data)?);
            }
            Ok(out)
        };
        let params = read_section(&mut r)?;
        let ema = read_section(&mut r)?;
        if r.pos != buf.len() {
            return Err(CfmError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { kind, config, step, params, ema })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn predictor(cfg: &PredictorConfig, step: u64, params: &PredictorParams, ema: &PredictorParams) -> Result<Self> {
        Ok(Checkpoint {
            kind: CheckpointKind::Predictor,
            config: serde_json::to_string(cfg)?,
            step,
            params: params.tensors.clone(),
            ema: ema.tensors.clone(),
        })
    }

    /// Rebuilds the predictor. With `expected`, the stored configuration must
    /// match it exactly.
    pub fn to_predictor(&self, expected: Option<&PredictorConfig>) -> Result<(Predictor, PredictorParams, PredictorParams)> {
        self.expect_kind(CheckpointKind::Predictor)?;
        if let Some(e) = expected {
            if config_digest(&serde_json::to_string(e)?) != config_digest(&self.config) {
                return Err(CfmError::Checkpoint("model configuration does not match the checkpoint".into()));
            }
        }
        let cfg: PredictorConfig = serde_json::from_str(&self.config).map_err(|e| CfmError::Checkpoint(format!("bad model config: {e}")))?;
        let pred = Predictor::new(cfg)?;
        let template = pred.init_params(&mut crate::rng::seeded(0));
        for (name, t) in &template.tensors {
            match self.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(CfmError::Checkpoint(format!("tensor `{name}` has shape {:?}, model expects {:?}", p.shape(), t.shape()))),
                None => return Err(CfmError::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        if self.params.len() != template.tensors.len() {
            return Err(CfmError::Checkpoint("checkpoint holds tensors the model does not use".into()));
        }
        Ok((pred, PredictorParams { tensors: self.params.clone() }, PredictorParams { tensors: self.ema.clone() }))
    }

    pub fn reward(r: &LogisticReward) -> Result<Self> {
        let cfg = RewardConfig { positions: r.positions, categories: r.categories, classes: r.classes, target: r.target };
        let params: NamedTensors = [("bias".to_string(), r.bias.clone()), ("weights".to_string(), r.weights.clone())].into();
        Ok(Checkpoint { kind: CheckpointKind::Reward, config: serde_json::to_string(&cfg)?, step: 0, ema: params.clone(), params })
    }

    pub fn to_reward(&self) -> Result<LogisticReward> {
        self.expect_kind(CheckpointKind::Reward)?;
        let cfg: RewardConfig = serde_json::from_str(&self.config).map_err(|e| CfmError::Checkpoint(format!("bad reward config: {e}")))?;
        let get = |name: &str, shape: &[usize]| -> Result<Tensor> {
            match self.params.get(name) {
                Some(t) if t.shape() == shape => Ok(t.clone()),
                _ => Err(CfmError::Checkpoint(format!("reward tensor `{name}` missing or misshapen"))),
            }
        };
        Ok(LogisticReward {
            positions: cfg.positions,
            categories: cfg.categories,
            classes: cfg.classes,
            target: cfg.target,
            weights: get("weights", &[cfg.positions * cfg.categories, cfg.classes])?,
            bias: get("bias", &[cfg.classes])?,
        })
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(CfmError::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RewardConfig {
    positions: usize,
    categories: usize,
    classes: usize,
    target: usize,
}

/// Writes `bytes` to a sibling temp file, syncs it, and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| CfmError::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}
