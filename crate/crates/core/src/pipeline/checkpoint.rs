//! Checkpoint container: `MSSMCKPT`, a little-endian `u32` version, a `u32`
//! index length, the JSON index, raw little-endian `f64` payloads in index
//! order, and a CRC32 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, PipelineError, RunConfig};
use crate::model::Mssm;
use crate::nn::{Init, ParamEntry};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MSSMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";
/// Task heads attached after pretraining.
pub const HEAD: &str = "head.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub fingerprint: String,
    pub step: u64,
    /// Run id of the metric stream this run produced.
    pub metrics: String,
    pub model: Mssm<f64>,
    pub adam: Adam,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    #[serde(default)]
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    fingerprint: String,
    step: u64,
    metrics: String,
    adam_t: u64,
    config: String,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(config: RunConfig, model: Mssm<f64>, adam: Adam, step: u64, metrics: String) -> Self {
        Self { fingerprint: config.fingerprint(), config, step, metrics, model, adam }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f64], frozen: bool| {
            tensors.push(TensorEntry { name, shape, offset: payload.len() as u64, frozen });
            for x in data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        };
        for g in self.model.params.groups() {
            for e in &g.entries {
                push(format!("{PARAM}{}.{}", g.name, e.name), e.shape.clone(), &e.data, g.frozen);
            }
        }
        for (prefix, map) in [(MOMENT_M, &self.adam.m), (MOMENT_V, &self.adam.v)] {
            for (name, data) in map {
                push(format!("{prefix}{name}"), vec![data.len()], data, false);
            }
        }
        let index = Index {
            fingerprint: self.fingerprint.clone(),
            step: self.step,
            metrics: self.metrics.clone(),
            adam_t: self.adam.t,
            config: self.config.to_text(),
            tensors,
        };
        let json = serde_json::to_vec(&index).expect("index serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len() + 4);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        if bytes.len() < 16 {
            return Err(PipelineError::Truncated { expected: 16, found: bytes.len() });
        }
        if bytes[..8] != CHECKPOINT_MAGIC {
            return Err(PipelineError::BadMagic(bytes[..8].to_vec()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(PipelineError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let index_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = 16 + index_len;
        if bytes.len() < body + 4 {
            return Err(PipelineError::Truncated { expected: body + 4, found: bytes.len() });
        }
        let index: Index = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| PipelineError::Index { entry: "index".into(), reason: e.to_string() })?;

        // entries must tile the payload in order
        let mut expected_offset = 0u64;
        for t in &index.tensors {
            let bad = |reason: String| PipelineError::Index { entry: t.name.clone(), reason };
            if ![PARAM, MOMENT_M, MOMENT_V].iter().any(|p| t.name.starts_with(p)) {
                return Err(bad("unknown tensor kind".into()));
            }
            if t.offset != expected_offset {
                return Err(bad(format!("offset {} but previous entries end at {expected_offset}", t.offset)));
            }
            let n: usize = t.shape.iter().product();
            if t.shape.is_empty() || n == 0 {
                return Err(bad(format!("empty shape {:?}", t.shape)));
            }
            expected_offset += 8 * n as u64;
        }
        let total = body + expected_offset as usize + 4;
        if bytes.len() != total {
            return Err(PipelineError::Truncated { expected: total, found: bytes.len() });
        }
        let stored = u32::from_le_bytes(bytes[total - 4..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..total - 4]);
        if stored != computed {
            return Err(PipelineError::Checksum { stored, computed });
        }

        let config = RunConfig::parse_text(&index.config)?;
        if config.fingerprint() != index.fingerprint {
            return Err(PipelineError::Fingerprint { expected: index.fingerprint, found: config.fingerprint() });
        }
        let mut model = Mssm::new(config.model_config(), config.seed)?;
        let payload = &bytes[body..total - 4];
        let read = |t: &TensorEntry| -> Vec<f64> {
            let n: usize = t.shape.iter().product();
            let start = t.offset as usize;
            payload[start..start + 8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        };
        let mut adam = Adam { t: index.adam_t, ..Adam::default() };
        let mut seen = 0;
        for t in &index.tensors {
            let bad = |reason: &str| PipelineError::Index { entry: t.name.clone(), reason: reason.into() };
            if let Some(full) = t.name.strip_prefix(PARAM) {
                let (group, entry) = full.rsplit_once('.').ok_or_else(|| bad("missing entry name"))?;
                match model.params.entry_mut(group, entry) {
                    Some(e) => {
                        if e.shape != t.shape {
                            return Err(bad("shape differs from the model"));
                        }
                        e.data = read(t);
                        seen += 1;
                    }
                    None if group.starts_with(HEAD) => {
                        let e = ParamEntry { name: entry.to_string(), shape: t.shape.clone(), data: read(t), init: Init::Zeros };
                        model.params.insert_entry(group, e)?;
                    }
                    None => return Err(bad("not a parameter of this model")),
                }
                model.params.set_frozen(group, t.frozen)?;
            } else if let Some(name) = t.name.strip_prefix(MOMENT_M) {
                adam.m.insert(name.to_string(), read(t));
            } else if let Some(name) = t.name.strip_prefix(MOMENT_V) {
                adam.v.insert(name.to_string(), read(t));
            }
        }
        let want = model.params.iter().filter(|(n, _)| !n.starts_with(HEAD)).count();
        if seen != want {
            return Err(PipelineError::Index { entry: "param".into(), reason: format!("{seen} of {want} parameters present") });
        }
        Ok(Self { config, fingerprint: index.fingerprint, step: index.step, metrics: index.metrics, model, adam })
    }

    /// Errors unless the checkpoint's model shape matches `cfg`, or `allow` is set.
    pub fn check_fingerprint(&self, cfg: &RunConfig, allow: bool) -> Result<(), PipelineError> {
        let found = cfg.fingerprint();
        if found != self.fingerprint {
            if allow {
                log::warn!("checkpoint fingerprint {} differs from config {found}; continuing", self.fingerprint);
            } else {
                return Err(PipelineError::Fingerprint { expected: self.fingerprint.clone(), found });
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and checks it against the model shape of `cfg`.
pub fn load_checkpoint_for(path: &Path, cfg: &RunConfig, allow_mismatch: bool) -> Result<Checkpoint, PipelineError> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_fingerprint(cfg, allow_mismatch)?;
    Ok(ckpt)
}
