//! Checkpoint container.
//!
//! Layout (little-endian): `MSCK`, u32 version, u32 entry count, then per
//! entry u32 name length, UTF-8 name, u32 rank, rank × u32 dims and the f64
//! payload. The JSON document describing the architecture and feature
//! normalization is stored as the entry `__config__`, one byte per f64.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::params::{ParamMap, ParamSpec};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CONFIG_ENTRY: &str = "__config__";

/// Decoded container: the config document plus named tensors, with the
/// byte offset at which each entry started.
#[derive(Clone, Debug)]
pub struct Container {
    pub config: Value,
    pub tensors: ParamMap,
    pub offsets: BTreeMap<String, u64>,
}

pub fn encode_container(config: &Value, tensors: &ParamMap) -> Result<Vec<u8>> {
    if tensors.contains_key(CONFIG_ENTRY) {
        return Err(Error::arg(format!("{CONFIG_ENTRY} is a reserved entry name")));
    }
    let json = serde_json::to_vec(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32 + 1).to_le_bytes());
    let config_tensor = Tensor::vector(json.iter().map(|&b| b as f64).collect());
    for (name, t) in std::iter::once((CONFIG_ENTRY, &config_tensor)).chain(tensors.iter().map(|(k, v)| (k.as_str(), v))) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut tensors = ParamMap::new();
    let mut offsets = BTreeMap::new();
    let mut config = None;
    for _ in 0..count {
        let start = r.pos as u64;
        let name_len = r.u32("entry name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "entry name")?)
            .map_err(|_| Error::format(start + 4, "entry name is not UTF-8"))?
            .to_string();
        let rank = r.u32(&format!("rank of {name:?}"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32(&format!("dims of {name:?}"))? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format(start, format!("entry {name:?} has an impossible size")))?;
        let payload = r.take(n, &format!("payload of {name:?}"))?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if offsets.contains_key(&name) || (name == CONFIG_ENTRY && config.is_some()) {
            return Err(Error::format(start, format!("duplicate entry {name:?}")));
        }
        if name == CONFIG_ENTRY {
            let raw: Option<Vec<u8>> = data
                .iter()
                .map(|&x| (x.fract() == 0.0 && (0.0..=255.0).contains(&x)).then_some(x as u8))
                .collect();
            let raw = raw.ok_or_else(|| Error::format(start, "config entry does not hold bytes"))?;
            let value: Value = serde_json::from_slice(&raw)
                .map_err(|e| Error::format(start, format!("config entry is not JSON: {e}")))?;
            config = Some(value);
        } else {
            tensors.insert(name.clone(), Tensor::new(shape, data)?);
            offsets.insert(name, start);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after the last entry"));
    }
    let config = config.ok_or_else(|| Error::format(12, format!("missing {CONFIG_ENTRY} entry")))?;
    Ok(Container { config, tensors, offsets })
}

impl Container {
    /// Checks the tensors against the architecture, naming the first
    /// offending parameter.
    pub(crate) fn check(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            match self.tensors.get(&s.name) {
                None => return Err(Error::format(0, format!("parameter {:?} is missing", s.name))),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(Error::format(
                        self.offsets[&s.name],
                        format!(
                            "parameter {:?} has shape {:?}, architecture expects {:?}",
                            s.name,
                            t.shape(),
                            s.shape
                        ),
                    ))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !specs.iter().any(|s| &s.name == *k)) {
            return Err(Error::format(self.offsets[extra], format!("unexpected parameter {extra:?}")));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    kind: String,
    model: ModelConfig,
    norm: NormStats,
}

pub fn encode_checkpoint(m: &ModelParams) -> Result<Vec<u8>> {
    let doc = ModelDoc {
        kind: "model".into(),
        model: m.config.clone(),
        norm: m.norm.clone(),
    };
    encode_container(&serde_json::to_value(doc)?, &m.params)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let c = decode_container(bytes)?;
    let doc: ModelDoc = serde_json::from_value(c.config.clone())
        .map_err(|e| Error::format(12, format!("checkpoint config: {e}")))?;
    if doc.kind != "model" {
        return Err(Error::format(12, format!("expected a model checkpoint, found {:?}", doc.kind)));
    }
    doc.model.validate()?;
    c.check(&doc.model.param_specs())?;
    let m = ModelParams {
        config: doc.model,
        norm: doc.norm,
        params: c.tensors,
    };
    m.validate()?;
    Ok(m)
}

pub fn save_checkpoint(m: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(m)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&std::fs::read(path)?)
}
