//! Binary checkpoints of a model config plus named parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PRTR" | version u32 | config length u32 | config JSON
//! then until end of file, one record per parameter:
//! name length u32 | name | dtype u8 | rank u8 | dims u32 × rank | payload
//! ```
//!
//! dtype 0 stores f32 values, dtype 1 stores f64 values.

use crate::nn::{ModelConfig, ParamGroup, ParamStore};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PRTR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Values are stored as f32; training rounds parameters after each update
    /// so the stored values are exact.
    #[default]
    F32,
    F64,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("config mismatch in fields: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub precision: Precision,
}

pub fn encode(config: &ModelConfig, store: &ParamStore, precision: Precision) -> Vec<u8> {
    let cfg = serde_json::to_vec(config).expect("config serializes");
    let mut out = Vec::with_capacity(12 + cfg.len() + store.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(precision.code());
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match precision {
            Precision::F32 => p.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            Precision::F64 => p.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let n = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n, "config")?).map_err(|e| CheckpointError::Invalid(format!("config: {e}")))?;
    let mut store = ParamStore::new();
    let mut precision = None;
    while r.pos < bytes.len() {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| CheckpointError::Invalid("parameter name is not UTF-8".into()))?
            .to_string();
        if store.get(&name).is_some() {
            return Err(CheckpointError::Invalid(format!("duplicate parameter {name}")));
        }
        let dtype = match r.u8("dtype")? {
            0 => Precision::F32,
            1 => Precision::F64,
            c => return Err(CheckpointError::Invalid(format!("{name}: unknown dtype code {c}"))),
        };
        precision.get_or_insert(dtype);
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            Precision::F32 => r
                .take(count * 4, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Precision::F64 => r
                .take(count * 8, &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        store.insert(&name, &shape, data, ParamGroup::Transformer);
    }
    Ok(Checkpoint {
        config,
        store,
        precision: precision.unwrap_or_default(),
    })
}

pub fn save(path: &Path, config: &ModelConfig, store: &ParamStore, precision: Precision) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(config, store, precision)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// Names of the top-level config fields where `found` differs from `expected`.
pub fn config_differences(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    let a = serde_json::to_value(expected).expect("config serializes");
    let b = serde_json::to_value(found).expect("config serializes");
    let (a, b) = (a.as_object().expect("struct"), b.as_object().expect("struct"));
    let mut fields: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .cloned()
        .collect();
    fields.sort();
    fields.dedup();
    fields
}

pub fn check_config(expected: &ModelConfig, found: &ModelConfig) -> Result<(), CheckpointError> {
    let diff = config_differences(expected, found);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(CheckpointError::ConfigMismatch(diff))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.weight", &[2, 3], vec![0.5, -1.25, 3.0, 1e-7f32 as f64, -0.0, 7.5], ParamGroup::Backbone);
        s.insert("b", &[], vec![0.1f32 as f64], ParamGroup::Transformer);
        s
    }

    #[test]
    fn roundtrip_f32_values_exactly() {
        let cfg = ModelConfig::desk();
        let ck = decode(&encode(&cfg, &store(), Precision::F32)).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.precision, Precision::F32);
        for (p, q) in store().iter().zip(ck.store.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.shape, q.shape);
            let bits = |d: &[f64]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p.data), bits(&q.data));
        }
    }

    #[test]
    fn f64_keeps_full_precision() {
        let mut s = ParamStore::new();
        s.insert("x", &[1], vec![0.1], ParamGroup::Transformer);
        let ck = decode(&encode(&ModelConfig::desk(), &s, Precision::F64)).unwrap();
        assert_eq!(ck.store.get("x").unwrap().data[0].to_bits(), 0.1f64.to_bits());
    }

    #[test]
    fn header_bytes() {
        let bytes = encode(&ModelConfig::desk(), &ParamStore::new(), Precision::F32);
        assert_eq!(&bytes[..4], b"PRTR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(matches!(decode(b"NOPE"), Err(CheckpointError::BadMagic)));
        let bytes = encode(&ModelConfig::desk(), &store(), Precision::F32);
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn mismatch_names_fields() {
        let a = ModelConfig::desk();
        let b = ModelConfig {
            d_model: 64,
            n_joints: 17,
            ..a.clone()
        };
        match check_config(&a, &b) {
            Err(CheckpointError::ConfigMismatch(f)) => assert_eq!(f, vec!["d_model", "n_joints"]),
            other => panic!("{other:?}"),
        }
        assert!(check_config(&a, &a).is_ok());
    }
}
