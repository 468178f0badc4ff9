//! Binary weight files.
//!
//! Layout (little endian):
//!
//! ```text
//! "KFG1"  u16 version
//! u32 config length, config text (key=value lines)
//! u32 tensor count, then per tensor:
//!     u16 name length, name, u8 kind, u8 dtype, u8 rank, u32 dims[rank], u64 offset
//! u32 alias count, then per alias: u16 + name, u16 + target name
//! u64 payload length, payload (f32 values)
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Shared storage is written once; aliases are stored by name and checked on
//! load so a file cannot silently break or invent sharing.

use std::collections::HashMap;
use std::path::Path;

use kfg_tensor::{DType, Tensor};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result, WeightsError};
use crate::model::Model;
use crate::params::{ParamKind, ParamStore};

pub const MAGIC: &[u8; 4] = b"KFG1";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Decoded file contents, before they are matched against a model.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub config: String,
    pub tensors: Vec<TensorRecord>,
    /// `(alias, target)` names.
    pub aliases: Vec<(String, String)>,
}

impl WeightFile {
    pub fn from_store(config: &ModelConfig, store: &ParamStore<f32>) -> Self {
        let mut tensors: Vec<TensorRecord> = store
            .entries()
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.value.shape().to_vec(),
                data: e.value.data().to_vec(),
            })
            .collect();
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        let mut aliases: Vec<(String, String)> = store
            .aliases()
            .iter()
            .map(|a| (a.name.clone(), store.name(a.target).to_string()))
            .collect();
        aliases.sort();
        WeightFile {
            config: config.to_text(),
            tensors,
            aliases,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());

        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(match t.kind {
                ParamKind::Learnable => 0,
                ParamKind::Buffer => 1,
            });
            out.push(0); // f32
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.data.len() as u64;
        }

        out.extend_from_slice(&(self.aliases.len() as u32).to_le_bytes());
        for (a, t) in &self.aliases {
            put_str(&mut out, a);
            put_str(&mut out, t);
        }

        out.extend_from_slice(&offset.to_le_bytes());
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, WeightsError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(WeightsError::BadMagic);
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(WeightsError::UnsupportedVersion(version));
        }
        let n = r.u32("config")? as usize;
        let config = String::from_utf8(r.take(n, "config")?.to_vec())
            .map_err(|_| WeightsError::Malformed("config text is not UTF-8".into()))?;

        let count = r.u32("tensor table")? as usize;
        let mut table = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor table")?;
            let kind = match r.u8("tensor table")? {
                0 => ParamKind::Learnable,
                1 => ParamKind::Buffer,
                k => return Err(WeightsError::Malformed(format!("{name}: unknown kind {k}"))),
            };
            let dtype = r.u8("tensor table")?;
            if dtype != 0 {
                return Err(WeightsError::Malformed(format!("{name}: unsupported dtype {dtype}")));
            }
            let rank = r.u8("tensor table")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("tensor table").map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let offset = r.u64("tensor table")?;
            table.push((name, kind, shape, offset));
        }

        let n_alias = r.u32("alias table")? as usize;
        let mut aliases = Vec::new();
        for _ in 0..n_alias {
            aliases.push((r.string("alias table")?, r.string("alias table")?));
        }

        let payload_len = r.u64("payload")?;
        let remaining = (bytes.len() - r.pos) as u64;
        if remaining < payload_len.saturating_add(4) {
            return Err(WeightsError::Truncated("payload"));
        }
        if remaining > payload_len + 4 {
            return Err(WeightsError::Malformed(format!(
                "{} trailing bytes after checksum",
                remaining - payload_len - 4
            )));
        }
        let body_end = r.pos + payload_len as usize;
        let stored = u32::from_le_bytes(bytes[body_end..body_end + 4].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(WeightsError::ChecksumMismatch { stored, computed });
        }

        let payload = &bytes[r.pos..body_end];
        let mut tensors = Vec::with_capacity(table.len());
        for (name, kind, shape, offset) in table {
            let len = 4 * shape.iter().product::<usize>() as u64;
            let end = offset.checked_add(len).filter(|&e| e <= payload_len).ok_or_else(|| {
                WeightsError::Malformed(format!("{name}: data range outside payload"))
            })?;
            let data = payload[offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(TensorRecord {
                name,
                kind,
                shape,
                data,
            });
        }
        Ok(WeightFile {
            config,
            tensors,
            aliases,
        })
    }

    /// Copy the file's tensors into `store`, which must have exactly the
    /// same names, shapes and aliases. Nothing is written on failure.
    pub fn apply(&self, store: &mut ParamStore<f32>) -> std::result::Result<(), WeightsError> {
        let by_name: HashMap<&str, &TensorRecord> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut names: Vec<&str> = store.entries().iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        for name in &names {
            let rec = by_name
                .get(name)
                .ok_or_else(|| WeightsError::MissingTensor(name.to_string()))?;
            let id = store.id(name).expect("entry name resolves");
            let expected = store.value(id).shape();
            if expected != rec.shape.as_slice() {
                return Err(WeightsError::ShapeMismatch {
                    name: name.to_string(),
                    expected: expected.to_vec(),
                    got: rec.shape.clone(),
                });
            }
        }
        if let Some(extra) = self.tensors.iter().find(|t| store.id(&t.name).is_none() || is_alias(store, &t.name)) {
            return Err(WeightsError::UnexpectedTensor(extra.name.clone()));
        }

        let file_alias: HashMap<&str, &str> = self.aliases.iter().map(|(a, t)| (a.as_str(), t.as_str())).collect();
        let mut model_alias: Vec<(&str, &str)> = store
            .aliases()
            .iter()
            .map(|a| (a.name.as_str(), store.name(a.target)))
            .collect();
        model_alias.sort_unstable();
        for (alias, target) in &model_alias {
            match file_alias.get(alias) {
                Some(got) if got == target => {}
                Some(got) => {
                    return Err(WeightsError::AliasMismatch {
                        name: alias.to_string(),
                        expected: target.to_string(),
                        got: got.to_string(),
                    })
                }
                None => {
                    return Err(WeightsError::AliasMismatch {
                        name: alias.to_string(),
                        expected: target.to_string(),
                        got: String::new(),
                    })
                }
            }
        }
        if let Some((a, t)) = self.aliases.iter().find(|(a, _)| !model_alias.iter().any(|(m, _)| m == a)) {
            return Err(WeightsError::AliasMismatch {
                name: a.clone(),
                expected: String::new(),
                got: t.clone(),
            });
        }

        for rec in &self.tensors {
            let id = store.id(&rec.name).expect("checked above");
            store.value_mut(id).data_mut().copy_from_slice(&rec.data);
        }
        Ok(())
    }
}

fn is_alias(store: &ParamStore<f32>, name: &str) -> bool {
    store.aliases().iter().any(|a| a.name == name)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(WeightsError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> std::result::Result<u8, WeightsError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> std::result::Result<u16, WeightsError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, WeightsError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> std::result::Result<String, WeightsError> {
        let n = self.u16(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| WeightsError::Malformed(format!("{what}: name is not UTF-8")))
    }
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    debug_assert!(model.store.entries().iter().all(|e| e.value.dtype() == DType::F32));
    std::fs::write(path, WeightFile::from_store(&model.cfg, &model.store).encode())?;
    Ok(())
}

/// Rebuild the model described by the file's embedded config and fill it.
pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let file = WeightFile::decode(&std::fs::read(path)?)?;
    let cfg = ModelConfig::parse(&file.config)
        .map_err(|e| CoreError::Weights(WeightsError::Malformed(format!("embedded config: {e}"))))?;
    let mut model = Model::build(&cfg, 0)?;
    file.apply(&mut model.store)?;
    Ok(model)
}

/// Fill an existing model; fails if the file describes a different network.
pub fn load_into(model: &mut Model, path: impl AsRef<Path>) -> Result<()> {
    let file = WeightFile::decode(&std::fs::read(path)?)?;
    file.apply(&mut model.store)?;
    Ok(())
}

/// Name, shape and raw bit pattern of every entry, sorted by name.
pub fn store_bits(store: &ParamStore<f32>) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    let mut v: Vec<_> = store
        .entries()
        .iter()
        .map(|e| {
            let t: &Tensor<f32> = &e.value;
            (e.name.clone(), t.shape().to_vec(), t.data().iter().map(|x| x.to_bits()).collect())
        })
        .collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}
