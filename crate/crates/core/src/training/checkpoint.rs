//! Binary checkpoint format: magic bytes "NMTC", format version, a JSON
//! metadata block, then named parameter arrays as row-major 32-bit
//! little-endian reals. Writes are atomic (temp file + rename).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{AnyModel, ModelConfig, ModelError};
use crate::scalar::Scalar;
use crate::tensor::ParamSet;

pub const MAGIC: [u8; 4] = *b"NMTC";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u16),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("invalid checkpoint metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// 1-based best epoch; 0 for a never-trained model.
    pub epoch: usize,
    pub val_loss: f64,
    pub seed: u64,
    pub strategy: String,
    pub src_tokenizer_fingerprint: String,
    pub tgt_tokenizer_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(meta: CheckpointMeta, params: &ParamSet<T>) -> Self {
        let params = params
            .iter()
            .map(|p| NamedArray {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.as_f32()).collect(),
            })
            .collect();
        Checkpoint { meta, params }
    }

    /// Rebuild the model this checkpoint was saved from.
    pub fn build_model<T: Scalar>(&self) -> Result<AnyModel<T>, CheckpointError> {
        let mut model = AnyModel::new(&self.meta.model, self.meta.seed)?;
        let entries: Vec<(String, Vec<usize>, Vec<f32>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone(), p.data.clone()))
            .collect();
        model.load_params(&entries)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.push(p.shape.len() as u8);
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let meta_bytes = r.take(meta_len)?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| CheckpointError::Meta(e.to_string()))?;
        meta.model.validate().map_err(CheckpointError::Model)?;
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes after the last parameter",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { meta, params })
    }

    /// Atomic save: the file appears complete or not at all.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes();
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".into())
        ));
        let io_err = |source: std::io::Error| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
        drop(f);
        fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LstmConfig;

    fn sample() -> Checkpoint {
        let cfg = LstmConfig {
            src_vocab: 10,
            tgt_vocab: 10,
            embed_dim: 4,
            hidden_dim: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.0,
        };
        let model: AnyModel<f32> = AnyModel::new(&ModelConfig::Lstm(cfg), 5).unwrap();
        Checkpoint::from_params(
            CheckpointMeta {
                model: model.config(),
                epoch: 3,
                val_loss: 1.25,
                seed: 5,
                strategy: "general".into(),
                src_tokenizer_fingerprint: "aa".into(),
                tgt_tokenizer_fingerprint: "bb".into(),
            },
            model.params(),
        )
    }

    #[test]
    fn byte_round_trip_is_exact() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, back);
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in [3, 5, 20, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(
                    err,
                    CheckpointError::Corrupt(_) | CheckpointError::BadMagic
                ),
                "cut={cut}: {err}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version_are_distinct_errors() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes).unwrap_err(),
            CheckpointError::BadMagic
        ));
        let mut bytes = sample().to_bytes();
        bytes[4] = 0xFF;
        bytes[5] = 0xFF;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes).unwrap_err(),
            CheckpointError::Version(_)
        ));
    }

    #[test]
    fn save_load_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nmtc");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn loading_into_mismatched_dims_names_the_parameter() {
        let ckpt = sample();
        let mut bigger = ckpt.clone();
        // Claim a different embed dim in the metadata; parameter shapes
        // no longer match what the config implies.
        if let ModelConfig::Lstm(c) = &mut bigger.meta.model {
            c.embed_dim = 8;
        }
        let err = bigger.build_model::<f32>().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("emb_src") || msg.contains("w_ih"), "{msg}");
    }
}
