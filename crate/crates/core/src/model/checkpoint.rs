//! Checkpoint files.
//!
//! A checkpoint is a magic line, one line of JSON metadata and the raw
//! little-endian `f32` parameters. The metadata carries the SHA-256 of the
//! parameter bytes; the SHA-256 of the whole file identifies the checkpoint
//! elsewhere (soft-label headers, ensemble specs).

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backbone::BackboneSpec;
use super::net::{HeadConfig, HeadDims, Model};
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"selfdistill-checkpoint v1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
    /// Hard-label model used as a stand-alone ablation rung.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation triplet mAP, `None` when no class had a positive.
    pub val_map: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSeeds {
    pub init: u64,
    pub data: u64,
    pub augment: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneSpec,
    pub heads: HeadConfig,
    pub dims: HeadDims,
    pub role: Role,
    pub fold_id: Option<usize>,
    /// Epoch (1-based) whose parameters are stored.
    pub epoch: usize,
    pub val_map: Option<f64>,
    pub seeds: TrainSeeds,
    pub curve: Vec<EpochLog>,
    pub num_params: usize,
    pub params_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f32>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn param_bytes(params: &[f32]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn from_model(
        model: &Model<f32>,
        role: Role,
        fold_id: Option<usize>,
        epoch: usize,
        val_map: Option<f64>,
        seeds: TrainSeeds,
        curve: Vec<EpochLog>,
    ) -> Self {
        let params = model.params().to_vec();
        Checkpoint {
            meta: CheckpointMeta {
                backbone: model.backbone_spec().clone(),
                heads: model.heads().clone(),
                dims: model.dims(),
                role,
                fold_id,
                epoch,
                val_map,
                seeds,
                curve,
                num_params: params.len(),
                params_sha256: sha256_hex(&param_bytes(&params)),
            },
            params,
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(
            &self.meta.backbone,
            self.meta.heads.clone(),
            self.meta.dims,
            self.params.clone(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        serde_json::to_writer(&mut out, &self.meta).expect("serializable");
        out.push(b'\n');
        out.extend(param_bytes(&self.params));
        out
    }

    /// Writes the checkpoint and returns its file hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let src = origin.display().to_string();
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::parse(&src, 1, "not a selfdistill checkpoint"))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(&src, 2, "missing metadata line"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&rest[..nl])
            .map_err(|e| Error::parse(&src, 2, e.to_string()))?;
        let raw = &rest[nl + 1..];
        if raw.len() != meta.num_params * 4 {
            return Err(Error::Integrity {
                path: origin.to_path_buf(),
                expected: format!("{} parameter bytes", meta.num_params * 4),
                found: format!("{} bytes", raw.len()),
            });
        }
        let found = sha256_hex(raw);
        if found != meta.params_sha256 {
            return Err(Error::Integrity {
                path: origin.to_path_buf(),
                expected: meta.params_sha256.clone(),
                found,
            });
        }
        let params = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Checkpoint { meta, params })
    }

    /// Loads a checkpoint, optionally checking the whole-file hash.
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if let Some(expected) = expected_hash {
            let found = sha256_hex(&bytes);
            if found != expected {
                return Err(Error::Integrity {
                    path: path.to_path_buf(),
                    expected: expected.to_string(),
                    found,
                });
            }
        }
        Self::from_bytes(&bytes, path)
    }
}
