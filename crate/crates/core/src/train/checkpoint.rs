//! Binary checkpoint container: magic, format version, JSON manifest, little-endian f64 payload.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ResolvedSplit, TrainConfig};
use super::trainer::EpochRecord;
use crate::data::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::model::{CodeBounds, Codebook, RelationVocab, WorldModel};
use crate::month::Month;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"OODSIMCK";
pub const FORMAT_VERSION: u32 = 1;

/// A trained model together with everything needed to reuse it on the same dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: WorldModel,
    pub norm: NormStats,
    pub config: TrainConfig,
    pub split: ResolvedSplit,
    pub states: Vec<String>,
    pub first_month: Month,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Codebook,
    Norm,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: Group,
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CodebookMeta {
    decay: f64,
    eps: f64,
    dead_after: u64,
    initialized: bool,
    reseeds: u64,
    idle_steps: Vec<u64>,
    usage: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config_fingerprint: String,
    config: TrainConfig,
    split: ResolvedSplit,
    states: Vec<String>,
    first_month: Month,
    channels: usize,
    entity_dim: usize,
    outcome_channel: usize,
    vocab: RelationVocab,
    bounds: CodeBounds,
    codebook: CodebookMeta,
    norm_degenerate: Vec<(usize, usize)>,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut tensors: Vec<(Group, String, &Array2<f64>)> =
            m.params.iter().map(|(n, t)| (Group::Param, n.to_string(), t)).collect();
        let counts = m.codebook.counts.clone().insert_axis(ndarray::Axis(0));
        tensors.push((Group::Codebook, "codes".into(), &m.codebook.codes));
        tensors.push((Group::Codebook, "counts".into(), &counts));
        tensors.push((Group::Codebook, "sums".into(), &m.codebook.sums));
        tensors.push((Group::Norm, "mean".into(), &self.norm.mean));
        tensors.push((Group::Norm, "std".into(), &self.norm.std));

        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(tensors.len());
        for (group, name, t) in &tensors {
            entries.push(TensorEntry {
                group: *group,
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
                dtype: "f64".into(),
                offset: payload.len(),
            });
            for v in t.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let cb = &m.codebook;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config_fingerprint: self.fingerprint(),
            config: self.config.clone(),
            split: self.split.clone(),
            states: self.states.clone(),
            first_month: self.first_month,
            channels: m.channels,
            entity_dim: m.entity_dim,
            outcome_channel: m.outcome_channel,
            vocab: m.vocab.clone(),
            bounds: m.bounds,
            codebook: CodebookMeta {
                decay: cb.decay,
                eps: cb.eps,
                dead_after: cb.dead_after,
                initialized: cb.initialized,
                reseeds: cb.reseeds,
                idle_steps: cb.idle_steps.clone(),
                usage: cb.usage.clone(),
            },
            norm_degenerate: self.norm.degenerate.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(bad("manifest and header versions differ"));
        }
        if manifest.config_fingerprint != manifest.config.fingerprint() {
            return Err(bad("config fingerprint does not match the stored config"));
        }
        let payload = &bytes[20 + len..];
        let mut params = ParamStore::new();
        let mut codes = None;
        let mut counts = None;
        let mut sums = None;
        let mut mean = None;
        let mut std = None;
        let mut end = 0;
        for t in &manifest.tensors {
            if t.dtype != "f64" {
                return Err(bad(format!("tensor {} has dtype {}", t.name, t.dtype)));
            }
            let n = t.shape[0] * t.shape[1];
            let raw = payload.get(t.offset..t.offset + 8 * n).ok_or_else(|| bad(format!("tensor {} truncated", t.name)))?;
            let values: Vec<f64> =
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), values).expect("shape matches length");
            end = end.max(t.offset + 8 * n);
            match (t.group, t.name.as_str()) {
                (Group::Param, name) => params.insert(name, arr),
                (Group::Codebook, "codes") => codes = Some(arr),
                (Group::Codebook, "counts") => counts = Some(arr),
                (Group::Codebook, "sums") => sums = Some(arr),
                (Group::Norm, "mean") => mean = Some(arr),
                (Group::Norm, "std") => std = Some(arr),
                (g, name) => return Err(bad(format!("unexpected tensor {g:?}/{name}"))),
            }
        }
        if end != payload.len() {
            return Err(bad("payload length does not match the manifest"));
        }
        let missing = |what: &str| bad(format!("missing tensor {what}"));
        let meta = manifest.codebook;
        let counts: Array1<f64> = counts.ok_or_else(|| missing("codebook counts"))?.row(0).to_owned();
        let codebook = Codebook {
            codes: codes.ok_or_else(|| missing("codebook codes"))?,
            counts,
            sums: sums.ok_or_else(|| missing("codebook sums"))?,
            idle_steps: meta.idle_steps,
            usage: meta.usage,
            decay: meta.decay,
            eps: meta.eps,
            dead_after: meta.dead_after,
            initialized: meta.initialized,
            reseeds: meta.reseeds,
        };
        let model = WorldModel {
            config: manifest.config.model.clone(),
            params,
            codebook,
            vocab: manifest.vocab,
            bounds: manifest.bounds,
            channels: manifest.channels,
            entity_dim: manifest.entity_dim,
            outcome_channel: manifest.outcome_channel,
        };
        let norm = NormStats {
            mean: mean.ok_or_else(|| missing("norm mean"))?,
            std: std.ok_or_else(|| missing("norm std"))?,
            degenerate: manifest.norm_degenerate,
        };
        Ok(Checkpoint {
            model,
            norm,
            config: manifest.config,
            split: manifest.split,
            states: manifest.states,
            first_month: manifest.first_month,
            history: manifest.history,
            best_epoch: manifest.best_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialised checkpoint, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Fails unless `data` has the states, start month, channels and entity width the
    /// checkpoint was trained on.
    pub fn check_compatible(&self, data: &Dataset) -> Result<()> {
        if data.panel.states() != self.states.as_slice() {
            return Err(Error::SplitMismatch("dataset states differ from the checkpoint's".into()));
        }
        if data.panel.first_month() != self.first_month {
            return Err(Error::SplitMismatch(format!(
                "dataset starts at {}, checkpoint at {}",
                data.panel.first_month(),
                self.first_month
            )));
        }
        if data.panel.num_months() < self.split.test.end {
            return Err(Error::SplitMismatch("dataset is shorter than the checkpoint's test period".into()));
        }
        if data.panel.num_channels() != self.model.channels || data.entities.dim() != self.model.entity_dim {
            return Err(Error::DimensionMismatch("dataset channels or entity width differ from the checkpoint".into()));
        }
        Ok(())
    }
}
