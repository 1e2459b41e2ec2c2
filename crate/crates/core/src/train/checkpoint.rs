use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{History, Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{CoordDrUNet, ModelConfig};

const MAGIC: &[u8; 8] = b"TRSW0001";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const SIDECAR_FILE: &str = "checkpoint.toml";
pub const HISTORY_FILE: &str = "history.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParentRef {
    pub stage: Stage,
    pub sha256: String,
    /// Directory of the parent checkpoint when it lives on disk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

/// Trained weights with their configuration and lineage.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub parent: Option<ParentRef>,
    pub weights: Vec<(String, Vec<f32>)>,
    pub history: History,
    /// Free-form key-value metadata.
    pub notes: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    stage: Stage,
    seed: u64,
    weights_sha256: String,
    #[serde(default)]
    notes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<ParentRef>,
    model: ModelConfig,
    train: TrainConfig,
}

pub(crate) fn default_notes(lambda: Option<f64>) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("latent_tap".into(), "post-bottleneck".into());
    m.insert("weight_decay_mode".into(), "decoupled".into());
    if let Some(l) = lambda {
        m.insert("lambda".into(), l.to_string());
    }
    m
}

fn encode_weights(weights: &[(String, Vec<f32>)]) -> Vec<u8> {
    let total: usize = weights.iter().map(|(n, v)| 12 + n.len() + 4 * v.len()).sum();
    let mut out = Vec::with_capacity(12 + total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, v) in weights {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(v.len() as u64).to_le_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Vec<f32>)>> {
    let bad = |m: &str| Error::Checkpoint(format!("weights blob: {m}"));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nl = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(nl)?.to_vec()).map_err(|_| bad("name is not utf-8"))?;
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let raw = take(len.checked_mul(4).ok_or_else(|| bad("length overflow"))?)?;
        let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, v));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn weights_bytes(&self) -> Vec<u8> {
        encode_weights(&self.weights)
    }

    /// SHA-256 of the serialized weight blob.
    pub fn hash(&self) -> String {
        sha256_hex(&self.weights_bytes())
    }

    pub fn seed(&self) -> u64 {
        self.train_config.seed
    }

    /// Reference to this checkpoint for use as a parent.
    pub fn as_parent(&self, path: Option<&Path>) -> ParentRef {
        ParentRef {
            stage: self.stage,
            sha256: self.hash(),
            path: path.map(|p| p.display().to_string()),
        }
    }

    pub fn model(&self) -> Result<CoordDrUNet<f32>> {
        let mut m = CoordDrUNet::new(self.model_config.clone(), self.train_config.seed)?;
        m.load_state(&self.weights)?;
        Ok(m)
    }

    pub fn check_lineage(&self) -> Result<()> {
        self.stage.check_parent(self.parent.as_ref().map(|p| p.stage))
    }

    /// Writes `weights.bin`, `checkpoint.toml` and `history.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob = self.weights_bytes();
        let sidecar = Sidecar {
            stage: self.stage,
            seed: self.train_config.seed,
            weights_sha256: sha256_hex(&blob),
            notes: self.notes.clone(),
            parent: self.parent.clone(),
            model: self.model_config.clone(),
            train: self.train_config.clone(),
        };
        let text = toml::to_string(&sidecar).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let history = serde_json::to_string_pretty(&self.history).map_err(|e| Error::Checkpoint(e.to_string()))?;
        for (name, bytes) in [
            (WEIGHTS_FILE, blob.as_slice()),
            (SIDECAR_FILE, text.as_bytes()),
            (HISTORY_FILE, history.as_bytes()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Loads and verifies a checkpoint: weight hash, stage lineage and, when
    /// the parent directory is recorded and present, the parent's hash.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let side_path = dir.join(SIDECAR_FILE);
        let text = String::from_utf8(read(&side_path)?)
            .map_err(|_| Error::Checkpoint(format!("{} is not utf-8", side_path.display())))?;
        let side: Sidecar =
            toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", side_path.display())))?;
        let blob = read(&dir.join(WEIGHTS_FILE))?;
        let actual = sha256_hex(&blob);
        if actual != side.weights_sha256 {
            return Err(Error::Checkpoint(format!(
                "weight hash mismatch in {}: recorded {}, found {actual}",
                dir.display(),
                side.weights_sha256
            )));
        }
        let history_path = dir.join(HISTORY_FILE);
        let history = match std::fs::read(&history_path) {
            Ok(b) => serde_json::from_slice(&b).map_err(|e| Error::Checkpoint(format!("{}: {e}", history_path.display())))?,
            Err(_) => History::default(),
        };
        let ckpt = Self {
            stage: side.stage,
            model_config: side.model,
            train_config: TrainConfig { seed: side.seed, ..side.train },
            parent: side.parent,
            weights: decode_weights(&blob)?,
            history,
            notes: side.notes,
        };
        ckpt.check_lineage()?;
        ckpt.model()?;
        if let Some(p) = &ckpt.parent {
            if let Some(path) = p.path.as_deref().map(PathBuf::from).filter(|p| p.join(SIDECAR_FILE).exists()) {
                let parent = Self::load(&path)?;
                if parent.stage != p.stage || parent.hash() != p.sha256 {
                    return Err(Error::Checkpoint(format!(
                        "parent at {} does not match recorded stage {} / hash {}",
                        path.display(),
                        p.stage.as_str(),
                        p.sha256
                    )));
                }
            }
        }
        Ok(ckpt)
    }
}
