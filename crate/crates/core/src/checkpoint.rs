//! Single-file checkpoints: safetensors arrays plus a string metadata header.
//!
//! Arrays are stored as little-endian `F32` under `<network>.<parameter>` names. The header
//! carries `format_version`, `stage`, `model_config` (JSON), `gated_mixer`, and optionally
//! `train_config` (flat key-value text), `rng` (JSON), `step` and `directions` (a file name
//! relative to the checkpoint).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use gatefill_tensor::{ParamStore, Real, Tensor};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::config::{parse_kv, render_kv, ModelConfig, Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train_config: Option<TrainConfig>,
    pub rng: Option<ChaCha8Rng>,
    pub step: u64,
    pub directions: Option<String>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Self { model, train_config: None, rng: None, step: 0, directions: None }
    }

    pub fn stage(&self) -> Stage {
        self.model.stage
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
        meta.insert("stage".to_string(), self.model.stage.to_string());
        meta.insert("model_config".to_string(), json(&self.model.cfg)?);
        meta.insert("gated_mixer".to_string(), self.model.mixer.gated.to_string());
        meta.insert("step".to_string(), self.step.to_string());
        if let Some(tc) = &self.train_config {
            meta.insert("train_config".to_string(), render_kv(&tc.to_pairs()));
        }
        if let Some(rng) = &self.rng {
            meta.insert("rng".to_string(), json(rng)?);
        }
        if let Some(d) = &self.directions {
            meta.insert("directions".to_string(), d.clone());
        }

        let mut arrays: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (prefix, store) in self.model.stores() {
            for (name, _, t) in store.iter() {
                let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                arrays.push((format!("{prefix}.{name}"), t.shape().to_vec(), bytes));
            }
        }
        let views = arrays
            .iter()
            .map(|(n, s, b)| {
                let v = TensorView::new(Dtype::F32, s.clone(), b).map_err(|e| Error::Checkpoint(format!("{n}: {e}")))?;
                Ok((n.as_str(), v))
            })
            .collect::<Result<Vec<_>>>()?;
        let bytes = safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let meta = header.metadata().clone().ok_or_else(|| bad("missing metadata header".into()))?;
        let get = |k: &str| meta.get(k).ok_or_else(|| bad(format!("missing metadata key `{k}`")));
        let version: u32 = get("format_version")?.parse().map_err(|_| bad("unreadable format_version".into()))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {version} (expected {FORMAT_VERSION})")));
        }
        let stage: Stage = get("stage")?.parse()?;
        let cfg: ModelConfig = serde_json::from_str(get("model_config")?).map_err(|e| bad(format!("model_config: {e}")))?;
        let gated: bool = get("gated_mixer")?.parse().map_err(|_| bad("unreadable gated_mixer".into()))?;
        let step = match meta.get("step") {
            Some(s) => s.parse().map_err(|_| bad("unreadable step".into()))?,
            None => 0,
        };
        let train_config = match meta.get("train_config") {
            Some(text) => {
                let mut tc = TrainConfig::default();
                for (k, v) in parse_kv(text)? {
                    tc.set(&k, &v)?;
                }
                Some(tc)
            }
            None => None,
        };
        let rng = match meta.get("rng") {
            Some(s) => Some(serde_json::from_str(s).map_err(|e| bad(format!("rng: {e}")))?),
            None => None,
        };

        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let mut model = Model::<f32>::new(&cfg, gated, 0)?;
        model.stage = stage;
        let mut expected = 0;
        for (prefix, store) in model.stores_mut() {
            expected += store.len();
            fill_store(&st, prefix, store)?;
        }
        if st.len() != expected {
            return Err(bad(format!("{} arrays stored but the architecture has {expected}", st.len())));
        }
        Ok(Self { model, train_config, rng, step, directions: meta.get("directions").cloned() })
    }

    /// Path of the directions file next to `checkpoint_path`, if one is referenced.
    pub fn directions_path(&self, checkpoint_path: &Path) -> Option<PathBuf> {
        self.directions.as_ref().map(|d| checkpoint_path.parent().unwrap_or(Path::new(".")).join(d))
    }
}

fn json<S: serde::Serialize>(v: &S) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn fill_store(st: &SafeTensors<'_>, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("{prefix}.{}", store.name(id));
        let view = st.tensor(&name).map_err(|_| Error::Checkpoint(format!("missing array `{name}`")))?;
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("`{name}` has dtype {:?}, expected F32", view.dtype())));
        }
        let want = store.get(id).shape().to_vec();
        if view.shape() != want.as_slice() {
            return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {want:?}", view.shape())));
        }
        let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        store.set(id, Tensor::from_vec(&want, data)?)?;
    }
    Ok(())
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| Error::Checkpoint(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// SHA-256 over parameter names, shapes and values.
pub fn store_hash<T: Real>(store: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for (name, _, t) in store.iter() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use rand::{Rng, SeedableRng};

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run/model.safetensors");
        let cfg = ModelConfig::profile(Profile::Tiny);
        let mut model = Model::<f32>::new(&cfg, false, 3).unwrap();
        model.stage = Stage::Stage1;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.gen();
        let ck = Checkpoint {
            model,
            train_config: Some(TrainConfig { seed: 11, ..TrainConfig::default() }),
            rng: Some(rng.clone()),
            step: 42,
            directions: Some("directions.json".into()),
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.stage(), Stage::Stage1);
        assert_eq!(back.step, 42);
        assert!(!back.model.mixer.gated);
        assert_eq!(back.train_config, ck.train_config);
        assert_eq!(back.rng.clone().unwrap().gen::<u64>(), rng.gen::<u64>());
        for ((_, a), (_, b)) in ck.model.stores().iter().zip(back.model.stores().iter()) {
            assert!(a.same_values(b));
            assert_eq!(store_hash(*a), store_hash(*b));
        }
        assert_eq!(back.directions_path(&path).unwrap(), dir.path().join("run/directions.json"));
    }

    #[test]
    fn corrupt_and_mismatched_files_are_rejected() {
        assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(Error::Checkpoint(_))));
        let cfg = ModelConfig::profile(Profile::Tiny);
        let model = Model::<f32>::new(&cfg, true, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        Checkpoint::new(model).save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // flipping gated_mixer changes the architecture the arrays must match
        let text = String::from_utf8_lossy(&bytes).to_string();
        let at = text.find("\"gated_mixer\":\"true\"").unwrap();
        bytes[at..at + 20].copy_from_slice(b"\"gated_mixer\":\"fals\"");
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
