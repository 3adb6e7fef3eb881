//! End-to-end recipes: base GAN, then each ablation variant, with checkpoints cached on disk
//! under a digest of everything that produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, ModelConfig, PretrainConfig, Profile, Stage, TrainConfig};
use crate::editing::{learn_directions, Directions};
use crate::error::{Error, Result};
use crate::pretrain::pretrain_base_gan;
use crate::runlog::RunLog;
use crate::training::{train, RunOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Generated samples per learned direction.
    pub direction_samples: usize,
}

impl Recipe {
    /// Desk-scale schedule: a few hours on one CPU core for the `cpu` profile.
    pub fn desk(profile: Profile) -> Self {
        let stage1 = TrainConfig { total_steps: 3000, batch_size: 8, lr_halving_period: 1000, log_every: 100, ..TrainConfig::default() };
        Self {
            model: ModelConfig::profile(profile),
            pretrain: PretrainConfig { gan_steps: 2000, ..PretrainConfig::default() },
            stage2: TrainConfig { stage: Stage::Stage2, total_steps: 1500, lr_halving_period: 500, ..stage1.clone() },
            stage1,
            direction_samples: 5000,
        }
    }

    /// Stage configs with an ablation's flags applied.
    pub fn variant(&self, a: Ablation) -> (TrainConfig, Option<TrainConfig>) {
        let mut s1 = TrainConfig { stage: Stage::Stage1, ..self.stage1.clone() };
        a.apply(&mut s1);
        let s2 = a.second_stage.then(|| {
            let mut s2 = TrainConfig { stage: Stage::Stage2, ..self.stage2.clone() };
            a.apply(&mut s2);
            s2
        });
        (s1, s2)
    }

    pub fn base_key(&self) -> String {
        digest(&[&json(&self.model), &json(&self.pretrain)])
    }

    pub fn stage1_key(&self, a: Ablation) -> String {
        // stage-1 training ignores second_stage, so variants 4 and 5 share it
        let s1 = TrainConfig { second_stage: false, ..self.variant(a).0 };
        digest(&[&self.base_key(), &json(&s1)])
    }

    pub fn stage2_key(&self, a: Ablation) -> Option<String> {
        self.variant(a).1.map(|s2| digest(&[&self.stage1_key(a), &json(&s2)]))
    }
}

fn json<S: Serialize>(v: &S) -> String {
    serde_json::to_string(v).expect("configs serialize")
}

fn digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    hex::encode(&h.finalize()[..8])
}

/// Directory of checkpoints named `<label>-<key>.safetensors`.
#[derive(Clone, Debug)]
pub struct ArtifactCache {
    pub dir: PathBuf,
}

impl ArtifactCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn path(&self, label: &str, key: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{label}-{key}.{ext}"))
    }

    fn checkpoint(&self, label: &str, key: &str, make: impl FnOnce(&Path) -> Result<Checkpoint>) -> Result<Checkpoint> {
        let path = self.path(label, key, "safetensors");
        if path.exists() {
            log::info!("reusing {}", path.display());
            return Checkpoint::load(&path);
        }
        let log_path = self.path(label, key, "jsonl");
        log::info!("training {label} into {}", path.display());
        let ck = make(&log_path)?;
        ck.save(&path)?;
        Ok(ck)
    }

    pub fn base(&self, r: &Recipe) -> Result<Checkpoint> {
        self.checkpoint("base", &r.base_key(), |log| {
            let mut log = RunLog::create(log)?;
            pretrain_base_gan(&r.model, &r.pretrain, true, &mut log)
        })
    }

    pub fn stage1(&self, r: &Recipe, a: Ablation) -> Result<Checkpoint> {
        let base = self.base(r)?;
        self.checkpoint(&format!("ablation{}-stage1", a.id), &r.stage1_key(a), |log| {
            let mut out = RunOutput { log: RunLog::create(log)?, checkpoint: None };
            train(base, &r.variant(a).0, &mut out)
        })
    }

    /// Final checkpoint of a variant: stage 2 when it has one, else stage 1.
    pub fn variant(&self, r: &Recipe, a: Ablation) -> Result<Checkpoint> {
        let s1 = self.stage1(r, a)?;
        let (Some(cfg), Some(key)) = (r.variant(a).1, r.stage2_key(a)) else {
            return Ok(s1);
        };
        self.checkpoint(&format!("ablation{}-stage2", a.id), &key, |log| {
            let mut out = RunOutput { log: RunLog::create(log)?, checkpoint: None };
            train(s1, &cfg, &mut out)
        })
    }

    /// Attribute directions learned on the base generator.
    pub fn directions(&self, r: &Recipe, attributes: &[&str]) -> Result<Directions> {
        let key = digest(&[&r.base_key(), &attributes.join(","), &r.direction_samples.to_string()]);
        let path = self.path("directions", &key, "json");
        if path.exists() {
            return Directions::load(&path);
        }
        let base = self.base(r)?;
        let dirs = learn_directions(&base.model, attributes, r.direction_samples, 0)?;
        dirs.save(&path)?;
        Ok(dirs)
    }
}
