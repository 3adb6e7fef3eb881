use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use gatefill_core::checkpoint::Checkpoint;
use gatefill_core::editing::Directions;
use gatefill_core::imageio::{decode_mask_png, decode_png, encode_png};
use gatefill_core::masking::mask_batch;
use gatefill_core::model::Model;
use gatefill_core::stylegan::sample_z;
use gatefill_core::{BinaryMask, Profile};
use gatefill_tensor::Tensor;
use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ApiError, ErrorCode};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub checkpoint: Option<PathBuf>,
    /// When set, the checkpoint's resolution must match this profile.
    pub profile: Option<Profile>,
    pub port: u16,
    pub max_sessions: usize,
    /// Append-only journal that lets sessions survive a restart.
    pub persist: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { checkpoint: None, profile: None, port: 8080, max_sessions: 256, persist: None }
    }
}

impl ServiceConfig {
    /// Reads `GATEFILL_CHECKPOINT`, `GATEFILL_PROFILE`, `GATEFILL_PORT`, `GATEFILL_MAX_SESSIONS`
    /// and `GATEFILL_SESSION_FILE` on top of the defaults.
    pub fn from_env() -> Result<Self, String> {
        let mut cfg = Self::default();
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        cfg.checkpoint = var("GATEFILL_CHECKPOINT").map(PathBuf::from);
        if let Some(p) = var("GATEFILL_PROFILE") {
            cfg.profile = Some(p.parse().map_err(|e: gatefill_core::Error| e.to_string())?);
        }
        if let Some(p) = var("GATEFILL_PORT") {
            cfg.port = p.parse().map_err(|_| format!("bad GATEFILL_PORT `{p}`"))?;
        }
        if let Some(n) = var("GATEFILL_MAX_SESSIONS") {
            cfg.max_sessions = n.parse().map_err(|_| format!("bad GATEFILL_MAX_SESSIONS `{n}`"))?;
        }
        cfg.persist = var("GATEFILL_SESSION_FILE").map(PathBuf::from);
        Ok(cfg)
    }
}

/// Read-only model state shared by every request.
pub struct Engine {
    pub model: Model<f32>,
    pub directions: Directions,
    pub refine: bool,
}

impl Engine {
    pub fn new(model: Model<f32>, directions: Directions) -> Self {
        let refine = model.has_refiner();
        Self { model, directions, refine }
    }

    pub fn load(path: &Path) -> gatefill_core::Result<Self> {
        let ck = Checkpoint::load(path)?;
        let directions = match ck.directions_path(path) {
            Some(p) => Directions::load(&p)?,
            None => Directions::default(),
        };
        Ok(Self::new(ck.model, directions))
    }

    fn latent(&self, seed: u64) -> Tensor<f32> {
        sample_z(1, self.model.cfg.z_dim, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditEntry {
    pub direction: String,
    pub strength: f64,
}

struct Session {
    id: String,
    image_png: Vec<u8>,
    mask_png: Vec<u8>,
    image: Tensor<f32>,
    mask: BinaryMask,
    masks: Tensor<f32>,
    erased: Tensor<f32>,
    w_enc: Tensor<f32>,
    seed: u64,
    edits: Vec<EditEntry>,
    created_ms: u64,
    updated_ms: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum JournalRecord {
    Put { id: String, image: String, mask: String, seed: u64, edits: Vec<EditEntry>, created_ms: u64, updated_ms: u64 },
    Evict { id: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub seed: u64,
    pub edits: Vec<EditEntry>,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub erased_ratio: f64,
    /// Digest of the encoded style code, handy for checking encoder determinism.
    pub w_enc_sha256: String,
    /// Base64 PNG of the composed completion.
    pub composite: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionInfo {
    pub name: String,
    pub sigma: f64,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_loaded: bool,
    pub stage: Option<String>,
    pub resolution: Option<usize>,
    pub sessions: usize,
}

struct Slot {
    session: Arc<Mutex<Session>>,
    last_used: u64,
}

#[derive(Default)]
struct Store {
    slots: HashMap<String, Slot>,
    clock: u64,
}

pub struct Service {
    engine: Option<Engine>,
    max_sessions: usize,
    store: Mutex<Store>,
    journal: Option<Mutex<File>>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn decode_b64(what: ErrorCode, s: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(s.trim()).map_err(|e| ApiError::new(what, format!("invalid base64: {e}")))
}

fn digest(t: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl Service {
    pub fn new(engine: Option<Engine>, max_sessions: usize) -> Self {
        Self { engine, max_sessions: max_sessions.max(1), store: Mutex::default(), journal: None }
    }

    /// Builds the service from config. A missing or unreadable checkpoint leaves the service
    /// up, answering model requests with `no_checkpoint`.
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, String> {
        let engine = match &cfg.checkpoint {
            Some(p) => match Engine::load(p) {
                Ok(e) => Some(e),
                Err(e) => {
                    log::error!("checkpoint {} not loaded: {e}", p.display());
                    None
                }
            },
            None => None,
        };
        if let (Some(e), Some(p)) = (&engine, cfg.profile) {
            let want = gatefill_core::ModelConfig::profile(p).resolution;
            if e.model.cfg.resolution != want {
                return Err(format!("checkpoint resolution {} does not match profile {p:?} ({want})", e.model.cfg.resolution));
            }
        }
        let mut svc = Self::new(engine, cfg.max_sessions);
        if let Some(path) = &cfg.persist {
            svc.replay(path)?;
            let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| format!("{}: {e}", path.display()))?;
            svc.journal = Some(Mutex::new(f));
        }
        Ok(svc)
    }

    fn replay(&mut self, path: &Path) -> Result<(), String> {
        let Ok(f) = File::open(path) else { return Ok(()) };
        let mut latest: Vec<(String, Option<JournalRecord>)> = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| format!("{}: {e}", path.display()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JournalRecord = serde_json::from_str(&line).map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))?;
            let id = match &rec {
                JournalRecord::Put { id, .. } | JournalRecord::Evict { id } => id.clone(),
            };
            latest.retain(|(k, _)| *k != id);
            latest.push((id, matches!(rec, JournalRecord::Put { .. }).then_some(rec)));
        }
        if self.engine.is_none() {
            return Ok(());
        }
        for (_, rec) in latest {
            if let Some(JournalRecord::Put { id, image, mask, seed, edits, created_ms, updated_ms }) = rec {
                let mut s = self.build(id.clone(), &image, &mask, seed).map_err(|e| format!("session {id}: {}", e.message))?;
                s.edits = edits;
                s.created_ms = created_ms;
                s.updated_ms = updated_ms;
                self.insert(s);
            }
        }
        Ok(())
    }

    pub fn engine(&self) -> Result<&Engine, ApiError> {
        self.engine.as_ref().ok_or_else(|| ApiError::new(ErrorCode::NoCheckpoint, "no checkpoint is loaded"))
    }

    fn build(&self, id: String, image_b64: &str, mask_b64: &str, seed: u64) -> Result<Session, ApiError> {
        let engine = self.engine()?;
        let r = engine.model.cfg.resolution;
        let image_png = decode_b64(ErrorCode::BadImage, image_b64)?;
        let mask_png = decode_b64(ErrorCode::BadMask, mask_b64)?;
        let image: Tensor<f32> = decode_png(&image_png).map_err(|e| ApiError::new(ErrorCode::BadImage, e.to_string()))?;
        if image.shape() != [3, r, r] {
            return Err(ApiError::new(ErrorCode::BadImage, format!("image must be {r}x{r}, got {}x{}", image.dim(2), image.dim(1))));
        }
        let mask = decode_mask_png(&mask_png).map_err(|e| ApiError::new(ErrorCode::BadMask, e.to_string()))?;
        if (mask.height(), mask.width()) != (r, r) {
            return Err(ApiError::new(ErrorCode::BadMask, format!("mask must be {r}x{r}, got {}x{}", mask.width(), mask.height())));
        }
        let image = image.reshape(&[1, 3, r, r]).map_err(ApiError::internal)?;
        let masks = mask_batch(std::slice::from_ref(&mask))?;
        let (erased, w_enc) = engine.model.encode(&image, &masks)?;
        let t = now_ms();
        Ok(Session { id, image_png, mask_png, image, mask, masks, erased, w_enc, seed, edits: Vec::new(), created_ms: t, updated_ms: t })
    }

    fn insert(&self, s: Session) {
        let mut store = self.store.lock();
        store.clock += 1;
        let tick = store.clock;
        store.slots.insert(s.id.clone(), Slot { session: Arc::new(Mutex::new(s)), last_used: tick });
        while store.slots.len() > self.max_sessions {
            let oldest = store.slots.iter().min_by_key(|(_, v)| v.last_used).map(|(k, _)| k.clone()).expect("non-empty");
            store.slots.remove(&oldest);
            self.journal_write(&JournalRecord::Evict { id: oldest });
        }
    }

    fn lookup(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let mut store = self.store.lock();
        store.clock += 1;
        let tick = store.clock;
        let slot = store.slots.get_mut(id).ok_or_else(|| ApiError::new(ErrorCode::UnknownSession, format!("no session `{id}`")))?;
        slot.last_used = tick;
        Ok(slot.session.clone())
    }

    fn journal_write(&self, rec: &JournalRecord) {
        if let Some(j) = &self.journal {
            let line = serde_json::to_string(rec).expect("journal record serializes");
            if let Err(e) = writeln!(j.lock(), "{line}") {
                log::error!("session journal write failed: {e}");
            }
        }
    }

    fn journal_put(&self, s: &Session) {
        if self.journal.is_some() {
            self.journal_write(&JournalRecord::Put {
                id: s.id.clone(),
                image: B64.encode(&s.image_png),
                mask: B64.encode(&s.mask_png),
                seed: s.seed,
                edits: s.edits.clone(),
                created_ms: s.created_ms,
                updated_ms: s.updated_ms,
            });
        }
    }

    /// Full pipeline from the stored code, current latent and accumulated edits.
    fn render(&self, s: &Session) -> Result<Tensor<f32>, ApiError> {
        let engine = self.engine()?;
        let z = engine.latent(s.seed);
        let shape = [1, engine.model.cfg.n_styles(), engine.model.cfg.w_dim];
        let mut offset = Tensor::<f64>::zeros(&shape);
        for e in &s.edits {
            offset.add_assign(&engine.directions.get(&e.direction)?.offset::<f64>(&shape, e.strength)?);
        }
        let offset = offset.cast::<f32>();
        let c = engine.model.complete_from(&s.image, &s.masks, s.erased.clone(), s.w_enc.clone(), &z, Some(&offset), engine.refine)?;
        let r = engine.model.cfg.resolution;
        Ok(c.composite.reshape(&[3, r, r]).map_err(ApiError::internal)?)
    }

    fn view(&self, s: &Session) -> Result<SessionView, ApiError> {
        let img = self.render(s)?;
        Ok(SessionView {
            id: s.id.clone(),
            seed: s.seed,
            edits: s.edits.clone(),
            created_ms: s.created_ms,
            updated_ms: s.updated_ms,
            erased_ratio: s.mask.erased_ratio(),
            w_enc_sha256: digest(&s.w_enc),
            composite: B64.encode(encode_png(&img)?),
        })
    }

    pub fn create_session(&self, image_b64: &str, mask_b64: &str, seed: Option<u64>) -> Result<SessionView, ApiError> {
        let id = hex::encode(rand::random::<[u8; 16]>());
        let s = self.build(id, image_b64, mask_b64, seed.unwrap_or_else(rand::random))?;
        let view = self.view(&s)?;
        self.journal_put(&s);
        self.insert(s);
        Ok(view)
    }

    pub fn get_session(&self, id: &str) -> Result<SessionView, ApiError> {
        let slot = self.lookup(id)?;
        let s = slot.lock();
        self.view(&s)
    }

    pub fn resample(&self, id: &str, seed: Option<u64>) -> Result<SessionView, ApiError> {
        let slot = self.lookup(id)?;
        let mut s = slot.lock();
        s.seed = seed.unwrap_or_else(rand::random);
        s.updated_ms = now_ms();
        let view = self.view(&s)?;
        self.journal_put(&s);
        Ok(view)
    }

    pub fn edit(&self, id: &str, direction: &str, strength: f64) -> Result<SessionView, ApiError> {
        let engine = self.engine()?;
        engine.directions.get(direction)?;
        if !strength.is_finite() {
            return Err(ApiError::new(ErrorCode::Internal, "strength must be finite"));
        }
        let slot = self.lookup(id)?;
        let mut s = slot.lock();
        s.edits.push(EditEntry { direction: direction.to_string(), strength });
        s.updated_ms = now_ms();
        match self.view(&s) {
            Ok(v) => {
                self.journal_put(&s);
                Ok(v)
            }
            Err(e) => {
                s.edits.pop();
                Err(e)
            }
        }
    }

    pub fn directions(&self) -> Result<Vec<DirectionInfo>, ApiError> {
        Ok(self.engine()?.directions.directions.iter().map(|d| DirectionInfo { name: d.name.clone(), sigma: d.sigma, dim: d.vector.len() }).collect())
    }

    pub fn health(&self) -> Health {
        let e = self.engine.as_ref();
        Health {
            status: "ok".into(),
            checkpoint_loaded: e.is_some(),
            stage: e.map(|e| e.model.stage.to_string()),
            resolution: e.map(|e| e.model.cfg.resolution),
            sessions: self.store.lock().slots.len(),
        }
    }
}
