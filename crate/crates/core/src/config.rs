//! Model and training configuration, plus the flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! total_steps = 10000
//! mask_band = 0.0,0.4
//! gated_mixer = true
//! ```
//!
//! Every key maps to one field; unknown keys are rejected. CLI `--set key=value`
//! overrides are applied after the file, in order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskBand;

/// Resolution profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 32x32, sized for CPU-only runs.
    Cpu,
    /// 64x64.
    Gpu,
    /// 32x32 with very narrow layers, for unit tests.
    Tiny,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpu" => Ok(Profile::Cpu),
            "gpu" => Ok(Profile::Gpu),
            "tiny" => Ok(Profile::Tiny),
            _ => Err(Error::Config(format!("unknown profile `{s}` (cpu|gpu|tiny)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    /// Generator channels per level, 4x4 first.
    pub gen_channels: Vec<usize>,
    /// Discriminator channels per level, 4x4 first.
    pub disc_channels: Vec<usize>,
    /// Encoder stem, then the R/2, R/4, R/8 stages.
    pub enc_channels: Vec<usize>,
    pub enc_fpn: usize,
    pub skip_stem: usize,
    pub skip_channels: Vec<usize>,
    pub skip_layers_per_block: usize,
    /// Initial logit of the multiplicative skip head; very negative means a neutral start.
    pub skip_mult_logit_init: f64,
    pub feat_channels: Vec<usize>,
    pub feat_dim: usize,
}

impl ModelConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Cpu => Self {
                resolution: 32,
                z_dim: 64,
                w_dim: 128,
                mapping_layers: 4,
                gen_channels: vec![64, 64, 32, 16],
                disc_channels: vec![64, 64, 32, 16],
                enc_channels: vec![16, 32, 48, 64],
                enc_fpn: 32,
                skip_stem: 32,
                skip_channels: vec![48, 64, 96],
                skip_layers_per_block: 3,
                skip_mult_logit_init: -24.0,
                feat_channels: vec![16, 32, 64],
                feat_dim: 64,
            },
            Profile::Gpu => Self {
                resolution: 64,
                gen_channels: vec![128, 128, 64, 32, 16],
                disc_channels: vec![128, 128, 64, 32, 16],
                enc_channels: vec![16, 32, 64, 128],
                enc_fpn: 64,
                ..Self::profile(Profile::Cpu)
            },
            Profile::Tiny => Self {
                resolution: 32,
                z_dim: 8,
                w_dim: 8,
                mapping_layers: 2,
                gen_channels: vec![8, 8, 4, 4],
                disc_channels: vec![8, 8, 4, 4],
                enc_channels: vec![4, 4, 4, 4],
                enc_fpn: 4,
                skip_stem: 4,
                skip_channels: vec![4, 4, 4],
                skip_layers_per_block: 1,
                skip_mult_logit_init: -24.0,
                feat_channels: vec![4, 4, 4],
                feat_dim: 8,
            },
        }
    }

    /// Number of rows of a style code: `2 * log2(resolution / 4) + 2`.
    pub fn n_styles(&self) -> usize {
        2 * self.upsampling_blocks() + 2
    }

    pub fn upsampling_blocks(&self) -> usize {
        (self.resolution / 4).trailing_zeros() as usize
    }

    /// Generator resolutions, 4 up to the output.
    pub fn levels(&self) -> Vec<usize> {
        (0..=self.upsampling_blocks()).map(|k| 4 << k).collect()
    }

    pub fn gen_channels_at(&self, res: usize) -> usize {
        self.gen_channels[(res / 4).trailing_zeros() as usize]
    }

    /// Skip-injection resolutions: the three internal resolutions right below the output.
    pub fn injection_resolutions(&self) -> Vec<usize> {
        vec![self.resolution / 8, self.resolution / 4, self.resolution / 2]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if !r.is_power_of_two() || r < 32 {
            return Err(Error::Config(format!("resolution must be a power of two >= 32, got {r}")));
        }
        let levels = self.levels().len();
        if self.gen_channels.len() != levels || self.disc_channels.len() != levels {
            return Err(Error::Config(format!("need {levels} generator/discriminator channel entries")));
        }
        if self.enc_channels.len() != 4 || self.skip_channels.len() != 3 || self.feat_channels.len() != 3 {
            return Err(Error::Config("encoder needs 4, skip 3, feature net 3 channel entries".into()));
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.mapping_layers == 0 || self.skip_layers_per_block == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Which images stage-1 trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Samples of the frozen base generator (the dual-path regime).
    Generated,
    /// Toy corpus images; only the ablation rows without full reconstruction use this.
    Corpus,
}

/// Training stage, also used as the checkpoint stage tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BaseGan,
    Stage1,
    Stage2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::BaseGan => "base_gan",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base_gan" => Ok(Stage::BaseGan),
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

/// Loss weights of the full objective and of the reconstruction terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub rg: f64,
    pub rr: f64,
    pub pixel: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adv: 8e-2, rg: 1.0, rr: 1.0, pixel: 1.0, perceptual: 5e-5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_discriminator: f64,
    /// Steps between learning-rate halvings; 0 means `total_steps / 10`.
    pub lr_halving_period: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weights: LossWeights,
    pub mask_band: MaskBand,
    pub full_recons: bool,
    pub gated_mixer: bool,
    pub second_stage: bool,
    pub data_source: DataSource,
    /// Corpus images drawn from when `data_source` is the corpus.
    pub corpus_size: u64,
    pub corpus_seed: u64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Stage1,
            total_steps: 10_000,
            batch_size: 8,
            lr: 1e-4,
            lr_discriminator: 1e-4,
            lr_halving_period: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weights: LossWeights::default(),
            mask_band: MaskBand::FULL,
            full_recons: true,
            gated_mixer: true,
            second_stage: true,
            data_source: DataSource::Generated,
            corpus_size: 20_000,
            corpus_seed: 0,
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

/// One row of the ablation table: which ingredients a variant trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub id: u8,
    pub full_recons: bool,
    pub gated_mixer: bool,
    pub second_stage: bool,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation { id: 1, full_recons: false, gated_mixer: true, second_stage: false },
        Ablation { id: 2, full_recons: false, gated_mixer: true, second_stage: true },
        Ablation { id: 3, full_recons: true, gated_mixer: false, second_stage: false },
        Ablation { id: 4, full_recons: true, gated_mixer: true, second_stage: false },
        Ablation { id: 5, full_recons: true, gated_mixer: true, second_stage: true },
    ];

    pub fn by_id(id: u8) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.id == id)
            .ok_or_else(|| Error::Config(format!("ablation id must be 1..=5, got {id}")))
    }

    /// Variants without full reconstruction train on corpus images.
    pub fn data_source(&self) -> DataSource {
        if self.full_recons {
            DataSource::Generated
        } else {
            DataSource::Corpus
        }
    }

    pub fn apply(&self, cfg: &mut TrainConfig) {
        cfg.full_recons = self.full_recons;
        cfg.gated_mixer = self.gated_mixer;
        cfg.second_stage = self.second_stage;
        cfg.data_source = self.data_source();
    }
}

impl TrainConfig {
    pub fn halving_period(&self) -> u64 {
        if self.lr_halving_period > 0 {
            self.lr_halving_period
        } else {
            (self.total_steps / 10).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_discriminator >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.full_recons && self.data_source == DataSource::Corpus {
            return Err(Error::Config("full_recons needs generated images: corpus images have no source latent".into()));
        }
        if self.corpus_size == 0 {
            return Err(Error::Config("corpus_size must be positive".into()));
        }
        self.mask_band.validate()
    }

    /// Applies a single `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let w = &mut self.weights;
        match key {
            "stage" => self.stage = value.parse()?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_discriminator" => self.lr_discriminator = parse(key, value)?,
            "lr_halving_period" => self.lr_halving_period = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "lambda_adv" => w.adv = parse(key, value)?,
            "lambda_rg" => w.rg = parse(key, value)?,
            "lambda_rr" => w.rr = parse(key, value)?,
            "pixel_weight" => w.pixel = parse(key, value)?,
            "perceptual_weight" => w.perceptual = parse(key, value)?,
            "mask_band" => self.mask_band = value.parse()?,
            "full_recons" => self.full_recons = parse(key, value)?,
            "gated_mixer" => self.gated_mixer = parse(key, value)?,
            "second_stage" => self.second_stage = parse(key, value)?,
            "data_source" => {
                self.data_source = match value {
                    "generated" => DataSource::Generated,
                    "corpus" => DataSource::Corpus,
                    _ => return Err(Error::Config(format!("data_source: `{value}` (generated|corpus)"))),
                }
            }
            "corpus_size" => self.corpus_size = parse(key, value)?,
            "corpus_seed" => self.corpus_seed = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    /// Flat listing of every key, in file order; `set` accepts each line back.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let w = &self.weights;
        let ds = match self.data_source {
            DataSource::Generated => "generated",
            DataSource::Corpus => "corpus",
        };
        [
            ("stage", self.stage.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_discriminator", self.lr_discriminator.to_string()),
            ("lr_halving_period", self.lr_halving_period.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("lambda_adv", w.adv.to_string()),
            ("lambda_rg", w.rg.to_string()),
            ("lambda_rr", w.rr.to_string()),
            ("pixel_weight", w.pixel.to_string()),
            ("perceptual_weight", w.perceptual.to_string()),
            ("mask_band", self.mask_band.to_string()),
            ("full_recons", self.full_recons.to_string()),
            ("gated_mixer", self.gated_mixer.to_string()),
            ("second_stage", self.second_stage.to_string()),
            ("data_source", ds.to_string()),
            ("corpus_size", self.corpus_size.to_string()),
            ("corpus_seed", self.corpus_seed.to_string()),
            ("seed", self.seed.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Base-GAN and feature-network pretraining recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub gan_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub r1_gamma: f64,
    pub r1_every: u64,
    pub classifier_steps: u64,
    pub classifier_lr: f64,
    pub corpus_size: u64,
    pub corpus_seed: u64,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            gan_steps: 4000,
            batch_size: 16,
            lr: 2e-3,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            r1_gamma: 1.0,
            r1_every: 4,
            classifier_steps: 600,
            classifier_lr: 2e-3,
            corpus_size: 20_000,
            corpus_seed: 0,
            seed: 0,
            log_every: 100,
        }
    }
}

impl PretrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "gan_steps" => self.gan_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "r1_gamma" => self.r1_gamma = parse(key, value)?,
            "r1_every" => self.r1_every = parse(key, value)?,
            "classifier_steps" => self.classifier_steps = parse(key, value)?,
            "classifier_lr" => self.classifier_lr = parse(key, value)?,
            "corpus_size" => self.corpus_size = parse(key, value)?,
            "corpus_seed" => self.corpus_seed = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown pretraining key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.lr <= 0.0 || self.classifier_lr <= 0.0 || self.r1_every == 0 || self.corpus_size == 0 {
            return Err(Error::Config("pretraining needs batch_size >= 2, positive rates and r1_every".into()));
        }
        Ok(())
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("bad value for `{key}`: `{value}` ({e})")))
}

/// Parses the flat `key = value` format into ordered pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        if seen.insert(k.to_string(), no).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", no + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}

pub fn render_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn style_count_follows_resolution() {
        assert_eq!(ModelConfig::profile(Profile::Cpu).n_styles(), 8);
        assert_eq!(ModelConfig::profile(Profile::Gpu).n_styles(), 10);
        assert_eq!(ModelConfig::profile(Profile::Gpu).injection_resolutions(), vec![8, 16, 32]);
        assert_eq!(ModelConfig::profile(Profile::Cpu).injection_resolutions(), vec![4, 8, 16]);
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.mask_band = MaskBand::new(0.4, 1.0).unwrap();
        cfg.gated_mixer = false;
        let text = render_kv(&cfg.to_pairs());
        let mut back = TrainConfig { seed: 99, ..TrainConfig::default() };
        for (k, v) in parse_kv(&text).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn kv_rejects_garbage() {
        assert!(parse_kv("no equals sign").is_err());
        assert!(parse_kv("a = 1\na = 2").is_err());
        assert!(TrainConfig::default().set("bogus", "1").is_err());
        assert!(TrainConfig::default().set("batch_size", "eight").is_err());
        let pairs = parse_kv("# header\nseed = 3   # trailing\n\n").unwrap();
        assert_eq!(pairs, vec![("seed".to_string(), "3".to_string())]);
    }

    #[test]
    fn ablation_rows() {
        let five = Ablation::by_id(5).unwrap();
        assert!(five.full_recons && five.gated_mixer && five.second_stage);
        let one = Ablation::by_id(1).unwrap();
        assert!(!one.full_recons && one.gated_mixer && !one.second_stage);
        assert_eq!(one.data_source(), DataSource::Corpus);
        let three = Ablation::by_id(3).unwrap();
        assert!(three.full_recons && !three.gated_mixer && !three.second_stage);
        assert!(Ablation::by_id(6).is_err());
    }
}
