//! Dual-path stage-1 training, the stage-2 fine-tune, schedules and checkpointing.
//!
//! Every stage-1 step encodes an erased image once and decodes it twice: path (a) mixes the
//! code with the image's own source latent and must rebuild the whole image; path (b) mixes
//! it with a fresh latent and is only held to the valid pixels. Both composites go to D.
//! Stage 2 freezes encoder, mixer and GAN and trains the skip encoder (and D) with the same
//! objective on the second-pass output.

use std::path::{Path, PathBuf};

use gatefill_tensor::{grad_norm, Adam, Bound, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{store_hash, Checkpoint};
use crate::config::{DataSource, Stage, TrainConfig};
use crate::corpus::{self, Split};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::masking::{compose_batch, compose_var, mask_batch, sample_masks};
use crate::mixer::Mixer;
use crate::model::Model;
use crate::nn::StatUpdates;
use crate::objectives::{adv_d_var, adv_g_var, loss_rg_var, loss_rr_var, total_var, LossBreakdown};
use crate::runlog::RunLog;
use crate::skip::SkipEncoder;
use crate::stylegan::sample_z;

/// `base * 2^-floor(step / period)`.
pub fn lr_schedule(step: u64, base: f64, period: u64) -> f64 {
    let halvings = (step / period.max(1)).min(1000) as i32;
    base * 0.5f64.powi(halvings)
}

/// One training batch. `z_g` is the source latent of generated images, absent for corpus images.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub z_g: Option<Tensor<f32>>,
    pub masks: Tensor<f32>,
    pub z_r: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepOutcome {
    pub step: u64,
    pub lr: f64,
    pub lr_discriminator: f64,
    /// Same-latent path; absent without full reconstruction.
    pub path_a: Option<LossBreakdown>,
    /// Fresh-latent path.
    pub path_b: LossBreakdown,
    pub total: LossBreakdown,
    /// Gradient norm over the trainable inversion networks.
    pub grad_norm: f64,
    pub grad_norm_discriminator: f64,
}

/// SHA-256 of each frozen network, for checking freeze contracts.
pub fn frozen_hashes(model: &Model<f32>, stage: Stage) -> Vec<(&'static str, String)> {
    let frozen: &[&str] = match stage {
        Stage::BaseGan => &["enc", "mixer", "skip"],
        Stage::Stage1 => &["gen", "feat", "skip"],
        Stage::Stage2 => &["gen", "feat", "enc", "mixer"],
    };
    model.stores().into_iter().filter(|(n, _)| frozen.contains(n)).map(|(n, s)| (n, store_hash(s))).collect()
}

pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    pub rng: ChaCha8Rng,
    pub step: u64,
    opt_main: Vec<Adam<f32>>,
    opt_d: Adam<f32>,
    last_good: Option<PathBuf>,
}

impl Trainer {
    /// Stage 1 starts from a base-GAN checkpoint with freshly initialized encoder, mixer and
    /// skip encoder; stage 2 continues a stage-1 checkpoint.
    pub fn new(ck: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model = ck.model;
        let init = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(stream);
            r
        };
        match cfg.stage {
            Stage::Stage1 => {
                if model.stage != Stage::BaseGan {
                    return Err(Error::Config(format!("stage-1 training needs a base_gan checkpoint, got {}", model.stage)));
                }
                model.enc = Encoder::new(&model.cfg, &mut init(4));
                model.mixer = Mixer::new(&model.cfg, cfg.gated_mixer, &mut init(5));
                model.skip = SkipEncoder::new(&model.cfg, &mut init(6));
                model.stage = Stage::Stage1;
            }
            Stage::Stage2 => {
                if model.stage != Stage::Stage1 {
                    return Err(Error::Config(format!("stage-2 training needs a stage1 checkpoint, got {}", model.stage)));
                }
                if !cfg.second_stage {
                    return Err(Error::Config("second_stage = false: this variant has no stage 2".into()));
                }
                if cfg.gated_mixer != model.mixer.gated {
                    return Err(Error::Config("gated_mixer differs from the stage-1 checkpoint".into()));
                }
                model.stage = Stage::Stage2;
            }
            Stage::BaseGan => return Err(Error::Config("base GAN pretraining has its own entry point".into())),
        }
        let n_main = if cfg.stage == Stage::Stage1 { 2 } else { 1 };
        Ok(Self {
            model,
            rng: init(20),
            step: 0,
            opt_main: (0..n_main).map(|_| Adam::new(cfg.adam_beta1, cfg.adam_beta2)).collect(),
            opt_d: Adam::new(cfg.adam_beta1, cfg.adam_beta2),
            cfg,
            last_good: None,
        })
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(self.step, self.cfg.lr, self.cfg.halving_period())
    }

    pub fn lr_discriminator(&self) -> f64 {
        lr_schedule(self.step, self.cfg.lr_discriminator, self.cfg.halving_period())
    }

    pub fn sample_batch(&mut self) -> Result<Batch> {
        let (b, r, zd) = (self.cfg.batch_size, self.model.cfg.resolution, self.model.cfg.z_dim);
        let (images, z_g) = match self.cfg.data_source {
            DataSource::Generated => {
                let z = sample_z(b, zd, &mut self.rng);
                (self.model.gen.generate(&self.model.gen.map(&z)?)?, Some(z))
            }
            DataSource::Corpus => {
                let idx: Vec<u64> = (0..b).map(|_| self.rng.gen_range(0..self.cfg.corpus_size)).collect();
                (corpus::gather(self.cfg.corpus_seed, Split::Train, &idx, r).0, None)
            }
        };
        let masks = mask_batch(&sample_masks(self.cfg.mask_band, r, b, &mut self.rng)?)?;
        let z_r = sample_z(b, zd, &mut self.rng);
        Ok(Batch { images, z_g, masks, z_r })
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let batch = self.sample_batch()?;
        self.step_on(&batch)
    }

    /// One optimization step on a given batch.
    pub fn step_on(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let out = match self.cfg.stage {
            Stage::Stage1 => self.stage1_step(batch),
            _ => self.stage2_step(batch),
        }?;
        self.step += 1;
        Ok(out)
    }

    /// Inputs duplicated per active path, plus the random codes in path order.
    fn path_inputs(&self, batch: &Batch) -> Result<PathInputs> {
        let full = self.cfg.full_recons;
        if full && batch.z_g.is_none() {
            return Err(Error::Config("full reconstruction needs the source latent of every image".into()));
        }
        let m = &self.model;
        let erased = m.erase(&batch.images, &batch.masks)?;
        let w_b = m.gen.map(&batch.z_r)?;
        let dup = |t: &Tensor<f32>| -> Result<Tensor<f32>> { if full { Ok(Tensor::cat0(&[t.clone(), t.clone()])?) } else { Ok(t.clone()) } };
        let w_rand = match &batch.z_g {
            Some(z) if full => Tensor::cat0(&[m.gen.map(z)?, w_b])?,
            _ => w_b,
        };
        Ok(PathInputs {
            images: dup(&batch.images)?,
            masks: dup(&batch.masks)?,
            erased2: dup(&erased)?,
            erased,
            w_rand,
        })
    }

    fn stage1_step(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let inp = self.path_inputs(batch)?;
        let m = &self.model;
        let w = self.cfg.weights;
        let b = batch.images.dim(0);
        let g = Graph::new();
        let pe = Bound::trainable(&g, &m.enc.store);
        let pm = Bound::trainable(&g, &m.mixer.store);
        let pg = Bound::frozen(&g, &m.gen.store);
        let pd = Bound::frozen(&g, &m.disc.store);
        let pf = Bound::frozen(&g, &m.feat.store);
        let w_enc = m.enc.forward(&pe, g.constant(inp.erased.clone()), g.constant(batch.masks.clone()), m.gen.w_avg())?;
        let w_enc2 = if self.cfg.full_recons { Var::cat(&[w_enc, w_enc], 0) } else { w_enc };
        let w_out = m.mixer.forward(&pm, w_enc2, g.constant(inp.w_rand.clone()))?.w_out;
        let out = m.gen.synthesize(&pg, w_out, None)?.image;
        let (terms, composites) = self.objective(&g, &pd, &pf, &inp, out, b, &w);
        let grads = terms.total.backward();
        let ge = pe.grads(&grads);
        let gm = pm.grads(&grads);
        let norm = (grad_norm(&ge).powi(2) + grad_norm(&gm).powi(2)).sqrt();
        let (mut outcome, composites) = self.finish_terms(terms, composites, norm)?;
        drop((pe, pm, pg, pd, pf));
        let lr = self.lr();
        self.opt_main[0].step(&mut self.model.enc.store, &ge, lr);
        self.opt_main[1].step(&mut self.model.mixer.store, &gm, lr);
        self.discriminator_step(&inp.images, &composites, b, &mut outcome)?;
        Ok(outcome)
    }

    fn stage2_step(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let inp = self.path_inputs(batch)?;
        let m = &self.model;
        let w = self.cfg.weights;
        let b = batch.images.dim(0);
        let w_enc = m.enc.encode(&inp.erased, &batch.masks, m.gen.w_avg())?;
        let w_enc2 = if self.cfg.full_recons { Tensor::cat0(&[w_enc.clone(), w_enc])? } else { w_enc };
        let w_out = m.mixer.mix(&w_enc2, &inp.w_rand)?.w_out;
        let first = compose_batch(&inp.images, &inp.masks, &m.gen.generate(&w_out)?)?;
        let g = Graph::new();
        let ps = Bound::trainable(&g, &m.skip.store);
        let pg = Bound::frozen(&g, &m.gen.store);
        let pd = Bound::frozen(&g, &m.disc.store);
        let pf = Bound::frozen(&g, &m.feat.store);
        let mut updates = StatUpdates::new();
        let skips = m.skip.forward(&ps, g.constant(first), g.constant(inp.erased2.clone()), g.constant(inp.masks.clone()), Some(&mut updates))?;
        let out = m.gen.synthesize(&pg, g.constant(w_out), Some(&skips))?.image;
        let (terms, composites) = self.objective(&g, &pd, &pf, &inp, out, b, &w);
        let grads = terms.total.backward();
        let gs = ps.grads(&grads);
        let (mut outcome, composites) = self.finish_terms(terms, composites, grad_norm(&gs))?;
        drop((ps, pg, pd, pf));
        let lr = self.lr();
        self.opt_main[0].step(&mut self.model.skip.store, &gs, lr);
        for (id, t) in updates {
            self.model.skip.store.set(id, t)?;
        }
        self.discriminator_step(&inp.images, &composites, b, &mut outcome)?;
        Ok(outcome)
    }

    /// Reconstruction and generator-side adversarial terms on the decoded batch `out`,
    /// laid out as `[path a; path b]` (or just path b).
    #[allow(clippy::too_many_arguments)]
    fn objective<'g>(
        &self,
        g: &'g Graph<f32>,
        pd: &Bound<'g, '_, f32>,
        pf: &Bound<'g, '_, f32>,
        inp: &PathInputs,
        out: Var<'g, f32>,
        b: usize,
        w: &crate::config::LossWeights,
    ) -> (Terms<'g>, Var<'g, f32>) {
        let m = &self.model;
        let full = self.cfg.full_recons;
        let (out_a, out_b) = if full { (Some(out.narrow(0, 0, b)), out.narrow(0, b, b)) } else { (None, out) };
        let rg = out_a.map(|oa| loss_rg_var(&m.feat, pf, oa, g.constant(inp.images.narrow0(0, b)), w));
        let masks_b = inp.masks.narrow0(inp.masks.dim(0) - b, b);
        let rr = loss_rr_var(&m.feat, pf, out_b, g.constant(inp.erased.clone()), &masks_b, w);
        let composites = compose_var(g.constant(inp.images.clone()), &inp.masks, out);
        let logits = m.disc.forward(pd, composites).expect("composites match the discriminator");
        let (la, lb) = if full { (Some(logits.narrow(0, 0, b)), logits.narrow(0, b, b)) } else { (None, logits) };
        let adv_a = la.map(|l| adv_g_var(&[l]));
        let adv_b = adv_g_var(&[lb]);
        let adv = adv_a.map_or(adv_b, |a| a.add(adv_b));
        let total = total_var(Some(adv), rg.as_ref().map(|r| r.total), Some(rr.total), w).expect("adversarial term present");
        let path_a = rg.map(|r| PathTerms { recon: r.total, pixel: r.pixel, perceptual: r.perceptual, adv: adv_a.expect("paired with rg") });
        let path_b = PathTerms { recon: rr.total, pixel: rr.pixel, perceptual: rr.perceptual, adv: adv_b };
        (Terms { path_a, path_b, adv, total }, composites)
    }

    fn finish_terms(&self, t: Terms<'_>, composites: Var<'_, f32>, norm: f64) -> Result<(StepOutcome, Tensor<f32>)> {
        let w = &self.cfg.weights;
        let v = |x: Var<'_, f32>| x.item() as f64;
        let path_a = t.path_a.map(|p| LossBreakdown {
            l_rg: v(p.recon),
            rg_pixel: v(p.pixel),
            rg_perceptual: v(p.perceptual),
            l_adv_g: v(p.adv),
            total: w.adv * v(p.adv) + w.rg * v(p.recon),
            ..LossBreakdown::default()
        });
        let p = t.path_b;
        let path_b = LossBreakdown {
            l_rr: v(p.recon),
            rr_pixel: v(p.pixel),
            rr_perceptual: v(p.perceptual),
            l_adv_g: v(p.adv),
            total: w.adv * v(p.adv) + w.rr * v(p.recon),
            ..LossBreakdown::default()
        };
        let a = path_a.unwrap_or_default();
        let total = LossBreakdown {
            l_rg: a.l_rg,
            l_rr: path_b.l_rr,
            l_adv_g: v(t.adv),
            total: v(t.total),
            rg_pixel: a.rg_pixel,
            rg_perceptual: a.rg_perceptual,
            rr_pixel: path_b.rr_pixel,
            rr_perceptual: path_b.rr_perceptual,
            l_adv_d: 0.0,
        };
        if !total.is_finite() || !norm.is_finite() {
            return Err(self.diverged(format!("non-finite objective {total:?}, gradient norm {norm}")));
        }
        let outcome = StepOutcome {
            step: self.step,
            lr: self.lr(),
            lr_discriminator: self.lr_discriminator(),
            path_a,
            path_b,
            total,
            grad_norm: norm,
            grad_norm_discriminator: 0.0,
        };
        Ok((outcome, composites.value().as_ref().clone()))
    }

    /// D maximizes the adversarial value with the training images as the real term.
    fn discriminator_step(&mut self, images: &Tensor<f32>, composites: &Tensor<f32>, b: usize, outcome: &mut StepOutcome) -> Result<()> {
        let disc = &self.model.disc;
        let g = Graph::new();
        let p = Bound::trainable(&g, &disc.store);
        let real = disc.forward(&p, g.constant(images.narrow0(0, b)))?;
        let fake = disc.forward(&p, g.constant(composites.clone()))?;
        let fakes: Vec<_> = (0..composites.dim(0) / b).map(|k| fake.narrow(0, k * b, b)).collect();
        let loss = adv_d_var(real, &fakes);
        let value = loss.item() as f64;
        let grads = p.grads(&loss.backward());
        let norm = grad_norm(&grads);
        if !value.is_finite() || !norm.is_finite() {
            return Err(self.diverged(format!("discriminator loss {value}, gradient norm {norm}")));
        }
        drop(p);
        let lr = self.lr_discriminator();
        if lr > 0.0 {
            self.opt_d.step(&mut self.model.disc.store, &grads, lr);
        }
        outcome.total.l_adv_d = value;
        outcome.path_b.l_adv_d = value;
        if let Some(a) = &mut outcome.path_a {
            a.l_adv_d = value;
        }
        outcome.grad_norm_discriminator = norm;
        Ok(())
    }

    fn diverged(&self, detail: String) -> Error {
        let last_good = self.last_good.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string());
        Error::Diverged { step: self.step, detail, last_good }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train_config: Some(self.cfg.clone()),
            rng: Some(self.rng.clone()),
            step: self.step,
            directions: None,
        }
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)?;
        self.last_good = Some(path.to_path_buf());
        Ok(())
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint { model: self.model, train_config: Some(self.cfg), rng: Some(self.rng), step: self.step, directions: None }
    }
}

struct PathInputs {
    images: Tensor<f32>,
    masks: Tensor<f32>,
    erased: Tensor<f32>,
    erased2: Tensor<f32>,
    w_rand: Tensor<f32>,
}

struct PathTerms<'g> {
    recon: Var<'g, f32>,
    pixel: Var<'g, f32>,
    perceptual: Var<'g, f32>,
    adv: Var<'g, f32>,
}

struct Terms<'g> {
    path_a: Option<PathTerms<'g>>,
    path_b: PathTerms<'g>,
    adv: Var<'g, f32>,
    total: Var<'g, f32>,
}

/// Where a training run writes its log and checkpoints.
#[derive(Default)]
pub struct RunOutput {
    pub log: RunLog,
    /// Saved every `checkpoint_every` steps and at the end.
    pub checkpoint: Option<PathBuf>,
}

/// Runs `cfg.total_steps` steps from `start`.
pub fn train(start: Checkpoint, cfg: &TrainConfig, out: &mut RunOutput) -> Result<Checkpoint> {
    let mut t = Trainer::new(start, cfg.clone())?;
    for _ in 0..cfg.total_steps {
        let o = t.step()?;
        out.log.record(&o)?;
        if cfg.log_every > 0 && o.step % cfg.log_every == 0 {
            log::info!(
                "{} step {}: total {:.4} rg {:.4} rr {:.4} adv_g {:.4} adv_d {:.4} lr {:.2e}",
                cfg.stage,
                o.step,
                o.total.total,
                o.total.l_rg,
                o.total.l_rr,
                o.total.l_adv_g,
                o.total.l_adv_d,
                o.lr
            );
        }
        if let Some(p) = &out.checkpoint {
            if cfg.checkpoint_every > 0 && t.step % cfg.checkpoint_every == 0 {
                t.save(p)?;
            }
        }
    }
    out.log.flush()?;
    if let Some(p) = &out.checkpoint {
        t.save(p)?;
    }
    Ok(t.into_checkpoint())
}

pub fn train_stage1(cfg: &TrainConfig, base: Checkpoint, out: &mut RunOutput) -> Result<Checkpoint> {
    let cfg = TrainConfig { stage: Stage::Stage1, ..cfg.clone() };
    train(base, &cfg, out)
}

pub fn train_stage2(cfg: &TrainConfig, stage1: Checkpoint, out: &mut RunOutput) -> Result<Checkpoint> {
    let cfg = TrainConfig { stage: Stage::Stage2, ..cfg.clone() };
    train(stage1, &cfg, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Profile};

    fn base() -> Checkpoint {
        Checkpoint::new(Model::new(&ModelConfig::profile(Profile::Tiny), true, 0).unwrap())
    }

    fn cfg(steps: u64) -> TrainConfig {
        TrainConfig { total_steps: steps, batch_size: 2, log_every: 0, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_halves() {
        assert_eq!(lr_schedule(0, 1e-4, 10), 1e-4);
        assert_eq!(lr_schedule(10, 1e-4, 10), 5e-5);
        assert_eq!(lr_schedule(30, 1e-4, 10), 1.25e-5);
        assert_eq!(lr_schedule(9, 1e-4, 10), 1e-4);
    }

    #[test]
    fn zero_steps_is_initialization() {
        let a = train_stage1(&cfg(0), base(), &mut RunOutput::default()).unwrap();
        let t = Trainer::new(base(), cfg(0)).unwrap();
        for ((_, x), (_, y)) in a.model.stores().iter().zip(t.model.stores().iter()) {
            assert!(x.same_values(y));
        }
        assert_eq!(a.stage(), Stage::Stage1);
    }

    #[test]
    fn steps_are_reproducible_and_respect_freezing() {
        let run = || {
            let mut t = Trainer::new(base(), cfg(2)).unwrap();
            let before = frozen_hashes(&t.model, Stage::Stage1);
            let outs: Vec<_> = (0..2).map(|_| t.step().unwrap()).collect();
            assert_eq!(before, frozen_hashes(&t.model, Stage::Stage1));
            (outs, t.into_checkpoint())
        };
        let (a, ck) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert!(a[0].path_a.is_some());
        assert!(a.iter().all(|o| o.total.is_finite() && o.grad_norm > 0.0));

        let c2 = TrainConfig { stage: Stage::Stage2, ..cfg(1) };
        let mut t2 = Trainer::new(ck, c2).unwrap();
        let before = frozen_hashes(&t2.model, Stage::Stage2);
        t2.step().unwrap();
        assert_eq!(before, frozen_hashes(&t2.model, Stage::Stage2));
    }

    #[test]
    fn corpus_variant_has_no_path_a() {
        let mut c = cfg(1);
        crate::config::Ablation::by_id(1).unwrap().apply(&mut c);
        let mut t = Trainer::new(base(), c).unwrap();
        let o = t.step().unwrap();
        assert!(o.path_a.is_none());
        assert_eq!(o.total.l_rg, 0.0);
    }

    #[test]
    fn wrong_stage_is_rejected() {
        let c = TrainConfig { stage: Stage::Stage2, ..cfg(0) };
        assert!(matches!(Trainer::new(base(), c), Err(Error::Config(_))));
    }
}
