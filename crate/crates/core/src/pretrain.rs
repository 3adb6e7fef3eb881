//! In-repo pretraining of the attribute classifier and the base GAN.
//!
//! The base GAN uses the logistic loss with a lazily applied R1 penalty on real images.
//! The penalty needs the input gradient of D inside the loss; the squared gradient norm is
//! estimated with a random directional finite difference, `E_u[((D(x + eps u) - D(x)) / eps)^2]`
//! for `u ~ N(0, I)`, which keeps the whole step first-order.

use gatefill_tensor::{Adam, Bound, Graph, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, PretrainConfig};
use crate::corpus::{self, Labels, Split, N_ATTRIBUTES};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::runlog::RunLog;
use crate::stylegan::sample_z;

const R1_EPS: f64 = 1e-2;
const W_AVG_BETA: f32 = 0.995;

#[derive(Clone, Debug, Serialize)]
pub struct ClassifierRecord {
    pub phase: &'static str,
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GanRecord {
    pub phase: &'static str,
    pub step: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub r1: Option<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn corpus_draw<R: Rng>(cfg: &PretrainConfig, n: usize, res: usize, rng: &mut R) -> (Tensor<f32>, Vec<Labels>) {
    let idx: Vec<u64> = (0..n).map(|_| rng.gen_range(0..cfg.corpus_size)).collect();
    corpus::gather(cfg.corpus_seed, Split::Train, &idx, res)
}

fn label_tensor(labels: &[Labels]) -> Tensor<f32> {
    let data = labels.iter().flat_map(|l| l.iter().map(|&b| if b { 1.0 } else { 0.0 })).collect();
    Tensor::from_vec(&[labels.len(), N_ATTRIBUTES], data).expect("label dims")
}

fn diverged(step: u64, what: &str, v: f64) -> Error {
    Error::Diverged { step, detail: format!("{what} = {v}"), last_good: "none (pretraining writes only its final checkpoint)".into() }
}

/// Fits the attribute classifier with per-attribute logistic losses.
pub fn train_feature_net(model: &mut Model<f32>, cfg: &PretrainConfig, log: &mut RunLog) -> Result<()> {
    let mut rng = stream_rng(cfg.seed, 11);
    let mut opt = Adam::new(0.9, 0.999);
    let res = model.cfg.resolution;
    for step in 0..cfg.classifier_steps {
        let (imgs, labels) = corpus_draw(cfg, cfg.batch_size, res, &mut rng);
        let y = label_tensor(&labels);
        let g = Graph::new();
        let p = Bound::trainable(&g, &model.feat.store);
        let logits = model.feat.forward(&p, g.constant(imgs))?.logits;
        // softplus(l) - y * l
        let loss = logits.softplus().sub(logits.mul_tensor(&y)).mean_all();
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(diverged(step, "classifier loss", value));
        }
        let correct = logits.value().data().iter().zip(y.data()).filter(|(&l, &t)| (l > 0.0) == (t > 0.5)).count();
        let grads = p.grads(&loss.backward());
        drop(p);
        opt.step(&mut model.feat.store, &grads, cfg.classifier_lr);
        let rec = ClassifierRecord { phase: "classifier", step, loss: value, accuracy: correct as f64 / y.len() as f64 };
        log.record(&rec)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("classifier step {step}: loss {value:.4} acc {:.3}", rec.accuracy);
        }
    }
    Ok(())
}

/// Adversarial training of mapping, synthesis and discriminator.
pub struct GanTrainer<'m> {
    pub model: &'m mut Model<f32>,
    pub cfg: PretrainConfig,
    pub rng: ChaCha8Rng,
    pub step: u64,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
}

impl<'m> GanTrainer<'m> {
    pub fn new(model: &'m mut Model<f32>, cfg: &PretrainConfig) -> Self {
        Self {
            model,
            cfg: cfg.clone(),
            rng: stream_rng(cfg.seed, 10),
            step: 0,
            opt_g: Adam::new(cfg.adam_beta1, cfg.adam_beta2),
            opt_d: Adam::new(cfg.adam_beta1, cfg.adam_beta2),
        }
    }

    pub fn step(&mut self) -> Result<GanRecord> {
        let (b, res, zd) = (self.cfg.batch_size, self.model.cfg.resolution, self.model.cfg.z_dim);
        let step = self.step;

        // discriminator
        let (reals, _) = corpus_draw(&self.cfg, b, res, &mut self.rng);
        let fakes = {
            let z = sample_z(b, zd, &mut self.rng);
            self.model.gen.generate(&self.model.gen.map(&z)?)?
        };
        let lazy_r1 = step % self.cfg.r1_every == 0 && self.cfg.r1_gamma > 0.0;
        let probe: Option<Tensor<f32>> = lazy_r1.then(|| Tensor::randn(reals.shape(), 1.0, &mut self.rng));
        let (loss_d, r1, grads_d) = {
            let disc = &self.model.disc;
            let g = Graph::new();
            let p = Bound::trainable(&g, &disc.store);
            let real_logits = disc.forward(&p, g.constant(reals.clone()))?;
            let fake_logits = disc.forward(&p, g.constant(fakes))?;
            let mut loss = real_logits.neg().softplus().mean_all().add(fake_logits.softplus().mean_all());
            let loss_d = loss.item() as f64;
            let mut r1 = None;
            if let Some(u) = probe {
                let mut shifted = reals;
                shifted.add_assign(&u.map(|v| v * R1_EPS as f32));
                let dd = disc.forward(&p, g.constant(shifted))?.sub(real_logits).scale(1.0 / R1_EPS);
                let pen = dd.sqr().mean_all();
                r1 = Some(pen.item() as f64);
                loss = loss.add(pen.scale(0.5 * self.cfg.r1_gamma * self.cfg.r1_every as f64));
            }
            (loss_d, r1, p.grads(&loss.backward()))
        };
        if !loss_d.is_finite() || r1.is_some_and(|v| !v.is_finite()) {
            return Err(diverged(step, "discriminator loss", loss_d));
        }
        self.opt_d.step(&mut self.model.disc.store, &grads_d, self.cfg.lr);

        // generator
        let z = sample_z(b, zd, &mut self.rng);
        let (loss_g, grads_g, w_mean) = {
            let (gen, disc) = (&self.model.gen, &self.model.disc);
            let g = Graph::new();
            let pg = Bound::trainable(&g, &gen.store);
            let pd = Bound::frozen(&g, &disc.store);
            let w = gen.map_w(&pg, g.constant(z));
            let img = gen.synthesize(&pg, gen.broadcast(w), None)?.image;
            let loss = disc.forward(&pd, img)?.neg().softplus().mean_all();
            let w_mean = w.mean_axes(&[0]).value().as_ref().clone();
            (loss.item() as f64, pg.grads(&loss.backward()), w_mean)
        };
        if !loss_g.is_finite() {
            return Err(diverged(step, "generator loss", loss_g));
        }
        self.opt_g.step(&mut self.model.gen.store, &grads_g, self.cfg.lr);
        let id = self.model.gen.w_avg;
        let avg = self.model.gen.store.get(id).zip_map(&w_mean.reshape(&[self.model.cfg.w_dim])?, |a, m| m + W_AVG_BETA * (a - m))?;
        self.model.gen.store.set(id, avg)?;

        self.step += 1;
        Ok(GanRecord { phase: "gan", step, loss_d, loss_g, r1 })
    }
}

/// Classifier, then base GAN; the other networks keep their initialization.
pub fn pretrain_base_gan(model_cfg: &ModelConfig, cfg: &PretrainConfig, gated_mixer: bool, log: &mut RunLog) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut model = Model::<f32>::new(model_cfg, gated_mixer, cfg.seed)?;
    train_feature_net(&mut model, cfg, log)?;
    let (rng, steps) = {
        let mut t = GanTrainer::new(&mut model, cfg);
        for _ in 0..cfg.gan_steps {
            let rec = t.step()?;
            log.record(&rec)?;
            if cfg.log_every > 0 && rec.step % cfg.log_every == 0 {
                log::info!("gan step {}: D {:.4} G {:.4} r1 {:?}", rec.step, rec.loss_d, rec.loss_g, rec.r1);
            }
        }
        (t.rng.clone(), t.step)
    };
    log.flush()?;
    let mut ck = Checkpoint::new(model);
    ck.rng = Some(rng);
    ck.step = steps;
    Ok(ck)
}

/// Mean logit of D on a batch.
pub fn mean_logit<T: Real>(model: &Model<T>, imgs: &Tensor<T>) -> Result<f64> {
    Ok(model.disc.discriminate(imgs)?.mean().f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::store_hash;
    use crate::config::Profile;

    fn tiny_cfg(steps: u64) -> PretrainConfig {
        PretrainConfig { gan_steps: steps, classifier_steps: steps, batch_size: 4, r1_every: 2, ..PretrainConfig::default() }
    }

    #[test]
    fn zero_steps_is_initialization_and_runs_are_reproducible() {
        let mc = ModelConfig::profile(Profile::Tiny);
        let init = Model::<f32>::new(&mc, true, 0).unwrap();
        let ck = pretrain_base_gan(&mc, &tiny_cfg(0), true, &mut RunLog::discard()).unwrap();
        for ((_, a), (_, b)) in init.stores().iter().zip(ck.model.stores().iter()) {
            assert!(a.same_values(b));
        }
        let a = pretrain_base_gan(&mc, &tiny_cfg(3), true, &mut RunLog::discard()).unwrap();
        let b = pretrain_base_gan(&mc, &tiny_cfg(3), true, &mut RunLog::discard()).unwrap();
        for ((_, x), (_, y)) in a.model.stores().iter().zip(b.model.stores().iter()) {
            assert_eq!(store_hash(*x), store_hash(*y));
        }
        assert!(!a.model.gen.store.same_values(&init.gen.store));
        assert!(!a.model.feat.store.same_values(&init.feat.store));
        assert!(a.model.enc.store.same_values(&init.enc.store));
    }
}
