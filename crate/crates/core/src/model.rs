//! All networks of the pipeline and the tensor-level inference path.

use gatefill_tensor::{Bound, Graph, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Stage};
use crate::encoder::Encoder;
use crate::error::{dim_check, Error, Result};
use crate::features::FeatureNet;
use crate::masking::compose_batch;
use crate::mixer::Mixer;
use crate::skip::{maps_to_vars, SkipEncoder, SkipMaps};
use crate::stylegan::{Discriminator, Generator};

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub stage: Stage,
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub feat: FeatureNet<T>,
    pub enc: Encoder<T>,
    pub mixer: Mixer<T>,
    pub skip: SkipEncoder<T>,
}

/// Everything one inpainting pass produces, batched.
#[derive(Clone, Debug)]
pub struct Completion<T> {
    pub erased: Tensor<T>,
    pub w_enc: Tensor<T>,
    pub w_out: Tensor<T>,
    /// Raw first-pass generator output.
    pub stage1_output: Tensor<T>,
    pub stage1_composite: Tensor<T>,
    /// Second-pass output and composite; equal to the first pass when the refiner is off.
    pub output: Tensor<T>,
    pub composite: Tensor<T>,
}

impl<T: Real> Model<T> {
    /// Fresh networks; each one draws from its own stream so changing one size keeps the rest.
    pub fn new(cfg: &ModelConfig, gated_mixer: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        Ok(Self {
            cfg: cfg.clone(),
            stage: Stage::BaseGan,
            gen: Generator::new(cfg, &mut rng(1)),
            disc: Discriminator::new(cfg, &mut rng(2)),
            feat: FeatureNet::new(cfg, &mut rng(3)),
            enc: Encoder::new(cfg, &mut rng(4)),
            mixer: Mixer::new(cfg, gated_mixer, &mut rng(5)),
            skip: SkipEncoder::new(cfg, &mut rng(6)),
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            stage: self.stage,
            gen: self.gen.cast(),
            disc: self.disc.cast(),
            feat: self.feat.cast(),
            enc: self.enc.cast(),
            mixer: self.mixer.cast(),
            skip: self.skip.cast(),
        }
    }

    /// Parameter stores under their checkpoint prefixes.
    pub fn stores(&self) -> [(&'static str, &gatefill_tensor::ParamStore<T>); 6] {
        [
            ("gen", &self.gen.store),
            ("disc", &self.disc.store),
            ("feat", &self.feat.store),
            ("enc", &self.enc.store),
            ("mixer", &self.mixer.store),
            ("skip", &self.skip.store),
        ]
    }

    pub fn stores_mut(&mut self) -> [(&'static str, &mut gatefill_tensor::ParamStore<T>); 6] {
        [
            ("gen", &mut self.gen.store),
            ("disc", &mut self.disc.store),
            ("feat", &mut self.feat.store),
            ("enc", &mut self.enc.store),
            ("mixer", &mut self.mixer.store),
            ("skip", &mut self.skip.store),
        ]
    }

    /// Whether the second pass runs by default.
    pub fn has_refiner(&self) -> bool {
        self.stage == Stage::Stage2
    }

    fn check_inputs(&self, images: &Tensor<T>, masks: &Tensor<T>) -> Result<usize> {
        let r = self.cfg.resolution;
        if images.rank() != 4 {
            return Err(Error::Dimension(format!("images must be [N, 3, {r}, {r}], got {:?}", images.shape())));
        }
        let n = images.dim(0);
        dim_check("images", images.shape(), &[n, 3, r, r])?;
        dim_check("masks", masks.shape(), &[n, 1, r, r])?;
        Ok(n)
    }

    /// `M * I` for `[N, 3, R, R]` images and `[N, 1, R, R]` masks.
    pub fn erase(&self, images: &Tensor<T>, masks: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_inputs(images, masks)?;
        Ok(gatefill_tensor::broadcast_zip(images, masks, |x, m| if m == T::one() { x } else { T::zero() })?)
    }

    pub fn encode(&self, images: &Tensor<T>, masks: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let erased = self.erase(images, masks)?;
        let w_enc = self.enc.encode(&erased, masks, self.gen.w_avg())?;
        Ok((erased, w_enc))
    }

    /// Synthesis from `w_out`, optionally followed by the skip-refined second pass.
    pub fn render(&self, images: &Tensor<T>, masks: &Tensor<T>, erased: &Tensor<T>, w_out: &Tensor<T>, refine: bool) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
        let stage1_output = self.gen.generate(w_out)?;
        let stage1_composite = compose_batch(images, masks, &stage1_output)?;
        if !refine {
            return Ok((stage1_output.clone(), stage1_composite.clone(), stage1_output, stage1_composite));
        }
        let maps = self.skip.refine(&stage1_composite, erased, masks)?;
        let output = self.synthesize_with(w_out, &maps)?;
        let composite = compose_batch(images, masks, &output)?;
        Ok((stage1_output, stage1_composite, output, composite))
    }

    pub fn synthesize_with(&self, w: &Tensor<T>, maps: &SkipMaps<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = Bound::frozen(&g, &self.gen.store);
        let vars = maps_to_vars(&g, maps);
        Ok((*self.gen.synthesize(&p, g.constant(w.clone()), Some(&vars))?.image.value()).clone())
    }

    /// Full pipeline for given latents `z [N, z_dim]`, optionally shifting `w_out` by `edit`
    /// (`[N, S, D]`) before synthesis.
    pub fn complete_with(&self, images: &Tensor<T>, masks: &Tensor<T>, z: &Tensor<T>, edit: Option<&Tensor<T>>, refine: bool) -> Result<Completion<T>> {
        let (erased, w_enc) = self.encode(images, masks)?;
        self.complete_from(images, masks, erased, w_enc, z, edit, refine)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn complete_from(
        &self,
        images: &Tensor<T>,
        masks: &Tensor<T>,
        erased: Tensor<T>,
        w_enc: Tensor<T>,
        z: &Tensor<T>,
        edit: Option<&Tensor<T>>,
        refine: bool,
    ) -> Result<Completion<T>> {
        let n = self.check_inputs(images, masks)?;
        dim_check("z", z.shape(), &[n, self.cfg.z_dim])?;
        let w_rand = self.gen.map(z)?;
        let mut w_out = self.mixer.mix(&w_enc, &w_rand)?.w_out;
        if let Some(e) = edit {
            dim_check("edit offset", e.shape(), w_out.shape())?;
            w_out.add_assign(e);
        }
        let (stage1_output, stage1_composite, output, composite) = self.render(images, masks, &erased, &w_out, refine)?;
        Ok(Completion { erased, w_enc, w_out, stage1_output, stage1_composite, output, composite })
    }

    pub fn complete(&self, images: &Tensor<T>, masks: &Tensor<T>, z: &Tensor<T>) -> Result<Completion<T>> {
        self.complete_with(images, masks, z, None, self.has_refiner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::masking::{mask_batch, sample_mask, MaskBand};
    use crate::stylegan::sample_z;

    #[test]
    fn valid_pixels_survive_both_passes() {
        let cfg = ModelConfig::profile(Profile::Tiny);
        let mut model = Model::<f32>::new(&cfg, true, 0).unwrap();
        model.stage = Stage::Stage2;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let imgs = Tensor::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng);
        let masks: Vec<_> = (0..2).map(|s| sample_mask(MaskBand::DIFFICULT, 32, s).unwrap()).collect();
        let m = mask_batch(&masks).unwrap();
        let c = model.complete(&imgs, &m, &sample_z(2, cfg.z_dim, &mut rng)).unwrap();
        for (i, (&x, (&a, &b))) in imgs.data().iter().zip(c.composite.data().iter().zip(c.stage1_composite.data())).enumerate() {
            let (n, rest) = (i / (3 * 1024), i % 1024);
            if m.data()[n * 1024 + rest] == 1.0 {
                assert_eq!(x, a);
                assert_eq!(x, b);
            }
        }
        // the freshly built refiner is (numerically) the identity injection
        assert!(c.composite.max_abs_diff(&c.stage1_composite) < 1e-6);
    }
}
