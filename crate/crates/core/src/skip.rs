//! Second-stage skip encoder producing feature residuals for the generator.

use std::collections::BTreeMap;

use gatefill_tensor::{Bound, Graph, ParamStore, Path, Real, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{dim_check, Error, Result};
use crate::nn::{BatchNorm, Conv, Init, PRelu, StatUpdates};
use crate::stylegan::SkipVars;

/// `(G_mult, G_add)` per injection resolution, each `[N, C_r, r, r]`.
pub type SkipMaps<T> = BTreeMap<usize, (Tensor<T>, Tensor<T>)>;

/// `g_f + g_f * mult + add`, elementwise.
pub fn inject<T: Real>(g_f: &Tensor<T>, mult: &Tensor<T>, add: &Tensor<T>) -> Result<Tensor<T>> {
    dim_check("G_mult", mult.shape(), g_f.shape())?;
    dim_check("G_add", add.shape(), g_f.shape())?;
    let data = g_f
        .data()
        .iter()
        .zip(mult.data())
        .zip(add.data())
        .map(|((&f, &m), &a)| f + f * m + a)
        .collect();
    Ok(Tensor::from_vec(g_f.shape(), data)?)
}

/// All-zero maps shaped for `n` images: the identity injection.
pub fn neutral_maps<T: Real>(cfg: &ModelConfig, n: usize) -> SkipMaps<T> {
    cfg.injection_resolutions()
        .into_iter()
        .map(|r| {
            let shape = [n, cfg.gen_channels_at(r), r, r];
            (r, (Tensor::zeros(&shape), Tensor::zeros(&shape)))
        })
        .collect()
}

pub fn maps_to_vars<'g, T: Real>(g: &'g Graph<T>, maps: &SkipMaps<T>) -> SkipVars<'g, T> {
    maps.iter().map(|(&r, (m, a))| (r, (g.constant(m.clone()), g.constant(a.clone())))).collect()
}

#[derive(Clone, Debug)]
struct ResLayer {
    conv: Conv,
    bn: BatchNorm,
    act: PRelu,
}

impl ResLayer {
    fn new<T: Real, R: Rng>(p: &mut Path<'_, T>, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv::new(&mut p.sub("conv"), cin, cout, 3, Init::HE, false, rng),
            bn: BatchNorm::new(&mut p.sub("bn"), cout),
            act: PRelu::new(&mut p.sub("act"), cout),
        }
    }

    fn forward<'g, T: Real>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>, up: Option<&mut StatUpdates<T>>) -> Var<'g, T> {
        self.act.forward(p, self.bn.forward(p, self.conv.forward(p, x), up))
    }
}

#[derive(Clone, Debug)]
struct Block {
    layers: Vec<ResLayer>,
    shortcut: Conv,
}

#[derive(Clone, Debug)]
struct Heads {
    res: usize,
    mult: Conv,
    add: Conv,
}

/// Input: stage-one composite, erased image and mask (7 channels).
#[derive(Clone, Debug)]
pub struct SkipEncoder<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    stem: ResLayer,
    blocks: Vec<Block>,
    heads: Vec<Heads>,
}

impl<T: Real> SkipEncoder<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self::with_mult_bias(cfg, cfg.skip_mult_logit_init, rng)
    }

    /// Builds with an explicit initial logit for the multiplicative heads.
    pub fn with_mult_bias<R: Rng>(cfg: &ModelConfig, mult_bias: f64, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mut root = store.root();
        let stem = ResLayer::new(&mut root.sub("stem"), 7, cfg.skip_stem, rng);
        let inj = cfg.injection_resolutions();
        let mut blocks = Vec::new();
        let mut heads = Vec::new();
        let mut cin = cfg.skip_stem;
        for (k, &cout) in cfg.skip_channels.iter().enumerate() {
            let mut bp = root.sub(format!("block{k}"));
            let layers = (0..cfg.skip_layers_per_block)
                .map(|l| ResLayer::new(&mut bp.sub(format!("layer{l}")), if l == 0 { cin } else { cout }, cout, rng))
                .collect();
            let shortcut = Conv::new(&mut bp.sub("shortcut"), cin, cout, 1, Init::HE, false, rng);
            blocks.push(Block { layers, shortcut });
            // block k halves k + 1 times: R/2, R/4, R/8
            let res = inj[inj.len() - 1 - k];
            let cg = cfg.gen_channels_at(res);
            let mut mp = bp.sub("mult");
            let mult = Conv::new(&mut mp, cout, cg, 3, Init::Zeros, false, rng).with_bias(&mut mp, mult_bias);
            let add = Conv::new(&mut bp.sub("add"), cout, cg, 3, Init::Zeros, true, rng);
            heads.push(Heads { res, mult, add });
            cin = cout;
        }
        Self { cfg: cfg.clone(), store, stem, blocks, heads }
    }

    pub fn cast<U: Real>(&self) -> SkipEncoder<U> {
        SkipEncoder {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            heads: self.heads.clone(),
        }
    }

    /// Batch-norm layers use batch statistics iff `updates` is given.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g, '_, T>,
        composite: Var<'g, T>,
        erased: Var<'g, T>,
        masks: Var<'g, T>,
        mut updates: Option<&mut StatUpdates<T>>,
    ) -> Result<SkipVars<'g, T>> {
        let r = self.cfg.resolution;
        let cs = composite.shape();
        if cs.len() != 4 {
            return Err(Error::Dimension(format!("skip encoder input must be rank 4, got {cs:?}")));
        }
        let n = cs[0];
        dim_check("stage-one composite", &cs, &[n, 3, r, r])?;
        dim_check("erased image", &erased.shape(), &[n, 3, r, r])?;
        dim_check("mask", &masks.shape(), &[n, 1, r, r])?;
        let x = Var::cat(&[composite, erased, masks], 1);
        let mut h = self.stem.forward(p, x, updates.as_deref_mut());
        let mut out = SkipVars::new();
        for (block, heads) in self.blocks.iter().zip(&self.heads) {
            let pooled = h.max_pool2();
            h = block.layers[0].forward(p, pooled, updates.as_deref_mut()).add(block.shortcut.forward(p, pooled));
            for layer in &block.layers[1..] {
                h = h.add(layer.forward(p, h, updates.as_deref_mut()));
            }
            let mult = heads.mult.forward(p, h).sigmoid();
            let add = heads.add.forward(p, h);
            out.insert(heads.res, (mult, add));
        }
        Ok(out)
    }

    /// Evaluation-mode maps for `[N, ...]` inputs.
    pub fn refine(&self, composite: &Tensor<T>, erased: &Tensor<T>, masks: &Tensor<T>) -> Result<SkipMaps<T>> {
        let g = Graph::new();
        let p = Bound::frozen(&g, &self.store);
        let vars = self.forward(&p, g.constant(composite.clone()), g.constant(erased.clone()), g.constant(masks.clone()), None)?;
        Ok(vars.into_iter().map(|(r, (m, a))| (r, ((*m.value()).clone(), (*a.value()).clone()))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_logits_give_half_mult_and_zero_add() {
        let cfg = ModelConfig::profile(Profile::Tiny);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = SkipEncoder::<f32>::with_mult_bias(&cfg, 0.0, &mut rng);
        let x = Tensor::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng);
        let maps = s.refine(&x, &x, &Tensor::ones(&[2, 1, 32, 32])).unwrap();
        assert_eq!(maps.keys().copied().collect::<Vec<_>>(), cfg.injection_resolutions());
        for (r, (m, a)) in &maps {
            assert_eq!(m.shape(), &[2, cfg.gen_channels_at(*r), *r, *r]);
            assert!(m.data().iter().all(|&v| v == 0.5));
            assert!(a.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn default_init_is_nearly_neutral() {
        let cfg = ModelConfig::profile(Profile::Tiny);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = SkipEncoder::<f32>::new(&cfg, &mut rng);
        let x = Tensor::uniform(&[1, 3, 32, 32], -1.0, 1.0, &mut rng);
        let maps = s.refine(&x, &x, &Tensor::zeros(&[1, 1, 32, 32])).unwrap();
        assert!(maps.values().all(|(m, a)| m.max_abs() < 1e-9 && a.max_abs() == 0.0));
    }

    #[test]
    fn inject_examples() {
        let t = |v: f64| Tensor::<f64>::scalar(v);
        assert_eq!(inject(&t(3.0), &t(0.5), &t(-1.0)).unwrap().item(), 3.5);
        assert_eq!(inject(&t(3.0), &t(1.0), &t(0.0)).unwrap().item(), 6.0);
        assert_eq!(inject(&t(3.0), &t(0.0), &t(0.0)).unwrap().item(), 3.0);
        assert!(inject(&Tensor::<f64>::zeros(&[2]), &t(0.0), &t(0.0)).is_err());
    }
}
