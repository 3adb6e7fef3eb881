//! Pyramid encoder from an erased image and its mask to a full style code.

use gatefill_tensor::{Bound, Graph, ParamStore, Path, Real, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{dim_check, Error, Result};
use crate::nn::{leaky, pool_to, Conv, Init, Linear};

#[derive(Clone, Debug)]
struct DownBlock {
    conv0: Conv,
    conv1: Conv,
    skip: Conv,
}

impl DownBlock {
    fn new<T: Real, R: Rng>(p: &mut Path<'_, T>, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv0: Conv::new(&mut p.sub("conv0"), cin, cout, 3, Init::HE, true, rng),
            conv1: Conv::new(&mut p.sub("conv1"), cout, cout, 3, Init::He { gain: 0.5 }, true, rng),
            skip: Conv::new(&mut p.sub("skip"), cin, cout, 1, Init::He { gain: 0.7 }, false, rng),
        }
    }

    fn forward<'g, T: Real>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = leaky(self.conv0.forward(p, x));
        let h = self.conv1.forward(p, h).avg_pool2();
        leaky(h.add(self.skip.forward(p, x.avg_pool2())))
    }
}

#[derive(Clone, Debug)]
struct Head {
    level: usize,
    conv: Conv,
    fc: Linear,
}

/// Four-channel input (erased RGB plus mask), no normalization layers, one head per style row.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    stem: Conv,
    stages: Vec<DownBlock>,
    laterals: Vec<Conv>,
    heads: Vec<Head>,
}

/// Generator resolution that consumes style row `i`.
pub fn style_resolution(i: usize, resolution: usize) -> usize {
    (4usize << i.div_ceil(2)).min(resolution)
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mut root = store.root();
        let ch = &cfg.enc_channels;
        let stem = Conv::new(&mut root.sub("stem"), 4, ch[0], 3, Init::HE, true, rng);
        let stages = (0..3).map(|k| DownBlock::new(&mut root.sub(format!("stage{k}")), ch[k], ch[k + 1], rng)).collect();
        let laterals = (0..3)
            .map(|k| Conv::new(&mut root.sub(format!("lateral{k}")), ch[k + 1], cfg.enc_fpn, 1, Init::He { gain: 0.7 }, true, rng))
            .collect();
        let r = cfg.resolution;
        let heads = (0..cfg.n_styles())
            .map(|i| {
                let res = style_resolution(i, r);
                // coarse rows read the deepest level, middle rows the middle one
                let level = if res <= 8 {
                    2
                } else if res <= r / 2 {
                    1
                } else {
                    0
                };
                let mut hp = root.sub(format!("head{i}"));
                Head {
                    level,
                    conv: Conv::new(&mut hp.sub("conv"), cfg.enc_fpn, cfg.enc_fpn, 3, Init::HE, true, rng),
                    fc: Linear::new(&mut hp.sub("fc"), cfg.enc_fpn * 16, cfg.w_dim, Init::He { gain: 0.1 }, Some(0.0), rng),
                }
            })
            .collect();
        Self { cfg: cfg.clone(), store, stem, stages, laterals, heads }
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            laterals: self.laterals.clone(),
            heads: self.heads.clone(),
        }
    }

    /// `erased [N, 3, R, R]` and `masks [N, 1, R, R]` to `[N, S, w_dim]`, offset by `w_avg`.
    pub fn forward<'g>(&self, p: &Bound<'g, '_, T>, erased: Var<'g, T>, masks: Var<'g, T>, w_avg: &Tensor<T>) -> Result<Var<'g, T>> {
        let (es, ms) = (erased.shape(), masks.shape());
        let r = self.cfg.resolution;
        if es.len() != 4 || ms.len() != 4 {
            return Err(Error::Dimension(format!("encoder inputs must be rank 4, got {es:?} and {ms:?}")));
        }
        dim_check("encoder image", &es[1..], &[3, r, r])?;
        dim_check("encoder mask", &ms, &[es[0], 1, r, r])?;
        let n = es[0];
        let x = leaky(self.stem.forward(p, Var::cat(&[erased, masks], 1)));
        let c1 = self.stages[0].forward(p, x);
        let c2 = self.stages[1].forward(p, c1);
        let c3 = self.stages[2].forward(p, c2);
        let p3 = self.laterals[2].forward(p, c3);
        let p2 = self.laterals[1].forward(p, c2).add(p3.upsample2());
        let p1 = self.laterals[0].forward(p, c1).add(p2.upsample2());
        let pyramid = [p1, p2, p3];
        let fpn = self.cfg.enc_fpn;
        let rows: Vec<Var<'g, T>> = self
            .heads
            .iter()
            .map(|h| {
                let f = pool_to(leaky(h.conv.forward(p, pyramid[h.level])), 4);
                h.fc.forward(p, f.reshape(&[n, fpn * 16])).reshape(&[n, 1, self.cfg.w_dim])
            })
            .collect();
        let avg = w_avg.clone().reshape(&[1, 1, self.cfg.w_dim])?;
        Ok(Var::cat(&rows, 1).add_tensor(&avg))
    }

    pub fn encode(&self, erased: &Tensor<T>, masks: &Tensor<T>, w_avg: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = Bound::frozen(&g, &self.store);
        let out = self.forward(&p, g.constant(erased.clone()), g.constant(masks.clone()), w_avg)?.value();
        if !out.all_finite() {
            return Err(Error::Numeric("encoder produced a non-finite style code".into()));
        }
        Ok((*out).clone())
    }
}
