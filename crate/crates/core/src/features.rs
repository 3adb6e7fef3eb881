//! Attribute classifier whose pooled activations serve as perceptual features and whose
//! penultimate layer is the embedding used by the metrics.

use gatefill_tensor::{par, Bound, Graph, ParamStore, Real, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::corpus::N_ATTRIBUTES;
use crate::error::{dim_check, Error, Result};
use crate::nn::{leaky, Conv, Init, Linear};

/// Anything that exposes a fixed list of feature maps for a perceptual distance.
pub trait FeatureTaps<T: Real> {
    fn store(&self) -> &ParamStore<T>;
    fn taps<'g>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Vec<Var<'g, T>>;
}

pub struct FeatureVars<'g, T> {
    pub taps: Vec<Var<'g, T>>,
    pub embedding: Var<'g, T>,
    pub logits: Var<'g, T>,
}

#[derive(Clone, Debug)]
pub struct FeatureNet<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    stages: Vec<(Conv, Conv)>,
    embed: Linear,
    head: Linear,
}

const CHUNK: usize = 64;

impl<T: Real> FeatureNet<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mut root = store.root();
        let mut cin = 3;
        let mut stages = Vec::new();
        for (k, &c) in cfg.feat_channels.iter().enumerate() {
            let mut sp = root.sub(format!("stage{k}"));
            stages.push((
                Conv::new(&mut sp.sub("conv0"), cin, c, 3, Init::HE, true, rng),
                Conv::new(&mut sp.sub("conv1"), c, c, 3, Init::HE, true, rng),
            ));
            cin = c;
        }
        let embed = Linear::new(&mut root.sub("embed"), cin, cfg.feat_dim, Init::HE, Some(0.0), rng);
        let head = Linear::new(&mut root.sub("head"), cfg.feat_dim, N_ATTRIBUTES, Init::He { gain: 0.5 }, Some(0.0), rng);
        Self { cfg: cfg.clone(), store, stages, embed, head }
    }

    pub fn cast<U: Real>(&self) -> FeatureNet<U> {
        FeatureNet {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            stages: self.stages.clone(),
            embed: self.embed.clone(),
            head: self.head.clone(),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Result<FeatureVars<'g, T>> {
        let s = x.shape();
        let r = self.cfg.resolution;
        if s.len() != 4 {
            return Err(Error::Dimension(format!("feature net input must be [N, 3, H, W], got {s:?}")));
        }
        dim_check("feature net input", &s[1..], &[3, r, r])?;
        let taps = self.stage_taps(p, x);
        let last = *taps.last().expect("three stages");
        let pooled = last.mean_axes(&[2, 3]).reshape(&[s[0], *self.cfg.feat_channels.last().expect("stages")]);
        let embedding = leaky(self.embed.forward(p, pooled));
        let logits = self.head.forward(p, embedding);
        Ok(FeatureVars { taps, embedding, logits })
    }

    fn stage_taps<'g>(&self, p: &Bound<'g, '_, T>, mut x: Var<'g, T>) -> Vec<Var<'g, T>> {
        let mut taps = Vec::with_capacity(self.stages.len());
        for (c0, c1) in &self.stages {
            x = leaky(c1.forward(p, leaky(c0.forward(p, x)))).avg_pool2();
            taps.push(x);
        }
        taps
    }

    fn chunked(&self, images: &Tensor<T>, pick: impl Fn(&FeatureVars<'_, T>) -> Tensor<T> + Sync) -> Result<Tensor<T>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let chunks = n.div_ceil(CHUNK);
        // chunks are independent graphs, so they can be evaluated concurrently
        let parts = par::map_range(chunks, |c| -> Result<Tensor<T>> {
            let len = CHUNK.min(n - c * CHUNK);
            let g = Graph::new();
            let p = Bound::frozen(&g, &self.store);
            let out = self.forward(&p, g.constant(images.narrow0(c * CHUNK, len)))?;
            Ok(pick(&out))
        });
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat0(&parts)?)
    }

    /// `[N, feat_dim]` embeddings.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.chunked(images, |o| (*o.embedding.value()).clone())
    }

    /// `[N, attributes]` logits.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.chunked(images, |o| (*o.logits.value()).clone())
    }
}

impl<T: Real> FeatureTaps<T> for FeatureNet<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn taps<'g>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Vec<Var<'g, T>> {
        self.stage_taps(p, x)
    }
}
