//! Style-based generator, mapping network and residual discriminator.

use std::collections::BTreeMap;

use gatefill_tensor::{Bound, Graph, ParamId, ParamStore, Path, Real, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{dim_check, Error, Result};
use crate::nn::{lrelu, style_row, Conv, Init, Linear};

const MAPPING_LR_MUL: f64 = 0.01;
const DEMOD_EPS: f64 = 1e-8;

/// In-graph skip residuals keyed by resolution: `(G_mult, G_add)`.
pub type SkipVars<'g, T> = BTreeMap<usize, (Var<'g, T>, Var<'g, T>)>;

/// `g_f + g_f * mult + add`
pub fn inject<'g, T: Real>(g_f: Var<'g, T>, mult: Var<'g, T>, add: Var<'g, T>) -> Var<'g, T> {
    g_f.add(g_f.mul(mult)).add(add)
}

#[derive(Clone, Debug)]
struct ModConv {
    affine: Linear,
    conv: Conv,
    demod: bool,
    act: bool,
}

impl ModConv {
    fn new<T: Real, R: Rng>(p: &mut Path<'_, T>, w_dim: usize, cin: usize, cout: usize, k: usize, demod: bool, rng: &mut R) -> Self {
        let affine = Linear::new(&mut p.sub("affine"), w_dim, cin, Init::EQ, Some(1.0), rng);
        let conv = Conv::new(p, cin, cout, k, Init::EQ, true, rng);
        Self { affine, conv, demod, act: demod }
    }

    fn forward<'g, T: Real>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>, style: Var<'g, T>) -> Var<'g, T> {
        let n = x.shape()[0];
        let (cin, cout) = (self.conv.cin, self.conv.cout);
        let s = self.affine.forward(p, style);
        let w = self.conv.scaled_weight(p);
        let mut y = x.mul(s.reshape(&[n, cin, 1, 1])).conv2d(w, self.conv.k / 2);
        if self.demod {
            let wsq = w.sqr().sum_axes(&[2, 3]).reshape(&[cout, cin]).t();
            let d = s.sqr().matmul(wsq).add_scalar(DEMOD_EPS).powf(-0.5);
            y = y.mul(d.reshape(&[n, cout, 1, 1]));
        }
        let y = self.conv.add_bias(p, y);
        if self.act {
            lrelu(y)
        } else {
            y
        }
    }
}

#[derive(Clone, Debug)]
struct GenBlock {
    res: usize,
    conv0: Option<(ModConv, usize)>,
    conv1: (ModConv, usize),
    to_rgb: (ModConv, usize),
}

/// Image and the pre-injection feature block of every resolution.
pub struct Synthesis<'g, T> {
    pub image: Var<'g, T>,
    pub features: BTreeMap<usize, Var<'g, T>>,
}

/// Mapping network plus synthesis network. Parameters live in `store`.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    mapping: Vec<Linear>,
    pub w_avg: ParamId,
    const_input: ParamId,
    blocks: Vec<GenBlock>,
}

impl<T: Real> Generator<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mut root = store.root();
        let mut map_path = root.sub("mapping");
        let mut mapping = Vec::new();
        for i in 0..cfg.mapping_layers {
            let din = if i == 0 { cfg.z_dim } else { cfg.w_dim };
            let init = Init::Equalized { lr_mul: MAPPING_LR_MUL };
            mapping.push(Linear::new(&mut map_path.sub(format!("fc{i}")), din, cfg.w_dim, init, Some(0.0), rng));
        }
        let w_avg = map_path.buffer("w_avg", Tensor::zeros(&[cfg.w_dim]));
        let mut syn = root.sub("synthesis");
        let c0 = cfg.gen_channels[0];
        let const_input = syn.weight("const", Tensor::randn(&[1, c0, 4, 4], 1.0, rng));
        let mut blocks = Vec::new();
        for (k, &res) in cfg.levels().iter().enumerate() {
            let mut bp = syn.sub(format!("b{res}"));
            let cout = cfg.gen_channels[k];
            let block = if k == 0 {
                GenBlock {
                    res,
                    conv0: None,
                    conv1: (ModConv::new(&mut bp.sub("conv1"), cfg.w_dim, c0, cout, 3, true, rng), 0),
                    to_rgb: (ModConv::new(&mut bp.sub("torgb"), cfg.w_dim, cout, 3, 1, false, rng), 1),
                }
            } else {
                let cin = cfg.gen_channels[k - 1];
                GenBlock {
                    res,
                    conv0: Some((ModConv::new(&mut bp.sub("conv0"), cfg.w_dim, cin, cout, 3, true, rng), 2 * k - 1)),
                    conv1: (ModConv::new(&mut bp.sub("conv1"), cfg.w_dim, cout, cout, 3, true, rng), 2 * k),
                    to_rgb: (ModConv::new(&mut bp.sub("torgb"), cfg.w_dim, cout, 3, 1, false, rng), 2 * k + 1),
                }
            };
            blocks.push(block);
        }
        Self { cfg: cfg.clone(), store, mapping, w_avg, const_input, blocks }
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            mapping: self.mapping.clone(),
            w_avg: self.w_avg,
            const_input: self.const_input,
            blocks: self.blocks.clone(),
        }
    }

    pub fn n_styles(&self) -> usize {
        self.cfg.n_styles()
    }

    /// `[N, z_dim]` to one w per sample, `[N, w_dim]`.
    pub fn map_w<'g>(&self, p: &Bound<'g, '_, T>, z: Var<'g, T>) -> Var<'g, T> {
        let inv = z.sqr().mean_axes(&[1]).add_scalar(1e-8).powf(-0.5);
        let mut x = z.mul(inv);
        for fc in &self.mapping {
            x = lrelu(fc.forward(p, x));
        }
        x
    }

    /// `[N, w_dim]` broadcast to `[N, S, w_dim]`.
    pub fn broadcast<'g>(&self, w: Var<'g, T>) -> Var<'g, T> {
        let s = w.shape();
        w.reshape(&[s[0], 1, s[1]]).expand(&[s[0], self.n_styles(), s[1]])
    }

    /// Synthesis from a `[N, S, w_dim]` code, with optional skip residuals.
    pub fn synthesize<'g>(&self, p: &Bound<'g, '_, T>, w: Var<'g, T>, skips: Option<&SkipVars<'g, T>>) -> Result<Synthesis<'g, T>> {
        let ws = w.shape();
        if ws.len() != 3 {
            return Err(Error::Dimension(format!("style code must be [N, S, D], got {ws:?}")));
        }
        dim_check("style code", &ws[1..], &[self.n_styles(), self.cfg.w_dim])?;
        let n = ws[0];
        if let Some(sk) = skips {
            let allowed = self.cfg.injection_resolutions();
            if let Some(r) = sk.keys().find(|r| !allowed.contains(r)) {
                return Err(Error::Dimension(format!("no skip injection at resolution {r} (allowed {allowed:?})")));
            }
        }
        let c0 = self.cfg.gen_channels[0];
        let mut x = p.var(self.const_input).expand(&[n, c0, 4, 4]);
        let mut img: Option<Var<'g, T>> = None;
        let mut features = BTreeMap::new();
        for b in &self.blocks {
            if let Some((conv0, i)) = &b.conv0 {
                x = conv0.forward(p, x.upsample2(), style_row(w, *i));
            }
            x = b.conv1.0.forward(p, x, style_row(w, b.conv1.1));
            features.insert(b.res, x);
            if let Some((mult, add)) = skips.and_then(|s| s.get(&b.res)) {
                dim_check(&format!("G_mult at {}", b.res), &mult.shape(), &x.shape())?;
                dim_check(&format!("G_add at {}", b.res), &add.shape(), &x.shape())?;
                x = inject(x, *mult, *add);
            }
            let rgb = b.to_rgb.0.forward(p, x, style_row(w, b.to_rgb.1));
            img = Some(match img {
                Some(prev) => prev.upsample2().add(rgb),
                None => rgb,
            });
        }
        Ok(Synthesis { image: img.expect("at least one block").tanh(), features })
    }

    /// Tensor-level mapping: `[N, z_dim]` to `[N, S, w_dim]`.
    pub fn map(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        check_batch("z", z, &[self.cfg.z_dim])?;
        let g = Graph::new();
        let p = Bound::frozen(&g, &self.store);
        Ok((*self.broadcast(self.map_w(&p, g.constant(z.clone()))).value()).clone())
    }

    /// Tensor-level synthesis without skips.
    pub fn generate(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = Bound::frozen(&g, &self.store);
        Ok((*self.synthesize(&p, g.constant(w.clone()), None)?.image.value()).clone())
    }

    pub fn w_avg(&self) -> &Tensor<T> {
        self.store.get(self.w_avg)
    }
}

/// Residual discriminator producing one logit per image.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    from_rgb: Conv,
    blocks: Vec<(Conv, Conv, Conv)>,
    final_conv: Conv,
    fc: Linear,
    out: Linear,
}

impl<T: Real> Discriminator<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mut root = store.root();
        let ch = &cfg.disc_channels;
        let top = ch.len() - 1;
        let from_rgb = Conv::new(&mut root.sub("from_rgb"), 3, ch[top], 1, Init::EQ, true, rng);
        let mut blocks = Vec::new();
        for k in (1..=top).rev() {
            let mut bp = root.sub(format!("b{}", 4 << k));
            let (cin, cout) = (ch[k], ch[k - 1]);
            blocks.push((
                Conv::new(&mut bp.sub("conv0"), cin, cin, 3, Init::EQ, true, rng),
                Conv::new(&mut bp.sub("conv1"), cin, cout, 3, Init::EQ, true, rng),
                Conv::new(&mut bp.sub("skip"), cin, cout, 1, Init::EQ, false, rng),
            ));
        }
        let c4 = ch[0];
        let final_conv = Conv::new(&mut root.sub("final_conv"), c4, c4, 3, Init::EQ, true, rng);
        let fc = Linear::new(&mut root.sub("fc"), c4 * 16, c4, Init::EQ, Some(0.0), rng);
        let out = Linear::new(&mut root.sub("out"), c4, 1, Init::EQ, Some(0.0), rng);
        Self { cfg: cfg.clone(), store, from_rgb, blocks, final_conv, fc, out }
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            from_rgb: self.from_rgb.clone(),
            blocks: self.blocks.clone(),
            final_conv: self.final_conv.clone(),
            fc: self.fc.clone(),
            out: self.out.clone(),
        }
    }

    /// `[N, 3, R, R]` images to `[N]` logits.
    pub fn forward<'g>(&self, p: &Bound<'g, '_, T>, img: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = img.shape();
        let r = self.cfg.resolution;
        if s.len() != 4 {
            return Err(Error::Dimension(format!("discriminator input must be [N, 3, H, W], got {s:?}")));
        }
        dim_check("discriminator input", &s[1..], &[3, r, r])?;
        let n = s[0];
        let mut x = lrelu(self.from_rgb.forward(p, img));
        let half = std::f64::consts::FRAC_1_SQRT_2;
        for (c0, c1, skip) in &self.blocks {
            let y = lrelu(c1.forward(p, lrelu(c0.forward(p, x)))).avg_pool2();
            let sk = skip.forward(p, x.avg_pool2());
            x = y.add(sk).scale(half);
        }
        let x = lrelu(self.final_conv.forward(p, x));
        let x = lrelu(self.fc.forward(p, x.reshape(&[n, self.cfg.disc_channels[0] * 16])));
        Ok(self.out.forward(p, x).reshape(&[n]))
    }

    pub fn discriminate(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = Bound::frozen(&g, &self.store);
        Ok((*self.forward(&p, g.constant(img.clone()))?.value()).clone())
    }
}

fn check_batch<T: Real>(what: &str, t: &Tensor<T>, tail: &[usize]) -> Result<()> {
    if t.rank() != tail.len() + 1 || &t.shape()[1..] != tail {
        return Err(Error::Dimension(format!("{what}: expected [N, {tail:?}], got {:?}", t.shape())));
    }
    Ok(())
}

/// Standard-normal latents, `[n, z_dim]`.
pub fn sample_z<T: Real, R: Rng>(n: usize, z_dim: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(&[n, z_dim], 1.0, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Generator<f32>, Discriminator<f32>) {
        let cfg = ModelConfig::profile(Profile::Tiny);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (Generator::new(&cfg, &mut rng), Discriminator::new(&cfg, &mut rng))
    }

    #[test]
    fn mapping_broadcasts_identical_rows() {
        let (g, _) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = sample_z::<f32, _>(2, g.cfg.z_dim, &mut rng);
        let w = g.map(&z).unwrap();
        assert_eq!(w.shape(), &[2, g.n_styles(), g.cfg.w_dim]);
        let d = g.cfg.w_dim;
        for n in 0..2 {
            let rows: Vec<&[f32]> = (0..g.n_styles()).map(|i| &w.data()[(n * g.n_styles() + i) * d..][..d]).collect();
            assert!(rows.iter().all(|r| *r == rows[0]));
        }
        assert_eq!(w, g.map(&z).unwrap());
        let zero = g.map(&Tensor::zeros(&[1, g.cfg.z_dim])).unwrap();
        assert!(zero.all_finite());
        assert!(matches!(g.map(&Tensor::zeros(&[1, g.cfg.z_dim + 1])), Err(Error::Dimension(_))));
    }

    #[test]
    fn synthesis_shape_and_range() {
        let (g, d) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = g.map(&sample_z(3, g.cfg.z_dim, &mut rng)).unwrap();
        let img = g.generate(&w).unwrap();
        assert_eq!(img.shape(), &[3, 3, 32, 32]);
        assert!(img.data().iter().all(|v| v.abs() <= 1.0));
        let logits = d.discriminate(&img).unwrap();
        assert_eq!(logits.shape(), &[3]);
        assert_eq!(logits, d.discriminate(&img).unwrap());
        assert!(matches!(d.discriminate(&Tensor::zeros(&[1, 3, 16, 16])), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_skips_are_bit_identical() {
        let (g, _) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = g.map(&sample_z(2, g.cfg.z_dim, &mut rng)).unwrap();
        let graph = Graph::new();
        let p = Bound::frozen(&graph, &g.store);
        let wv = graph.constant(w);
        let plain = g.synthesize(&p, wv, None).unwrap();
        let mut skips = SkipVars::new();
        for r in g.cfg.injection_resolutions() {
            let shape = plain.features[&r].shape();
            skips.insert(r, (graph.constant(Tensor::zeros(&shape)), graph.constant(Tensor::zeros(&shape))));
        }
        let injected = g.synthesize(&p, wv, Some(&skips)).unwrap();
        assert_eq!(*plain.image.value(), *injected.image.value());
    }

    #[test]
    fn skips_at_unknown_resolution_rejected() {
        let (g, _) = tiny();
        let graph = Graph::new();
        let p = Bound::frozen(&graph, &g.store);
        let w = graph.constant(Tensor::zeros(&[1, g.n_styles(), g.cfg.w_dim]));
        let mut skips = SkipVars::new();
        let t = graph.constant(Tensor::zeros(&[1, 4, 32, 32]));
        skips.insert(32, (t, t));
        assert!(matches!(g.synthesize(&p, w, Some(&skips)), Err(Error::Dimension(_))));
    }

    #[test]
    fn inject_rule_scalar() {
        let graph = Graph::<f64>::new();
        let c = |v: f64| graph.constant(Tensor::scalar(v));
        assert_eq!(inject(c(3.0), c(0.5), c(-1.0)).item(), 3.5);
        assert_eq!(inject(c(3.0), c(1.0), c(0.0)).item(), 6.0);
        assert_eq!(inject(c(3.0), c(0.0), c(0.0)).item(), 3.0);
    }
}
