//! Reconstruction, perceptual and adversarial losses and the weighted objective.

use gatefill_tensor::{softplus, Bound, Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::error::{dim_check, Error, Result};
use crate::features::FeatureTaps;

/// Sum over tap layers of the mean squared feature difference.
pub fn perceptual_var<'g, T: Real, F: FeatureTaps<T>>(phi: &F, p: &Bound<'g, '_, T>, a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    let ta = phi.taps(p, a);
    let tb = phi.taps(p, b);
    let mut terms = ta.into_iter().zip(tb).map(|(x, y)| x.sub(y).sqr().mean_all());
    let first = terms.next().expect("at least one tap");
    terms.fold(first, |acc, t| acc.add(t))
}

pub fn mse_var<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    a.sub(b).sqr().mean_all()
}

/// Pixel and perceptual parts of a reconstruction loss.
pub struct ReconVars<'g, T> {
    pub total: Var<'g, T>,
    pub pixel: Var<'g, T>,
    pub perceptual: Var<'g, T>,
}

/// Full-image reconstruction: `pixel * MSE + perceptual * d_phi`.
pub fn loss_rg_var<'g, T: Real, F: FeatureTaps<T>>(
    phi: &F,
    p: &Bound<'g, '_, T>,
    out: Var<'g, T>,
    target: Var<'g, T>,
    w: &LossWeights,
) -> ReconVars<'g, T> {
    let pixel = mse_var(out, target);
    let perceptual = perceptual_var(phi, p, out, target);
    let total = pixel.scale(w.pixel).add(perceptual.scale(w.perceptual));
    ReconVars { total, pixel, perceptual }
}

/// Valid-pixel reconstruction: the mask is applied to `out` before both terms.
pub fn loss_rr_var<'g, T: Real, F: FeatureTaps<T>>(
    phi: &F,
    p: &Bound<'g, '_, T>,
    out: Var<'g, T>,
    erased: Var<'g, T>,
    masks: &Tensor<T>,
    w: &LossWeights,
) -> ReconVars<'g, T> {
    loss_rg_var(phi, p, out.mul_tensor(masks), erased, w)
}

/// Discriminator side, to be minimized: the negated adversarial value
/// `2 log D(real) + sum log(1 - D(fake))`, averaged over the batch.
pub fn adv_d_var<'g, T: Real>(real: Var<'g, T>, fakes: &[Var<'g, T>]) -> Var<'g, T> {
    let mut loss = real.neg().softplus().mean_all().scale(2.0);
    for f in fakes {
        loss = loss.add(f.softplus().mean_all());
    }
    loss
}

/// Generator side, to be minimized: `sum log(1 - D(fake)) = -sum softplus(logit)`.
pub fn adv_g_var<'g, T: Real>(fakes: &[Var<'g, T>]) -> Var<'g, T> {
    let mut terms = fakes.iter().map(|f| f.softplus().mean_all().neg());
    let first = terms.next().expect("at least one fake");
    terms.fold(first, |acc, t| acc.add(t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Discriminator,
    Generator,
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} is not finite ({v})")))
    }
}

/// The adversarial value itself, `2 log D(real) + log(1 - D(fake_g)) + log(1 - D(fake_r))`.
pub fn adversarial_value(d_real: f64, d_fake_g: f64, d_fake_r: f64) -> Result<f64> {
    for (n, v) in [("real logit", d_real), ("fake logit", d_fake_g), ("fake logit", d_fake_r)] {
        finite(n, v)?;
    }
    Ok(-2.0 * softplus(-d_real) - softplus(d_fake_g) - softplus(d_fake_r))
}

/// Per-side loss on three logits: the discriminator minimizes the negated value,
/// the generator minimizes the two fake terms.
pub fn loss_adv(d_real: f64, d_fake_g: f64, d_fake_r: f64, side: Side) -> Result<f64> {
    let value = adversarial_value(d_real, d_fake_g, d_fake_r)?;
    Ok(match side {
        Side::Discriminator => -value,
        Side::Generator => -softplus(d_fake_g) - softplus(d_fake_r),
    })
}

/// Per-step loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rg: f64,
    pub l_rr: f64,
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    pub total: f64,
    pub rg_pixel: f64,
    pub rg_perceptual: f64,
    pub rr_pixel: f64,
    pub rr_perceptual: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_rg, self.l_rr, self.l_adv_d, self.l_adv_g, self.total].iter().all(|v| v.is_finite())
    }
}

/// `adv * l_adv + rg * l_rg + rr * l_rr`.
pub fn total_objective(l_adv: f64, l_rg: f64, l_rr: f64, w: &LossWeights) -> Result<f64> {
    finite("total objective", w.adv * l_adv + w.rg * l_rg + w.rr * l_rr)
}

pub fn total_var<'g, T: Real>(l_adv: Option<Var<'g, T>>, l_rg: Option<Var<'g, T>>, l_rr: Option<Var<'g, T>>, w: &LossWeights) -> Option<Var<'g, T>> {
    [(l_adv, w.adv), (l_rg, w.rg), (l_rr, w.rr)]
        .into_iter()
        .filter_map(|(v, c)| v.map(|v| v.scale(c)))
        .reduce(|a, b| a.add(b))
}

/// Tensor-level perceptual distance between equally shaped images or batches.
pub fn perceptual_distance<T: Real, F: FeatureTaps<T>>(phi: &F, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    dim_check("perceptual distance operand", b.shape(), a.shape())?;
    let g = Graph::new();
    let p = Bound::frozen(&g, phi.store());
    let (a, b) = (batched(a)?, batched(b)?);
    finite("perceptual distance", perceptual_var(phi, &p, g.constant(a), g.constant(b)).item().f64())
}

pub fn loss_rg<T: Real, F: FeatureTaps<T>>(phi: &F, out: &Tensor<T>, target: &Tensor<T>, w: &LossWeights) -> Result<f64> {
    dim_check("reconstruction target", target.shape(), out.shape())?;
    let g = Graph::new();
    let p = Bound::frozen(&g, phi.store());
    let l = loss_rg_var(phi, &p, g.constant(batched(out)?), g.constant(batched(target)?), w);
    finite("L_rg", l.total.item().f64())
}

pub fn loss_rr<T: Real, F: FeatureTaps<T>>(phi: &F, out: &Tensor<T>, erased: &Tensor<T>, masks: &Tensor<T>, w: &LossWeights) -> Result<f64> {
    dim_check("erased input", erased.shape(), out.shape())?;
    let out = batched(out)?;
    let masks = batched(masks)?;
    let s = out.shape();
    dim_check("mask", masks.shape(), &[s[0], 1, s[2], s[3]])?;
    let g = Graph::new();
    let p = Bound::frozen(&g, phi.store());
    let l = loss_rr_var(phi, &p, g.constant(out), g.constant(batched(erased)?), &masks, w);
    finite("L_rr", l.total.item().f64())
}

/// `[C, H, W]` becomes `[1, C, H, W]`; rank-4 passes through.
fn batched<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    match t.rank() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            Ok(t.clone().reshape(&s)?)
        }
        4 => Ok(t.clone()),
        _ => Err(Error::Dimension(format!("expected an image or image batch, got {:?}", t.shape()))),
    }
}
