//! Gated mixing of encoded and random style codes.

use gatefill_tensor::{Bound, Graph, ParamStore, Real, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{dim_check, Error, Result};
use crate::nn::{leaky, style_row, Init, Linear};

/// `sigma(g) * w_comb + (1 - sigma(g)) * w_rand`, elementwise.
pub fn combine<T: Real>(w_comb: &Tensor<T>, w_rand: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    dim_check("w_rand", w_rand.shape(), w_comb.shape())?;
    dim_check("gate", g.shape(), w_comb.shape())?;
    let data = w_comb
        .data()
        .iter()
        .zip(w_rand.data())
        .zip(g.data())
        .map(|((&c, &r), &g)| {
            let s = gatefill_tensor::sigmoid(g);
            let v = s * c + (T::one() - s) * r;
            // rounding may step one ulp outside the segment
            v.max(c.min(r)).min(c.max(r))
        })
        .collect();
    Ok(Tensor::from_vec(w_comb.shape(), data)?)
}

/// In-graph version of [`combine`].
pub fn combine_var<'g, T: Real>(w_comb: Var<'g, T>, w_rand: Var<'g, T>, g: Var<'g, T>) -> Var<'g, T> {
    let s = g.sigmoid();
    s.mul(w_comb).add(s.rsub_scalar(1.0).mul(w_rand))
}

pub struct MixerVars<'g, T> {
    pub w_out: Var<'g, T>,
    pub w_comb: Var<'g, T>,
    pub gate: Option<Var<'g, T>>,
}

/// Tensor results of one mixer pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerOutput<T> {
    pub w_out: Tensor<T>,
    pub w_comb: Tensor<T>,
    /// Gate logits; absent for the ungated variant.
    pub gate: Option<Tensor<T>>,
}

/// One two-layer network per style row over the concatenated `(w_enc_i, w_rand_i)`.
///
/// The gated variant splits the `2 * w_dim` output into a residual for `w_comb` and the
/// gate logits. The plain variant emits a residual on top of the average of both codes.
#[derive(Clone, Debug)]
pub struct Mixer<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub gated: bool,
    nets: Vec<(Linear, Linear)>,
}

impl<T: Real> Mixer<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, gated: bool, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mut root = store.root();
        let d = cfg.w_dim;
        let out = if gated { 2 * d } else { d };
        let nets = (0..cfg.n_styles())
            .map(|i| {
                let mut p = root.sub(format!("style{i}"));
                (
                    Linear::new(&mut p.sub("fc0"), 2 * d, 2 * d, Init::HE, Some(0.0), rng),
                    Linear::new(&mut p.sub("fc1"), 2 * d, out, Init::Zeros, Some(0.0), rng),
                )
            })
            .collect();
        Self { cfg: cfg.clone(), store, gated, nets }
    }

    pub fn cast<U: Real>(&self) -> Mixer<U> {
        Mixer { cfg: self.cfg.clone(), store: self.store.cast(), gated: self.gated, nets: self.nets.clone() }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_, T>, w_enc: Var<'g, T>, w_rand: Var<'g, T>) -> Result<MixerVars<'g, T>> {
        let s = w_enc.shape();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("style code must be [N, S, D], got {s:?}")));
        }
        dim_check("w_enc", &s[1..], &[self.cfg.n_styles(), self.cfg.w_dim])?;
        dim_check("w_rand", &w_rand.shape(), &s)?;
        let (n, d) = (s[0], self.cfg.w_dim);
        let mut residual = Vec::with_capacity(self.nets.len());
        let mut gates = Vec::with_capacity(self.nets.len());
        for (i, (fc0, fc1)) in self.nets.iter().enumerate() {
            let x = Var::cat(&[style_row(w_enc, i), style_row(w_rand, i)], 1);
            let y = fc1.forward(p, leaky(fc0.forward(p, x)));
            if self.gated {
                residual.push(y.narrow(1, 0, d).reshape(&[n, 1, d]));
                gates.push(y.narrow(1, d, d).reshape(&[n, 1, d]));
            } else {
                residual.push(y.reshape(&[n, 1, d]));
            }
        }
        let delta = Var::cat(&residual, 1);
        if self.gated {
            let w_comb = w_enc.add(delta);
            let gate = Var::cat(&gates, 1);
            Ok(MixerVars { w_out: combine_var(w_comb, w_rand, gate), w_comb, gate: Some(gate) })
        } else {
            let w_comb = w_enc.add(w_rand).scale(0.5).add(delta);
            Ok(MixerVars { w_out: w_comb, w_comb, gate: None })
        }
    }

    pub fn mix(&self, w_enc: &Tensor<T>, w_rand: &Tensor<T>) -> Result<MixerOutput<T>> {
        let g = Graph::new();
        let p = Bound::frozen(&g, &self.store);
        let out = self.forward(&p, g.constant(w_enc.clone()), g.constant(w_rand.clone()))?;
        Ok(MixerOutput {
            w_out: (*out.w_out.value()).clone(),
            w_comb: (*out.w_comb.value()).clone(),
            gate: out.gate.map(|g| (*g.value()).clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn combine_hand_values() {
        assert!((combine(&s(2.0), &s(0.0), &s(3f64.ln())).unwrap().item() - 1.5).abs() < 1e-15);
        assert_eq!(combine(&s(2.0), &s(4.0), &s(0.0)).unwrap().item(), 3.0);
        assert!((combine(&s(2.0), &s(4.0), &s(40.0)).unwrap().item() - 2.0).abs() < 1e-12);
        assert!((combine(&s(2.0), &s(4.0), &s(-40.0)).unwrap().item() - 4.0).abs() < 1e-12);
        assert!(combine(&Tensor::<f64>::zeros(&[2]), &Tensor::zeros(&[3]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn mixer_output_matches_external_combine() {
        let cfg = ModelConfig::profile(Profile::Tiny);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mixer = Mixer::<f64>::new(&cfg, true, &mut rng);
        // perturb the zero-initialized output layer so the check is not vacuous
        let ids: Vec<_> = mixer.store.ids().collect();
        for id in ids {
            let t = Tensor::randn(mixer.store.get(id).shape(), 0.3, &mut rng);
            mixer.store.set(id, t).unwrap();
        }
        let shape = [2, cfg.n_styles(), cfg.w_dim];
        let we = Tensor::randn(&shape, 1.0, &mut rng);
        let wr = Tensor::randn(&shape, 1.0, &mut rng);
        let out = mixer.mix(&we, &wr).unwrap();
        assert_eq!(out.w_out.shape(), &shape);
        let again = combine(&out.w_comb, &wr, out.gate.as_ref().unwrap()).unwrap();
        assert!(out.w_out.max_abs_diff(&again) < 1e-12);
        let same = mixer.mix(&we, &we).unwrap();
        assert!(same.w_out.all_finite());
        assert!(out.w_out.max_abs_diff(&mixer.mix(&we, &we).unwrap().w_out) > 0.0);
    }

    #[test]
    fn plain_variant_has_no_gate() {
        let cfg = ModelConfig::profile(Profile::Tiny);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mixer = Mixer::<f32>::new(&cfg, false, &mut rng);
        let shape = [1, cfg.n_styles(), cfg.w_dim];
        let out = mixer.mix(&Tensor::ones(&shape), &Tensor::zeros(&shape)).unwrap();
        assert!(out.gate.is_none());
        assert!(out.w_out.data().iter().all(|&v| v == 0.5));
    }
}
