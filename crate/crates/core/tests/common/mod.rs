//! Double-precision finite-difference checks of the training losses, shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code)]

use gatefill_core::config::{LossWeights, ModelConfig, Profile};
use gatefill_core::masking::{compose_batch, compose_var, mask_batch, sample_masks};
use gatefill_core::model::Model;
use gatefill_core::objectives::{adv_d_var, adv_g_var, loss_rg_var, loss_rr_var, total_var};
use gatefill_core::nn::StatUpdates;
use gatefill_core::stylegan::sample_z;
use gatefill_core::MaskBand;
use gatefill_tensor::{Bound, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const COORDS: usize = 16;

#[derive(Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub coords: usize,
}

pub struct Fixture {
    pub model: Model<f64>,
    pub images: Tensor<f64>,
    pub masks: Tensor<f64>,
    pub erased: Tensor<f64>,
    /// `[path a; path b]` random codes.
    pub w_rand: Tensor<f64>,
    pub b: usize,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let cfg = ModelConfig::profile(Profile::Tiny);
        let model = Model::<f32>::new(&cfg, true, seed).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 2;
        let z_g = sample_z(b, cfg.z_dim, &mut rng);
        let z_r = sample_z(b, cfg.z_dim, &mut rng);
        let images = model.gen.generate(&model.gen.map(&z_g).unwrap()).unwrap();
        let masks = mask_batch(&sample_masks(MaskBand::new(0.2, 0.6).unwrap(), cfg.resolution, b, &mut rng).unwrap()).unwrap();
        let erased = model.erase(&images, &masks).unwrap();
        let w_rand = Tensor::cat0(&[model.gen.map(&z_g).unwrap(), model.gen.map(&z_r).unwrap()]).unwrap();
        Self { model, images, masks, erased, w_rand, b }
    }

    fn twice(&self, t: &Tensor<f64>) -> Tensor<f64> {
        Tensor::cat0(&[t.clone(), t.clone()]).unwrap()
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs().max(n.abs()) + 1e-12)
}

/// Coordinates whose analytic gradient is not negligible next to the largest one; tiny
/// components are below what a central difference can resolve.
fn pick(grads: &[Option<Tensor<f64>>], rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let top = grads.iter().flatten().map(|g| g.max_abs()).fold(0.0, f64::max);
    let cands: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
        .flat_map(|(i, g)| g.data().iter().enumerate().filter(move |(_, v)| v.abs() > 1e-3 * top).map(move |(j, _)| (i, j)))
        .collect();
    assert!(!cands.is_empty(), "no usable gradient");
    (0..COORDS).map(|_| cands[rng.gen_range(0..cands.len())]).collect()
}

/// Checks the gradient of `f` with respect to the parameters in `store(model)`.
fn check_store(
    name: &'static str,
    model: &mut Model<f64>,
    store: fn(&mut Model<f64>) -> &mut ParamStore<f64>,
    f: &dyn Fn(&Model<f64>, bool) -> (f64, Vec<Option<Tensor<f64>>>),
) -> GradCheck {
    let (_, grads) = f(model, true);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let coords = pick(&grads, &mut rng);
    for &(pi, j) in &coords {
        let id = store(model).ids().nth(pi).unwrap();
        let orig = store(model).get(id).clone();
        let mut shifted = |d: f64| {
            let mut t = orig.clone();
            t.data_mut()[j] += d;
            store(model).set(id, t).unwrap();
            let v = f(model, false).0;
            store(model).set(id, orig.clone()).unwrap();
            v
        };
        let numeric = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
        worst = worst.max(rel_err(grads[pi].as_ref().unwrap().data()[j], numeric));
    }
    GradCheck { name, max_rel_err: worst, coords: coords.len() }
}

/// Checks the gradient of `f` with respect to a single input tensor.
fn check_input(name: &'static str, x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>, bool) -> (f64, Option<Tensor<f64>>)) -> GradCheck {
    let grad = f(x, true).1.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let coords = pick(&[Some(grad.clone())], &mut rng);
    let mut worst: f64 = 0.0;
    for &(_, j) in &coords {
        let at = |d: f64| {
            let mut t = x.clone();
            t.data_mut()[j] += d;
            f(&t, false).0
        };
        let numeric = (at(STEP) - at(-STEP)) / (2.0 * STEP);
        worst = worst.max(rel_err(grad.data()[j], numeric));
    }
    GradCheck { name, max_rel_err: worst, coords: coords.len() }
}

fn input_grad(g: &Graph<f64>, x: Var<'_, f64>, loss: Var<'_, f64>, want: bool) -> (f64, Option<Tensor<f64>>) {
    let _ = g;
    let v = loss.item();
    (v, want.then(|| loss.backward().get_or_zeros(x)))
}

/// Stage-1 objective over both paths, as trained.
fn stage1_total(fx: &Fixture, m: &Model<f64>, w: &LossWeights, want: bool) -> (f64, Vec<Option<Tensor<f64>>>) {
    let b = fx.b;
    let g = Graph::new();
    let pe = if want { Bound::trainable(&g, &m.enc.store) } else { Bound::frozen(&g, &m.enc.store) };
    let pm = if want { Bound::trainable(&g, &m.mixer.store) } else { Bound::frozen(&g, &m.mixer.store) };
    let pg = Bound::frozen(&g, &m.gen.store);
    let pd = Bound::frozen(&g, &m.disc.store);
    let pf = Bound::frozen(&g, &m.feat.store);
    let w_enc = m.enc.forward(&pe, g.constant(fx.erased.clone()), g.constant(fx.masks.clone()), m.gen.w_avg()).unwrap();
    let w_out = m.mixer.forward(&pm, Var::cat(&[w_enc, w_enc], 0), g.constant(fx.w_rand.clone())).unwrap().w_out;
    let out = m.gen.synthesize(&pg, w_out, None).unwrap().image;
    let rg = loss_rg_var(&m.feat, &pf, out.narrow(0, 0, b), g.constant(fx.images.clone()), w);
    let rr = loss_rr_var(&m.feat, &pf, out.narrow(0, b, b), g.constant(fx.erased.clone()), &fx.masks, w);
    let comp = compose_var(g.constant(fx.twice(&fx.images)), &fx.twice(&fx.masks), out);
    let logits = m.disc.forward(&pd, comp).unwrap();
    let adv = adv_g_var(&[logits.narrow(0, 0, b)]).add(adv_g_var(&[logits.narrow(0, b, b)]));
    let total = total_var(Some(adv), Some(rg.total), Some(rr.total), w).unwrap();
    let v = total.item();
    if !want {
        return (v, Vec::new());
    }
    let grads = total.backward();
    let mut out = pe.grads(&grads);
    out.extend(pm.grads(&grads));
    (v, out)
}

/// Stage-2 objective with the skip encoder in training mode.
fn stage2_total(fx: &Fixture, m: &Model<f64>, w: &LossWeights, want: bool) -> (f64, Vec<Option<Tensor<f64>>>) {
    let b = fx.b;
    let w_enc = m.enc.encode(&fx.erased, &fx.masks, m.gen.w_avg()).unwrap();
    let w_out = m.mixer.mix(&fx.twice(&w_enc), &fx.w_rand).unwrap().w_out;
    let (images2, masks2) = (fx.twice(&fx.images), fx.twice(&fx.masks));
    let first = compose_batch(&images2, &masks2, &m.gen.generate(&w_out).unwrap()).unwrap();
    let g = Graph::new();
    let ps = if want { Bound::trainable(&g, &m.skip.store) } else { Bound::frozen(&g, &m.skip.store) };
    let pg = Bound::frozen(&g, &m.gen.store);
    let pd = Bound::frozen(&g, &m.disc.store);
    let pf = Bound::frozen(&g, &m.feat.store);
    let mut updates = StatUpdates::new();
    let skips = m
        .skip
        .forward(&ps, g.constant(first), g.constant(fx.twice(&fx.erased)), g.constant(masks2.clone()), Some(&mut updates))
        .unwrap();
    let out = m.gen.synthesize(&pg, g.constant(w_out), Some(&skips)).unwrap().image;
    let rg = loss_rg_var(&m.feat, &pf, out.narrow(0, 0, b), g.constant(fx.images.clone()), w);
    let rr = loss_rr_var(&m.feat, &pf, out.narrow(0, b, b), g.constant(fx.erased.clone()), &fx.masks, w);
    let comp = compose_var(g.constant(images2), &masks2, out);
    let adv = adv_g_var(&[m.disc.forward(&pd, comp).unwrap()]);
    let total = total_var(Some(adv), Some(rg.total), Some(rr.total), w).unwrap();
    let v = total.item();
    (v, if want { ps.grads(&total.backward()) } else { Vec::new() })
}

/// Every loss term and the full objective, in double precision.
pub fn gradient_suite() -> Vec<GradCheck> {
    let mut fx = Fixture::new(3);
    // a larger perceptual weight keeps both reconstruction parts visible in the gradient
    let w = LossWeights { perceptual: 0.5, ..LossWeights::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out0 = Tensor::<f64>::uniform(fx.images.shape(), -0.9, 0.9, &mut rng);
    let mut checks = Vec::new();

    let m = &fx.model;
    checks.push(check_input("L_rg (output image)", &out0, &|x, want| {
        let g = Graph::new();
        let pf = Bound::frozen(&g, &m.feat.store);
        let xv = g.input(x.clone());
        input_grad(&g, xv, loss_rg_var(&m.feat, &pf, xv, g.constant(fx.images.clone()), &w).total, want)
    }));
    checks.push(check_input("L_rr (output image)", &out0, &|x, want| {
        let g = Graph::new();
        let pf = Bound::frozen(&g, &m.feat.store);
        let xv = g.input(x.clone());
        input_grad(&g, xv, loss_rr_var(&m.feat, &pf, xv, g.constant(fx.erased.clone()), &fx.masks, &w).total, want)
    }));
    let fakes = Tensor::cat0(&[out0.clone(), fx.images.map(|v| 0.5 * v)]).unwrap();
    checks.push(check_input("adversarial, generator side (fakes)", &fakes, &|x, want| {
        let g = Graph::new();
        let pd = Bound::frozen(&g, &m.disc.store);
        let xv = g.input(x.clone());
        let l = m.disc.forward(&pd, xv).unwrap();
        input_grad(&g, xv, adv_g_var(&[l.narrow(0, 0, 2), l.narrow(0, 2, 2)]), want)
    }));
    let (images, fakes2) = (fx.images.clone(), fakes.clone());
    checks.push(check_store("adversarial, discriminator side (D weights)", &mut fx.model, |m| &mut m.disc.store, &|m, want| {
        let g = Graph::new();
        let pd = if want { Bound::trainable(&g, &m.disc.store) } else { Bound::frozen(&g, &m.disc.store) };
        let real = m.disc.forward(&pd, g.constant(images.clone())).unwrap();
        let fake = m.disc.forward(&pd, g.constant(fakes2.clone())).unwrap();
        let loss = adv_d_var(real, &[fake.narrow(0, 0, 2), fake.narrow(0, 2, 2)]);
        let v = loss.item();
        (v, if want { pd.grads(&loss.backward()) } else { Vec::new() })
    }));

    // the full objective, through encoder and mixer, then through the skip encoder
    let snapshot = Fixture::new(3);
    let n_enc = snapshot.model.enc.store.len();
    let enc_check = check_store("full objective, stage 1 (encoder weights)", &mut fx.model, |m| &mut m.enc.store, &|m, want| {
        let (v, g) = stage1_total(&snapshot, m, &w, want);
        (v, g.into_iter().take(n_enc).collect())
    });
    checks.push(enc_check);
    checks.push(check_store("full objective, stage 1 (mixer weights)", &mut fx.model, |m| &mut m.mixer.store, &|m, want| {
        let (v, g) = stage1_total(&snapshot, m, &w, want);
        (v, g.into_iter().skip(n_enc).collect())
    }));
    checks.push(check_store("full objective, stage 2 (skip weights)", &mut fx.model, |m| &mut m.skip.store, &|m, want| {
        stage2_total(&snapshot, m, &w, want)
    }));
    checks
}
