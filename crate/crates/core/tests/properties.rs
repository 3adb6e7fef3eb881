use gatefill_core::config::{LossWeights, ModelConfig, Profile};
use gatefill_core::editing::{apply_edit, DirectionVector, Scope};
use gatefill_core::features::FeatureNet;
use gatefill_core::masking::{compose_final, erase, mask_batch};
use gatefill_core::mixer::combine;
use gatefill_core::objectives::loss_rr;
use gatefill_core::BinaryMask;
use gatefill_tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const S: usize = 8;

fn image() -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-1.0f64..1.0, 3 * S * S).prop_map(|v| Tensor::from_vec(&[3, S, S], v).unwrap())
}

fn mask() -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(0u8..2, S * S).prop_map(|b| BinaryMask::from_bits(S, S, b).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_keeps_valid_pixels_and_fills_holes(i in image(), g in image(), m in mask()) {
        let out = compose_final(&i, &m, &g).unwrap();
        for c in 0..3 {
            for y in 0..S {
                for x in 0..S {
                    let k = (c * S + y) * S + x;
                    let want = if m.is_valid(y, x) { i.data()[k] } else { g.data()[k] };
                    prop_assert_eq!(out.data()[k].to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn gate_output_stays_between_its_inputs(
        c in prop::collection::vec(-50.0f64..50.0, 16),
        r in prop::collection::vec(-50.0f64..50.0, 16),
        g in prop::collection::vec(-60.0f64..60.0, 16),
    ) {
        let t = |v: Vec<f64>| Tensor::from_vec(&[1, 2, 8], v).unwrap();
        let out = combine(&t(c.clone()), &t(r.clone()), &t(g)).unwrap();
        for ((o, a), b) in out.data().iter().zip(&c).zip(&r) {
            prop_assert!(*o >= a.min(*b) && *o <= a.max(*b));
        }
    }

    #[test]
    fn edits_are_additive_and_reversible(
        w in prop::collection::vec(-3.0f64..3.0, 2 * 4 * 6),
        d in prop::collection::vec(-1.0f64..1.0, 6),
        s in -5.0f64..5.0,
        t in -5.0f64..5.0,
    ) {
        prop_assume!(d.iter().any(|v| v.abs() > 1e-3));
        let dir = DirectionVector::new("x", d, Scope::AllStyles).unwrap();
        let w = Tensor::from_vec(&[2, 4, 6], w).unwrap();
        prop_assert!(apply_edit(&w, &dir, 0.0).unwrap().max_abs_diff(&w) == 0.0);
        let two = apply_edit(&apply_edit(&w, &dir, s).unwrap(), &dir, t).unwrap();
        prop_assert!(two.max_abs_diff(&apply_edit(&w, &dir, s + t).unwrap()) < 1e-12);
        let back = apply_edit(&apply_edit(&w, &dir, s).unwrap(), &dir, -s).unwrap();
        prop_assert!(back.max_abs_diff(&w) < 1e-12);
    }
}

#[test]
fn region_loss_ignores_generated_pixels_in_the_hole() {
    let cfg = ModelConfig::profile(Profile::Tiny);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let phi = FeatureNet::<f32>::new(&cfg, &mut rng).cast::<f64>();
    let r = cfg.resolution;
    let w = LossWeights::default();
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits = (0..r * r).map(|i| u8::from((i / r + seed as usize) % 3 != 0)).collect();
        let m = BinaryMask::from_bits(r, r, bits).unwrap();
        let img = Tensor::<f64>::uniform(&[3, r, r], -1.0, 1.0, &mut rng);
        let out = Tensor::<f64>::uniform(&[1, 3, r, r], -1.0, 1.0, &mut rng);
        let masks = mask_batch::<f64>(std::slice::from_ref(&m)).unwrap();
        let erased = erase(&img, &m).unwrap().reshape(&[1, 3, r, r]).unwrap();
        let base = loss_rr(&phi, &out, &erased, &masks, &w).unwrap();
        // rewrite every generated pixel inside the hole
        let noise = Tensor::<f64>::uniform(&[3, r, r], -1.0, 1.0, &mut rng);
        let out3 = out.clone().reshape(&[3, r, r]).unwrap();
        let out2 = compose_final(&out3, &m, &noise).unwrap().reshape(&[1, 3, r, r]).unwrap();
        assert!(out2.max_abs_diff(&out) > 0.1);
        let again = loss_rr(&phi, &out2, &erased, &masks, &w).unwrap();
        assert!((base - again).abs() <= 1e-12 * base.abs().max(1.0), "{base} vs {again}");
    }
}
