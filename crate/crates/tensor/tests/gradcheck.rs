//! Central-difference checks of every differentiable op, in double precision.

use gatefill_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type F = for<'g> fn(&[Var<'g, f64>]) -> Var<'g, f64>;

fn check(name: &str, inputs: &[Tensor<f64>], f: F) {
    // project the output on a fixed random direction so every output element matters
    let probe = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let shape = f(&vars).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        Tensor::<f64>::randn(&shape, 1.0, &mut rng)
    };
    let scalar = |ins: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = ins.iter().map(|t| g.constant(t.clone())).collect();
        f(&vars).mul_tensor(&probe).sum_all().item()
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let grads = f(&vars).mul_tensor(&probe).sum_all().backward();
    let h = 1e-5;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (scalar(&plus) - scalar(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-2));
            assert!(err < 1e-6, "{name}: input {k} elem {i}: analytic {a} numeric {numeric}");
        }
    }
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    rnd(shape, seed).map(|x| x.abs() + 0.5)
}

#[test]
fn elementwise_binary_with_broadcast() {
    let a = rnd(&[2, 3, 2, 2], 1);
    let b = rnd(&[2, 3, 1, 1], 2);
    check("add", &[a.clone(), b.clone()], |v| v[0].add(v[1]));
    check("sub", &[a.clone(), b.clone()], |v| v[0].sub(v[1]));
    check("mul", &[a.clone(), b.clone()], |v| v[0].mul(v[1]));
    check("div", &[a.clone(), positive(&[2, 3, 1, 1], 3)], |v| v[0].div(v[1]));
    check("mul rev", &[b.clone(), a.clone()], |v| v[0].mul(v[1]));
}

#[test]
fn unary_ops() {
    let a = rnd(&[3, 4], 5);
    check("scale", &[a.clone()], |v| v[0].scale(-2.5).add_scalar(1.0));
    check("sqr", &[a.clone()], |v| v[0].sqr());
    check("sigmoid", &[a.clone()], |v| v[0].sigmoid());
    check("tanh", &[a.clone()], |v| v[0].tanh());
    check("softplus", &[a.clone()], |v| v[0].softplus());
    check("exp", &[a.clone()], |v| v[0].exp());
    check("leaky", &[a.clone()], |v| v[0].leaky_relu(0.2));
    let p = positive(&[3, 4], 6);
    check("ln", &[p.clone()], |v| v[0].ln());
    check("sqrt", &[p.clone()], |v| v[0].sqrt());
    check("powf", &[p], |v| v[0].powf(-0.5));
}

#[test]
fn matmul_and_shapes() {
    check("matmul", &[rnd(&[3, 4], 7), rnd(&[4, 5], 8)], |v| v[0].matmul(v[1]));
    check("transpose", &[rnd(&[2, 3], 27)], |v| v[0].t().matmul(v[0]));
    check("reshape", &[rnd(&[2, 6], 9)], |v| v[0].reshape(&[3, 4]).sqr());
    check("expand", &[rnd(&[2, 1, 3], 10)], |v| v[0].expand(&[2, 4, 3]).sqr());
    check("sum_axes", &[rnd(&[2, 3, 4], 11)], |v| v[0].sum_axes(&[0, 2]).sqr());
    check("mean_axes", &[rnd(&[2, 3, 4], 12)], |v| v[0].mean_axes(&[1]).sqr());
    check("mean_all", &[rnd(&[2, 3], 13)], |v| v[0].sqr().mean_all());
    check("cat", &[rnd(&[2, 2, 3], 14), rnd(&[2, 1, 3], 15)], |v| Var::cat(&[v[0], v[1], v[0]], 1).sqr());
    check("narrow", &[rnd(&[2, 5, 3], 16)], |v| v[0].narrow(1, 1, 3).sqr());
}

#[test]
fn convolution_and_resampling() {
    check("conv3x3", &[rnd(&[2, 3, 5, 4], 17), rnd(&[4, 3, 3, 3], 18)], |v| v[0].conv2d(v[1], 1));
    check("conv1x1", &[rnd(&[2, 3, 4, 4], 19), rnd(&[2, 3, 1, 1], 20)], |v| v[0].conv2d(v[1], 0));
    check("conv valid", &[rnd(&[1, 2, 5, 5], 21), rnd(&[2, 2, 3, 3], 22)], |v| v[0].conv2d(v[1], 0));
    check("avg_pool", &[rnd(&[2, 2, 4, 4], 23)], |v| v[0].avg_pool2());
    check("max_pool", &[rnd(&[2, 2, 4, 4], 24)], |v| v[0].max_pool2());
    check("upsample", &[rnd(&[2, 2, 2, 3], 25)], |v| v[0].upsample2());
}

#[test]
fn shared_subexpressions_accumulate() {
    check("reuse", &[rnd(&[3], 26)], |v| v[0].mul(v[0]).add(v[0].sigmoid()));
}

#[test]
fn detached_paths_receive_no_gradient() {
    let g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let y = x.detach().mul(x).sum_all();
    let grads = y.backward();
    // d/dx (c * x) with c = x held constant
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
}
