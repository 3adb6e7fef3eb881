use gatefill_tensor::{Adam, Bound, Graph, ParamStore, Tensor};

#[test]
fn adam_minimizes_a_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let w = store.root().sub("q").weight("w", Tensor::from_f64(&[3], &[4.0, -2.0, 1.0]).unwrap());
    let target = Tensor::from_f64(&[3], &[1.0, 1.0, 1.0]).unwrap();
    let mut opt = Adam::new(0.9, 0.999);
    for _ in 0..2000 {
        let g = Graph::new();
        let p = Bound::trainable(&g, &store);
        let loss = p.var(w).sub(g.constant(target.clone())).sqr().sum_all();
        let grads = p.grads(&loss.backward());
        opt.step(&mut store, &grads, 0.05);
    }
    assert!(store.get(w).max_abs_diff(&target) < 1e-3, "{:?}", store.get(w));
}

#[test]
fn frozen_binding_produces_no_gradients() {
    let mut store = ParamStore::<f64>::new();
    let w = store.root().weight("w", Tensor::ones(&[2]));
    let b = store.root().buffer("b", Tensor::ones(&[2]));
    let g = Graph::new();
    let p = Bound::frozen(&g, &store);
    let x = g.input(Tensor::ones(&[2]));
    let y = p.var(w).mul(x).add(p.var(b)).sum_all();
    let grads = y.backward();
    assert!(p.grads(&grads).iter().all(|g| g.is_none()));
    assert!(grads.get(x).is_some());
    let t = Graph::new();
    let q = Bound::trainable(&t, &store);
    let y = q.var(w).mul(q.var(b)).sum_all();
    let grads = q.grads(&y.backward());
    assert!(grads[w.0].is_some() && grads[b.0].is_none(), "buffers never receive gradients");
}
