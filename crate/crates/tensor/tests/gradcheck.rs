//! Central-difference checks for every differentiable op.

use phs_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

/// Compares analytic and numerical gradients of `f` for every parameter.
fn check(store: &mut ParamStore<f64>, f: impl Fn(&Graph<f64>, &ParamStore<f64>) -> Var<f64>) {
    let g = Graph::new();
    let out = f(&g, store);
    let grads = g.backward(&out);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let h = 1e-6;
    for id in ids {
        let n = store.get(id).numel();
        for j in 0..n {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let plus = f(&Graph::inference(), store).value().data()[0];
            store.get_mut(id).data_mut()[j] = orig - h;
            let minus = f(&Graph::inference(), store).value().data()[0];
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[j]);
            let denom = analytic.abs().max(numeric.abs());
            let err = (analytic - numeric).abs();
            assert!(
                err < 1e-9 || err / denom < 1e-5,
                "{}[{j}]: analytic {analytic} numeric {numeric}",
                store.name(id)
            );
        }
    }
}

/// Random projection so the scalar output depends on every element.
fn project(g: &Graph<f64>, y: &Var<f64>, seed: u64) -> Var<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(rand_tensor(y.shape(), &mut rng));
    let p = g.mul(y, &r);
    g.sum_all(&p)
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0)] {
        let mut s = ParamStore::new();
        let x = s.insert("x", rand_tensor(&[2, 2, 5, 4], &mut rng));
        let w = s.insert("w", rand_tensor(&[3, 2, k, k], &mut rng));
        let b = s.insert("b", rand_tensor(&[3], &mut rng));
        check(&mut s, |g, s| {
            let y = g.conv2d(&g.param(s, x), &g.param(s, w), Some(&g.param(s, b)), stride, pad);
            project(g, &y, 7)
        });
    }
}

#[test]
fn group_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = ParamStore::new();
    let x = s.insert("x", rand_tensor(&[2, 4, 3, 3], &mut rng));
    let ga = s.insert("gamma", rand_tensor(&[4], &mut rng));
    let be = s.insert("beta", rand_tensor(&[4], &mut rng));
    check(&mut s, |g, s| {
        let y = g.group_norm(&g.param(s, x), 2, &g.param(s, ga), &g.param(s, be), 1e-5);
        project(g, &y, 3)
    });
}

#[test]
fn linear_and_silu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = ParamStore::new();
    let x = s.insert("x", rand_tensor(&[2, 3, 5], &mut rng));
    let w = s.insert("w", rand_tensor(&[4, 5], &mut rng));
    let b = s.insert("b", rand_tensor(&[4], &mut rng));
    check(&mut s, |g, s| {
        let y = g.linear(&g.param(s, x), &g.param(s, w), Some(&g.param(s, b)));
        let y = g.silu(&y);
        project(g, &y, 4)
    });
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = ParamStore::new();
    let q = s.insert("q", rand_tensor(&[2, 3, 4], &mut rng));
    let k = s.insert("k", rand_tensor(&[2, 5, 4], &mut rng));
    let v = s.insert("v", rand_tensor(&[2, 5, 4], &mut rng));
    check(&mut s, |g, s| {
        let y = g.attention(&g.param(s, q), &g.param(s, k), &g.param(s, v), 2);
        project(g, &y, 5)
    });
}

#[test]
fn shape_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    let a = s.insert("a", rand_tensor(&[2, 2, 3, 3], &mut rng));
    let b = s.insert("b", rand_tensor(&[2, 1, 3, 3], &mut rng));
    let e = s.insert("e", rand_tensor(&[2, 3], &mut rng));
    check(&mut s, |g, s| {
        let c = g.concat_channels(&g.param(s, a), &g.param(s, b));
        let c = g.add_channel_bias(&c, &g.param(s, e));
        let t = g.to_tokens(&c);
        let c = g.from_tokens(&t, 3, 3);
        let u = g.upsample2x(&c);
        let u = g.scale(&u, 0.5);
        let u2 = g.add(&u, &u);
        let r = g.reshape(&u2, &[2, 3 * 36]);
        project(g, &r, 6)
    });
}

#[test]
fn masked_mse_gradients_and_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = ParamStore::new();
    let p = s.insert("pred", rand_tensor(&[2, 2, 3, 3], &mut rng));
    let target = rand_tensor(&[2, 2, 3, 3], &mut rng);
    let mask = Tensor::from_fn(&[2, 1, 3, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    check(&mut s, |g, s| g.masked_mse(&g.param(s, p), &target, &mask));

    // Direct evaluation.
    let g = Graph::<f64>::inference();
    let loss = g.masked_mse(&g.param(&s, p), &target, &mask).value().data()[0];
    let pred = s.get(p).data();
    let mut want = 0.0;
    for i in 0..2 {
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for c in 0..2 {
            for j in 0..9 {
                if mask.data()[i * 9 + j] == 1.0 {
                    let idx = (i * 2 + c) * 9 + j;
                    acc += (pred[idx] - target.data()[idx]).powi(2);
                    cnt += 1.0;
                }
            }
        }
        want += acc / cnt / 2.0;
    }
    assert!((loss - want).abs() < 1e-12);
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut s = ParamStore::<f64>::new();
    let w = s.insert("frozen.w", Tensor::full(&[2, 2], 1.0));
    let v = s.insert("live.v", Tensor::full(&[2, 2], 1.0));
    s.set_frozen_prefix("frozen.", true);
    let g = Graph::new();
    let y = g.mul(&g.param(&s, w), &g.param(&s, v));
    let l = g.sum_all(&y);
    let grads = g.backward(&l);
    assert!(grads.get(w).is_none());
    assert_eq!(grads.get(v).unwrap().data(), &[1.0; 4]);
}
