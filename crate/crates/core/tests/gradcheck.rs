//! Central finite-difference checks for every op and layer in the autodiff core.

use odflow::nn::{Graph, LayerNorm, Linear, Mlp, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares analytic parameter gradients of `build` against central differences.
fn check(store: &mut ParamStore, build: impl Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    g.backward(loss, store).unwrap();
    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| store.grad(id).data().to_vec())
        .collect();

    let mut worst = 0.0f64;
    for id in store.ids().collect::<Vec<_>>() {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + H;
            let mut gp = Graph::new();
            let lp = build(&mut gp, store);
            let fp = gp.value(lp).item();
            store.value_mut(id).data_mut()[k] = orig - H;
            let mut gm = Graph::new();
            let lm = build(&mut gm, store);
            let fm = gm.value(lm).item();
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * H);
            let err = rel_err(analytic[id.index()][k], numeric);
            assert!(
                err < TOL,
                "{}[{k}]: analytic {} vs numeric {numeric} (rel {err:e})",
                store.name(id),
                analytic[id.index()][k]
            );
            worst = worst.max(err);
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    // 5·12 + 12 + 12·3 + 3 = 111 parameters
    let mlp = Mlp::new(&mut store, "mlp", 5, 12, 3, &mut rng);
    assert!(store.num_scalars() <= 200);
    let x = rand_tensor(&mut rng, &[4, 5]);
    let y = rand_tensor(&mut rng, &[4, 3]);
    check(&mut store, |g, s| {
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let out = mlp.forward(g, s, xv).unwrap();
        g.mse(out, yv).unwrap()
    });
}

#[test]
fn linear_and_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 4, 6, true, &mut rng);
    let ln = LayerNorm::new(&mut store, "ln", 6);
    // perturb gain/shift away from the identity init
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let x = rand_tensor(&mut rng, &[3, 4]);
    let w = rand_tensor(&mut rng, &[3, 6]);
    check(&mut store, |g, s| {
        let xv = g.constant(x.clone());
        let h = lin.forward(g, s, xv).unwrap();
        let h = ln.forward(g, s, h).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(h, wv).unwrap();
        g.sum(p)
    });
}

#[test]
fn softmax_on_both_axes_with_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&mut rng, &[3, 4]));
    let w = rand_tensor(&mut rng, &[4, 3]);
    check(&mut store, |g, s| {
        let av = g.param(s, a);
        let s0 = g.softmax(av, 0).unwrap();
        let s1 = g.softmax(av, 1).unwrap();
        let t = g.transpose(s0).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(t, wv).unwrap();
        let q = g.tanh(s1);
        let (ps, qs) = (g.sum(p), g.mean(q));
        let total = g.add(ps, qs).unwrap();
        g.scale(total, 1.7)
    });
}

#[test]
fn layer_norm_inner_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&mut rng, &[2, 3, 4]));
    let w = rand_tensor(&mut rng, &[2, 3, 4]);
    check(&mut store, |g, s| {
        let av = g.param(s, a);
        let n = g.layer_norm(av, 1, 1e-5).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(n, wv).unwrap();
        g.sum(p)
    });
}

#[test]
fn activations_and_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut store = ParamStore::new();
    // keep relu inputs away from the kink
    let data: Vec<f64> = (0..12)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let a = store.add("a", Tensor::new(vec![3, 4], data).unwrap());
    let b = store.add("b", rand_tensor(&mut rng, &[4]));
    let target = rand_tensor(&mut rng, &[3, 4]);
    check(&mut store, |g, s| {
        let av = g.param(s, a);
        let bv = g.param(s, b);
        let r = g.relu(av);
        let ge = g.gelu(av);
        let m = g.mul(ge, bv).unwrap();
        let d = g.sub(r, m).unwrap();
        let d = g.add_scalar(d, 0.3);
        let d = g.add(d, bv).unwrap();
        let tv = g.constant(target.clone());
        g.mse(d, tv).unwrap()
    });
}

#[test]
fn concat_slice_reshape_and_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut store = ParamStore::new();
    let h = store.add("h", rand_tensor(&mut rng, &[3, 2]));
    let e = store.add("e", rand_tensor(&mut rng, &[9, 2]));
    let w = rand_tensor(&mut rng, &[9, 5]);
    check(&mut store, |g, s| {
        let hv = g.param(s, h);
        let ev = g.param(s, e);
        let o = g.pair_origin(hv).unwrap();
        let d = g.pair_dest(hv).unwrap();
        let c = g.concat(&[o, d, ev], 1).unwrap();
        let c = g.slice(c, 1, 1, 6).unwrap();
        let r = g.reshape(c, &[45]).unwrap();
        let r = g.reshape(r, &[9, 5]).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(r, wv).unwrap();
        let sq = g.mul(p, p).unwrap();
        g.sum(sq)
    });
}

#[test]
fn attention_head_composite() {
    // scores = Q·Kᵀ/√d, softmax over keys, weighted sum of values
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut store = ParamStore::new();
    let wq = Linear::new(&mut store, "q", 3, 4, false, &mut rng);
    let wk = Linear::new(&mut store, "k", 3, 4, false, &mut rng);
    let wv = Linear::new(&mut store, "v", 3, 4, true, &mut rng);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let y = rand_tensor(&mut rng, &[4, 4]);
    check(&mut store, |g, s| {
        let xv = g.constant(x.clone());
        let q = wq.forward(g, s, xv).unwrap();
        let k = wk.forward(g, s, xv).unwrap();
        let v = wv.forward(g, s, xv).unwrap();
        let kt = g.transpose(k).unwrap();
        let sc = g.matmul(q, kt).unwrap();
        let sc = g.scale(sc, 0.5);
        let a = g.softmax(sc, 1).unwrap();
        let o = g.matmul_sorted(a, v).unwrap();
        let yv = g.constant(y.clone());
        g.mse(o, yv).unwrap()
    });
}

#[test]
fn input_gradients_are_reported() {
    let mut g = Graph::new();
    let mut store = ParamStore::new();
    let x = g.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss, &mut store).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", 6, 16, 2, &mut rng);
        let x = rand_tensor(&mut rng, &[5, 6]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = mlp.forward(&mut g, &store, xv).unwrap();
        let loss = g.mean(out);
        g.backward(loss, &mut store).unwrap();
        let grads: Vec<u64> = store
            .ids()
            .flat_map(|id| {
                store
                    .grad(id)
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect();
        (g.value(loss).item().to_bits(), grads)
    };
    assert_eq!(run(), run());
}
