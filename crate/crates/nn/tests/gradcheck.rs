//! Central finite-difference checks of every differentiable op.

use pdac_nn::{seeded_rng, ConvCfg, Graph, Init, ParamStore, Tensor, Var};
use rand::Rng;

fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        store.init(*name, shape, Init::Uniform { bound: 1.0 }, &mut rng);
    }
    store
}

/// Compares analytic parameter gradients against central differences of `f`.
fn check(store: &ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Var, tol: f32) {
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss).into_params();
    let h = 1e-2f32;
    for (name, tensor) in store.iter() {
        let analytic = grads.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
        for i in 0..tensor.numel() {
            let eval = |delta: f32| {
                let mut s = store.clone();
                s.get_mut(name).unwrap().data_mut()[i] += delta;
                let mut g = Graph::new();
                let l = f(&mut g, &s);
                g.value(l).item() as f64
            };
            let numeric = ((eval(h) - eval(-h)) / (2.0 * h as f64)) as f32;
            let a = analytic.data()[i];
            let scale = 1.0f32.max(a.abs()).max(numeric.abs());
            assert!(
                (a - numeric).abs() <= tol * scale,
                "{name}[{i}]: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn conv3d_strided_and_padded() {
    let store = store_with(&[("x", &[2, 2, 3, 4, 5]), ("w", &[3, 2, 3, 3, 3]), ("b", &[3])], 1);
    check(
        &store,
        |g, s| {
            let (x, w, b) = (g.param(s, "x"), g.param(s, "w"), g.param(s, "b"));
            let y = g.conv(x, w, Some(b), ConvCfg::cube(3, 2));
            let t = g.tanh(y);
            g.sum(t)
        },
        1e-2,
    );
}

#[test]
fn planar_conv_and_max_pool() {
    let store = store_with(&[("x", &[3, 1, 1, 6, 6]), ("w", &[2, 1, 1, 3, 3])], 2);
    check(
        &store,
        |g, s| {
            let (x, w) = (g.param(s, "x"), g.param(s, "w"));
            let y = g.conv(x, w, None, ConvCfg::planar(3, 2));
            let p = g.global_max_pool(y);
            let t = g.sigmoid(p);
            g.sum(t)
        },
        1e-2,
    );
}

#[test]
fn upsample_concat_and_avg_pool() {
    let store = store_with(&[("a", &[1, 2, 2, 2, 2]), ("b", &[1, 1, 4, 4, 4]), ("w", &[2, 3, 3, 3, 3])], 3);
    check(
        &store,
        |g, s| {
            let (a, b, w) = (g.param(s, "a"), g.param(s, "b"), g.param(s, "w"));
            let up = g.upsample(a, [2, 2, 2]);
            let cat = g.concat_channels(&[up, b]);
            let y = g.conv(cat, w, None, ConvCfg::cube(3, 1));
            let t = g.tanh(y);
            let p = g.global_avg_pool(t);
            let sq = g.mul(p, p);
            g.sum(sq)
        },
        1e-2,
    );
}

#[test]
fn linear_rows_cols_and_bce() {
    let store = store_with(&[("x", &[4, 5]), ("w", &[6, 5]), ("b", &[6]), ("h", &[1, 3])], 4);
    check(
        &store,
        |g, s| {
            let (x, w, b, h) = (g.param(s, "x"), g.param(s, "w"), g.param(s, "b"), g.param(s, "h"));
            let y = g.linear(x, w, Some(b));
            let left = g.slice_cols(y, 0, 3);
            let right = g.slice_cols(y, 3, 3);
            let prod = g.mul(left, right);
            let row = g.slice_rows(prod, 2, 1);
            let mixed = g.sub(row, h);
            let stacked = g.concat_rows(&[prod, mixed]);
            let wide = g.concat_cols(&[stacked, stacked]);
            let scaled = g.scale(wide, 0.5);
            let shifted = g.add_scalar(scaled, 0.1);
            let targets: Vec<f32> = (0..30).map(|i| (i % 3 == 0) as u8 as f32).collect();
            g.bce_with_logits(shifted, &targets, 2.5)
        },
        1e-2,
    );
}

#[test]
fn softmax_cross_entropy_and_soft_dice() {
    let store = store_with(&[("z", &[2, 3, 2, 2, 2])], 5);
    let mut rng = seeded_rng(9);
    let labels: Vec<u8> = (0..16).map(|_| rng.random_range(0..3u8)).collect();
    let l1 = labels.clone();
    check(
        &store,
        move |g, s| {
            let z = g.param(s, "z");
            g.softmax_cross_entropy(z, &l1)
        },
        1e-2,
    );
    check(
        &store,
        move |g, s| {
            let z = g.param(s, "z");
            g.soft_dice_loss(z, &labels)
        },
        1e-2,
    );
}

#[test]
fn squared_distance_hinge() {
    let store = store_with(&[("a", &[3, 4]), ("p", &[3, 4]), ("n", &[3, 4])], 6);
    check(
        &store,
        |g, s| {
            let (a, p, n) = (g.param(s, "a"), g.param(s, "p"), g.param(s, "n"));
            let dp = g.sq_dist(a, p);
            let dn = g.sq_dist(a, n);
            let diff = g.sub(dp, dn);
            let m = g.add_scalar(diff, 20.0);
            let r = g.relu(m);
            g.mean(r)
        },
        1e-2,
    );
}

#[test]
fn reused_parameter_gradients_are_summed() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![1, 1], vec![3.0]));
    let mut g = Graph::new();
    let a = g.param(&store, "w");
    let b = g.param(&store, "w");
    let y = g.mul(a, b);
    let loss = g.sum(y);
    let grads = g.backward(loss).into_params();
    assert_eq!(grads["w"].data(), &[6.0]);
}

#[test]
fn inputs_receive_no_gradient() {
    let store = store_with(&[("w", &[1, 1, 1, 1, 1])], 7);
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
    let w = g.param(&store, "w");
    let y = g.conv(x, w, None, ConvCfg::cube(1, 1));
    let loss = g.sum(y);
    let grads = g.backward(loss);
    assert!(grads.wrt(x).is_none());
    assert_eq!(grads.params()["w"].data(), &[8.0]);
}

/// Large enough that the column buffer is split into several depth chunks.
#[test]
fn chunked_convolution_gradients_match_directional_derivatives() {
    let mut rng = seeded_rng(11);
    let mut rand_tensor = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    };
    for cfg in [ConvCfg::cube(3, 1), ConvCfg::cube(3, 2)] {
        let (x, w, r_shape) = (rand_tensor(&[2, 8, 12, 64, 64]), rand_tensor(&[3, 8, 3, 3, 3]), cfg.out_dims([12, 64, 64]));
        let r = rand_tensor(&[2, 3, r_shape[0], r_shape[1], r_shape[2]]);
        let (v, u) = (rand_tensor(x.shape()), rand_tensor(w.shape()));
        let mut store = ParamStore::new();
        store.insert("x", x.clone());
        store.insert("w", w.clone());
        let weighted = |x: Tensor, w: Tensor| {
            let mut g = Graph::new();
            let (x, w) = (g.input(x), g.input(w));
            let y = g.conv(x, w, None, cfg);
            let rv = g.input(r.clone());
            let p = g.mul(y, rv);
            let s = g.sum(p);
            g.value(s).item() as f64
        };
        let mut g = Graph::new();
        let (xv, wv) = (g.param(&store, "x"), g.param(&store, "w"));
        let y = g.conv(xv, wv, None, cfg);
        let rv = g.input(r.clone());
        let p = g.mul(y, rv);
        let loss = g.sum(p);
        let grads = g.backward(loss).into_params();
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(p, q)| *p as f64 * *q as f64).sum::<f64>();
        let (lhs_x, rhs_x) = (dot(&grads["x"], &v), weighted(v.clone(), w.clone()));
        let (lhs_w, rhs_w) = (dot(&grads["w"], &u), weighted(x.clone(), u.clone()));
        assert!((lhs_x - rhs_x).abs() <= 1e-3 * rhs_x.abs().max(1.0), "dx: {lhs_x} vs {rhs_x}");
        assert!((lhs_w - rhs_w).abs() <= 1e-3 * rhs_w.abs().max(1.0), "dw: {lhs_w} vs {rhs_w}");
    }
}
