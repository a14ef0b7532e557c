//! Composed-loss gradient checks and loss-level properties.

mod common;

use common::{gradcheck_loss, loss_cases, rand_tensor};
use tusk::diff::{Graph, Tensor};
use tusk::prototypes::{self, sliced_wasserstein};
use tusk::rng;

#[test]
fn composed_losses_pass_gradcheck_once() {
    for name in loss_cases() {
        let err = gradcheck_loss(name, 1);
        assert!(err < 1e-4, "loss {name}: relative error {err}");
    }
}

#[test]
fn sw_nonnegative_and_zero_on_identical_sets() {
    let mut r = rng::derive(21, "swprop", &[]);
    for trial in 0..10u64 {
        let n = 4 + (trial as usize % 5);
        let d = rand_tensor(&[n, 3], &mut r, -1.0, 1.0);
        let loss = sliced_wasserstein(&d, &d.clone(), 32, &mut r).unwrap();
        assert!(loss.abs() < 1e-12);
        let e = rand_tensor(&[n, 3], &mut r, 2.0, 3.0);
        let loss2 = sliced_wasserstein(&d, &e, 32, &mut r).unwrap();
        assert!(loss2 > 0.0, "disjoint sets must have positive loss");
    }
}

#[test]
fn sw_symmetric_in_point_sets() {
    let mut r1 = rng::derive(22, "swsym", &[]);
    let mut r2 = rng::derive(22, "swsym", &[]);
    let a = rand_tensor(&[6, 4], &mut r1, -1.0, 1.0);
    let b = rand_tensor(&[6, 4], &mut r1, -1.0, 1.0);
    let mut r1b = rng::derive(23, "proj", &[]);
    let mut r2b = rng::derive(23, "proj", &[]);
    let ab = sliced_wasserstein(&a, &b, 64, &mut r1b).unwrap();
    let ba = sliced_wasserstein(&b, &a, 64, &mut r2b).unwrap();
    assert!((ab - ba).abs() < 1e-12, "{ab} vs {ba}");
    let _ = (r2,);
}

#[test]
fn sw_1d_matches_exact_sorted_wasserstein() {
    // on C=1 data every unit projection is +/-1, so the sliced loss must
    // equal the exact 1D W2^2 computed by sorting, to 1e-6
    let mut r = rng::derive(24, "sw1d", &[]);
    for _ in 0..20 {
        let n = 8;
        let a = rand_tensor(&[n, 1], &mut r, -2.0, 2.0);
        let b = rand_tensor(&[n, 1], &mut r, -2.0, 2.0);
        let mut proj_rng = rng::derive(25, "p", &[]);
        let sw = sliced_wasserstein(&a, &b, 16, &mut proj_rng).unwrap();
        let mut av: Vec<f64> = a.data().to_vec();
        let mut bv: Vec<f64> = b.data().to_vec();
        av.sort_by(|x, y| x.total_cmp(y));
        bv.sort_by(|x, y| x.total_cmp(y));
        let exact: f64 =
            av.iter().zip(bv.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
        assert!((sw - exact).abs() < 1e-6, "{sw} vs {exact}");
    }
}

#[test]
fn kmeans_loss_nonnegative_and_vanishes_at_prototypes() {
    let mut r = rng::derive(26, "kmprop", &[]);
    for _ in 0..10 {
        let d = rand_tensor(&[5, 3], &mut r, -2.0, 2.0);
        let p = rand_tensor(&[4, 3], &mut r, -2.0, 2.0);
        let loss = prototypes::kmeans_loss(&d, &p).unwrap();
        assert!(loss >= 0.0);
    }
    // descriptors at prototypes, others far away -> ~0
    let d = Tensor::new(vec![2, 2], vec![0.0, 0.0, 50.0, 50.0]).unwrap();
    let p = Tensor::new(vec![2, 2], vec![0.0, 0.0, 50.0, 50.0]).unwrap();
    let loss = prototypes::kmeans_loss(&d, &p).unwrap();
    assert!(loss < 1e-12, "{loss}");
}

#[test]
fn eqv_loss_identity_is_exactly_zero() {
    use std::sync::Arc;
    use tusk::encoder::{Encoder, EncoderConfig};
    use tusk::nn::{bind_params, ParamStore};
    use tusk::transforms::{eqv_loss_graph, warp_grid, TpsTransform};

    let mut store: ParamStore<f32> = ParamStore::new();
    let mut init = rng::derive(30, "eqv0", &[]);
    let enc = Encoder::new(
        &mut store,
        EncoderConfig { feat_ch: 4, base: 4, depth: 1, full_res_1x1: false },
        &mut init,
    )
    .unwrap();
    let grid = Arc::new(warp_grid(&TpsTransform::identity(), 12, 12));
    let mut r = rng::derive(31, "img", &[]);
    let image = rand_tensor(&[12, 12, 3], &mut r, 0.0, 1.0).to_f32();
    let mut g = Graph::new();
    let vars = bind_params(&mut g, &store, |_| true);
    let img = g.input(image);
    let (s, f) = enc.encode(&mut g, &vars, img).unwrap();
    let (lh, lf) = eqv_loss_graph(&mut g, &enc, &vars, img, s, f, &grid).unwrap();
    assert_eq!(g.value(lh).item(), 0.0);
    assert_eq!(g.value(lf).item(), 0.0);
}

#[test]
fn eqv_loss_positive_for_nontrivial_warp() {
    use std::sync::Arc;
    use tusk::encoder::{Encoder, EncoderConfig};
    use tusk::nn::{bind_params, ParamStore};
    use tusk::transforms::{eqv_loss_graph, sample_tps, warp_grid, TpsConfig};

    let mut store: ParamStore<f32> = ParamStore::new();
    let mut init = rng::derive(32, "eqv1", &[]);
    let enc = Encoder::new(
        &mut store,
        EncoderConfig { feat_ch: 4, base: 4, depth: 1, full_res_1x1: false },
        &mut init,
    )
    .unwrap();
    let mut tr = rng::derive(33, "tps", &[]);
    let t = sample_tps(&mut tr, &TpsConfig::default(), 16, 16).unwrap();
    let grid = Arc::new(warp_grid(&t, 16, 16));
    let mut r = rng::derive(34, "img", &[]);
    let image = rand_tensor(&[16, 16, 3], &mut r, 0.0, 1.0).to_f32();
    let mut g = Graph::new();
    let vars = bind_params(&mut g, &store, |_| true);
    let img = g.input(image);
    let (s, f) = enc.encode(&mut g, &vars, img).unwrap();
    let (lh, lf) = eqv_loss_graph(&mut g, &enc, &vars, img, s, f, &grid).unwrap();
    assert!(g.value(lh).item() > 0.0);
    assert!(g.value(lf).item() > 0.0);
}

#[test]
fn warp_linear_on_valid_mask() {
    use std::sync::Arc;
    use tusk::transforms::{sample_tps, warp_grid, TpsConfig};

    let mut tr = rng::derive(35, "tpslin", &[]);
    let t = sample_tps(&mut tr, &TpsConfig::default(), 10, 10).unwrap();
    let grid = warp_grid(&t, 10, 10);
    let mut r = rng::derive(36, "maps", &[]);
    let a = rand_tensor(&[10, 10, 2], &mut r, -1.0, 1.0);
    let b = rand_tensor(&[10, 10, 2], &mut r, -1.0, 1.0);
    let (ca, cb) = (0.7, -0.4);
    let run = |m: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.input(m.clone());
        let out = g.warp(v, Arc::new(grid.clone())).unwrap();
        g.value(out).clone()
    };
    let mut combo = a.clone();
    for (o, (&x, &y)) in combo
        .data_mut()
        .iter_mut()
        .zip(a.data().iter().zip(b.data().iter()))
    {
        *o = ca * x + cb * y;
    }
    let lhs = run(&combo);
    let ra = run(&a);
    let rb = run(&b);
    for p in 0..100 {
        if !grid.valid[p] {
            continue;
        }
        for c in 0..2 {
            let want = ca * ra.data()[p * 2 + c] + cb * rb.data()[p * 2 + c];
            assert!((lhs.data()[p * 2 + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn eqv_loss_ignores_content_outside_mask() {
    // loss restricted to the valid mask: perturbing invalid pixels of the
    // warped-comparison inputs must not change the masked mse
    use std::sync::Arc;
    let (h, w) = (6usize, 6usize);
    let mut r = rng::derive(37, "maskinv", &[]);
    let a = rand_tensor(&[h, w], &mut r, 0.0, 1.0);
    let b = rand_tensor(&[h, w], &mut r, 0.0, 1.0);
    let mut mask = vec![true; h * w];
    mask[3] = false;
    mask[17] = false;
    let mask = Arc::new(mask);
    let loss = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut g = Graph::new();
        let av = g.input(a.clone());
        let bv = g.input(b.clone());
        let l = g.masked_mse(av, bv, mask.clone()).unwrap();
        g.value(l).item()
    };
    let base = loss(&a, &b);
    let mut a2 = a.clone();
    a2.data_mut()[3] = 99.0;
    a2.data_mut()[17] = -50.0;
    assert_eq!(loss(&a2, &b), base);
}
