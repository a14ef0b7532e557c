//! Shared test fixtures: the per-operator gradient-check case table and
//! small dataset/config builders used across the integration suites.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tusk::diff::{grad_check, Graph, Tensor, Var, WarpGrid};
use tusk::encoder::{Encoder, EncoderConfig};
use tusk::nn::{ParamStore, ParamVars};
use tusk::prototypes;
use tusk::rng;
use tusk::transforms::{sample_tps, warp_grid, TpsConfig};

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduce an op output to a scalar through a fixed random mask so the
/// upstream gradient is non-uniform.
fn masked_mean(g: &mut Graph<f64>, v: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = g.value(v).shape().to_vec();
    let mask = rand_tensor(&shape, rng, -1.0, 1.0);
    let m = g.input(mask);
    let prod = g.mul(v, m).unwrap();
    g.mean_all(prod)
}

/// Run the gradient check for one named operator on one random instance.
/// Panics on unknown names; `tusk::diff::op_set()` lists the valid ones.
pub fn gradcheck_op(op: &str, seed: u64) -> f64 {
    let mut r = rng::derive(seed, "gradcheck", &[]);
    let eps = 1e-5;
    match op {
        "conv2d_s1" => {
            let x = rand_tensor(&[5, 6, 2], &mut r, -1.0, 1.0);
            let w = rand_tensor(&[3, 3, 2, 3], &mut r, -0.7, 0.7);
            let b = rand_tensor(&[3], &mut r, -0.3, 0.3);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.conv2d(vars[0], vars[1], vars[2], 1, 1)?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x, w, b],
                eps,
            )
            .unwrap()
        }
        "conv2d_s2" => {
            let x = rand_tensor(&[6, 6, 2], &mut r, -1.0, 1.0);
            let w = rand_tensor(&[3, 3, 2, 2], &mut r, -0.7, 0.7);
            let b = rand_tensor(&[2], &mut r, -0.3, 0.3);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.conv2d(vars[0], vars[1], vars[2], 2, 1)?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x, w, b],
                eps,
            )
            .unwrap()
        }
        "upsample2x_conv" => {
            let x = rand_tensor(&[3, 4, 2], &mut r, -1.0, 1.0);
            let w = rand_tensor(&[3, 3, 2, 2], &mut r, -0.7, 0.7);
            let b = rand_tensor(&[2], &mut r, -0.3, 0.3);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let up = g.upsample2x(vars[0])?;
                    let y = g.conv2d(up, vars[1], vars[2], 1, 1)?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x, w, b],
                eps,
            )
            .unwrap()
        }
        "leaky_relu" => {
            // keep entries away from the kink at 0
            let mag = rand_tensor(&[4, 5], &mut r, 0.05, 1.0);
            let signs: Vec<f64> = (0..20).map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            let x = Tensor::new(
                vec![4, 5],
                mag.data().iter().zip(signs.iter()).map(|(&m, &s)| m * s).collect(),
            )
            .unwrap();
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.leaky_relu(vars[0], 0.1);
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "sigmoid" => {
            let x = rand_tensor(&[4, 5], &mut r, -2.0, 2.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.sigmoid(vars[0]);
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "softmax_axis" => {
            let x = rand_tensor(&[3, 4, 2], &mut r, -2.0, 2.0);
            let axis = (seed % 3) as usize;
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.softmax_axis(vars[0], axis)?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "add" | "sub" | "mul" => {
            let a = rand_tensor(&[3, 4], &mut r, -1.0, 1.0);
            let b = rand_tensor(&[3, 4], &mut r, -1.0, 1.0);
            let name = op.to_string();
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = match name.as_str() {
                        "add" => g.add(vars[0], vars[1])?,
                        "sub" => g.sub(vars[0], vars[1])?,
                        _ => g.mul(vars[0], vars[1])?,
                    };
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[a, b],
                eps,
            )
            .unwrap()
        }
        "mul_scalar" => {
            let x = rand_tensor(&[3, 4], &mut r, -1.0, 1.0);
            let s = rand_tensor(&[], &mut r, 0.3, 1.5);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.mul_scalar(vars[0], vars[1])?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x, s],
                eps,
            )
            .unwrap()
        }
        "scale" => {
            let x = rand_tensor(&[3, 4], &mut r, -1.0, 1.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.scale(vars[0], -2.5);
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "sum_all" => {
            let x = rand_tensor(&[4, 3], &mut r, -1.0, 1.0);
            grad_check(move |g, vars| Ok(g.sum_all(vars[0])), &[x], eps).unwrap()
        }
        "mean_all" => {
            let x = rand_tensor(&[4, 3], &mut r, -1.0, 1.0);
            grad_check(move |g, vars| Ok(g.mean_all(vars[0])), &[x], eps).unwrap()
        }
        "l2_norm" => {
            let x = rand_tensor(&[7], &mut r, 0.2, 1.5);
            grad_check(move |g, vars| Ok(g.l2_norm(vars[0])), &[x], eps).unwrap()
        }
        "matmul" => {
            let a = rand_tensor(&[3, 4], &mut r, -1.0, 1.0);
            let b = rand_tensor(&[4, 2], &mut r, -1.0, 1.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.matmul(vars[0], vars[1])?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[a, b],
                eps,
            )
            .unwrap()
        }
        "bilinear_sample" => {
            let f = rand_tensor(&[5, 6, 3], &mut r, -1.0, 1.0);
            // interior, away from integer lattice lines
            let coords_data: Vec<f64> = (0..4)
                .flat_map(|_| {
                    let x = r.gen_range(0.2..4.8f64);
                    let y = r.gen_range(0.2..3.8f64);
                    [x.floor() + 0.2 + 0.6 * x.fract(), y.floor() + 0.2 + 0.6 * y.fract()]
                })
                .collect();
            let coords = Tensor::new(vec![4, 2], coords_data).unwrap();
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.bilinear_sample(vars[0], vars[1])?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[f, coords],
                eps,
            )
            .unwrap()
        }
        "gaussian_conv" => {
            let x = rand_tensor(&[6, 5, 2], &mut r, -1.0, 1.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.gaussian_conv(vars[0], 0.9)?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "sort_cols" => {
            let x = rand_tensor(&[6, 3], &mut r, -2.0, 2.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.sort_cols(vars[0])?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "concat_last" => {
            let a = rand_tensor(&[4, 3, 2], &mut r, -1.0, 1.0);
            let b = rand_tensor(&[4, 3, 3], &mut r, -1.0, 1.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.concat_last(vars[0], vars[1])?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[a, b],
                eps,
            )
            .unwrap()
        }
        "gather_rows" => {
            let x = rand_tensor(&[5, 3], &mut r, -1.0, 1.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.gather_rows(vars[0], vec![0, 2, 2, 4])?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "pairwise_l2" => {
            // separate the point sets so no distance is near zero
            let a = rand_tensor(&[4, 3], &mut r, -1.0, -0.2);
            let b = rand_tensor(&[3, 3], &mut r, 0.2, 1.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.pairwise_l2(vars[0], vars[1])?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[a, b],
                eps,
            )
            .unwrap()
        }
        "row_min" => {
            let x = rand_tensor(&[4, 5], &mut r, -2.0, 2.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.row_min(vars[0])?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "row_logsumexp" => {
            let x = rand_tensor(&[4, 5], &mut r, -2.0, 2.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.row_logsumexp(vars[0])?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "soft_argmax" => {
            let s = rand_tensor(&[9, 9], &mut r, 0.0, 1.0);
            let centers = vec![(4usize, 4usize), (1, 7), (8, 0)];
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.soft_argmax(vars[0], centers.clone(), 5, 0.3)?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[s],
                eps,
            )
            .unwrap()
        }
        "gather_pixels" => {
            let s = rand_tensor(&[6, 7], &mut r, 0.0, 1.0);
            let pts = vec![(0usize, 0usize), (6, 5), (3, 2)];
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.gather_pixels(vars[0], pts.clone())?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[s],
                eps,
            )
            .unwrap()
        }
        "splat" => {
            // keep locations away from half-pixel boundaries so the
            // truncation box is stable under the finite-difference step
            let l_data: Vec<f64> = (0..2)
                .flat_map(|_| [r.gen_range(2.0..6.0f64).floor() + 0.2, r.gen_range(2.0..5.0f64).floor() + 0.7])
                .collect();
            let l = Tensor::new(vec![2, 2], l_data).unwrap();
            let d = rand_tensor(&[2, 3], &mut r, -1.0, 1.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.splat(vars[0], vars[1], 8, 9, 1.2)?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[l, d],
                eps,
            )
            .unwrap()
        }
        "weighted_sum_k" => {
            let rr = rand_tensor(&[3, 4, 4, 2], &mut r, -1.0, 1.0);
            let s = rand_tensor(&[3], &mut r, 0.1, 1.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.weighted_sum_k(vars[0], vars[1])?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[rr, s],
                eps,
            )
            .unwrap()
        }
        "index_k" => {
            let x = rand_tensor(&[3, 4, 2], &mut r, -1.0, 1.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.index_k(vars[0], 1)?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "stack0" => {
            let a = rand_tensor(&[3, 2], &mut r, -1.0, 1.0);
            let b = rand_tensor(&[3, 2], &mut r, -1.0, 1.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.stack0(&[vars[0], vars[1]])?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[a, b],
                eps,
            )
            .unwrap()
        }
        "slice_last" => {
            let x = rand_tensor(&[3, 4, 5], &mut r, -1.0, 1.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.slice_last(vars[0], 1, 3)?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "squeeze_last" => {
            let x = rand_tensor(&[3, 4, 1], &mut r, -1.0, 1.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.squeeze_last(vars[0])?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "expand_last" => {
            let x = rand_tensor(&[3, 4], &mut r, -1.0, 1.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.expand_last(vars[0], 3)?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "sum_axis0" => {
            let x = rand_tensor(&[4, 3, 2], &mut r, -1.0, 1.0);
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.sum_axis0(vars[0])?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "warp" => {
            let x = rand_tensor(&[6, 7, 2], &mut r, -1.0, 1.0);
            let (h, w) = (6usize, 7usize);
            let mut sx = vec![0.0; h * w];
            let mut sy = vec![0.0; h * w];
            let mut valid = vec![false; h * w];
            for p in 0..h * w {
                sx[p] = r.gen_range(0.3..(w as f64 - 1.3));
                sy[p] = r.gen_range(0.3..(h as f64 - 1.3));
                valid[p] = r.gen_bool(0.8);
            }
            let grid = Arc::new(WarpGrid { h, w, sx, sy, valid });
            let mr = r.clone();
            grad_check(
                move |g, vars| {
                    let y = g.warp(vars[0], grid.clone())?;
                    Ok(masked_mean(g, y, &mut mr.clone()))
                },
                &[x],
                eps,
            )
            .unwrap()
        }
        "masked_mse" => {
            let a = rand_tensor(&[5, 6, 2], &mut r, -1.0, 1.0);
            let b = rand_tensor(&[5, 6, 2], &mut r, -1.0, 1.0);
            let mask: Arc<Vec<bool>> = Arc::new((0..30).map(|_| r.gen_bool(0.7)).collect());
            grad_check(
                move |g, vars| g.masked_mse(vars[0], vars[1], mask.clone()),
                &[a, b],
                eps,
            )
            .unwrap()
        }
        other => panic!("no gradcheck case for op `{other}`"),
    }
}

/// Composed-loss gradient checks (the acceptance suite's second half of
/// criterion 1).
pub fn gradcheck_loss(name: &str, seed: u64) -> f64 {
    let mut r = rng::derive(seed, "gradcheck_loss", &[]);
    let eps = 1e-5;
    match name {
        "recon_mse" => {
            let a = rand_tensor(&[6, 6, 3], &mut r, 0.0, 1.0);
            let b = rand_tensor(&[6, 6, 3], &mut r, 0.0, 1.0);
            grad_check(
                move |g, vars| {
                    let d = g.sub(vars[0], vars[1])?;
                    let sq = g.mul(d, d)?;
                    Ok(g.mean_all(sq))
                },
                &[a, b],
                eps,
            )
            .unwrap()
        }
        "kmeans" => {
            let d = rand_tensor(&[6, 4], &mut r, -1.0, -0.1);
            let p = rand_tensor(&[3, 4], &mut r, 0.1, 1.0);
            grad_check(
                move |g, vars| prototypes::kmeans_loss_graph(g, vars[0], vars[1]),
                &[d, p],
                eps,
            )
            .unwrap()
        }
        "kmeans_small" => {
            // the spec's 4 descriptors / 2 prototypes instance
            let d = rand_tensor(&[4, 3], &mut r, -1.0, 0.0);
            let p = rand_tensor(&[2, 3], &mut r, 0.2, 1.0);
            grad_check(
                move |g, vars| prototypes::kmeans_loss_graph(g, vars[0], vars[1]),
                &[d, p],
                eps,
            )
            .unwrap()
        }
        "sliced_wasserstein" => {
            // fixed projections, 8x4 descriptors as the spec instance
            let d = rand_tensor(&[8, 4], &mut r, -1.0, 1.0);
            let p = rand_tensor(&[8, 4], &mut r, -1.0, 1.0);
            let proj = prototypes::projections::<f64>(4, 6, &mut r);
            grad_check(
                move |g, vars| prototypes::sw_loss_graph(g, vars[0], vars[1], &proj),
                &[d, p],
                eps,
            )
            .unwrap()
        }
        "soft_argmax_eq5" => gradcheck_op("soft_argmax", seed),
        "equivariance" => {
            // tiny real encoder + real TPS warp, fully differentiated
            let mut store: ParamStore<f64> = ParamStore::new();
            let mut init = rng::derive(seed, "eqv_init", &[]);
            let enc = Encoder::new(
                &mut store,
                EncoderConfig {
                    feat_ch: 3,
                    base: 2,
                    depth: 1,
                    full_res_1x1: false,
                },
                &mut init,
            )
            .unwrap();
            let mut tps_rng = rng::derive(seed, "eqv_tps", &[]);
            let t = sample_tps(&mut tps_rng, &TpsConfig::default(), 8, 8).unwrap();
            let grid = Arc::new(warp_grid(&t, 8, 8));
            let image = rand_tensor(&[8, 8, 3], &mut r, 0.0, 1.0);
            let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
            let image2 = image.clone();
            grad_check(
                move |g, vars| {
                    let pv = ParamVars::from_vars(vars.to_vec());
                    let img = g.input(image2.clone());
                    let (s, f) = enc.encode(g, &pv, img)?;
                    let (lh, lf) = tusk::transforms::eqv_loss_graph(
                        g, &enc, &pv, img, s, f, &grid,
                    )?;
                    let lf_scaled = g.scale(lf, 0.5);
                    g.add(lh, lf_scaled)
                },
                &inputs,
                eps,
            )
            .unwrap()
        }
        other => panic!("no composed-loss gradcheck case for `{other}`"),
    }
}

pub fn loss_cases() -> &'static [&'static str] {
    &[
        "recon_mse",
        "kmeans",
        "kmeans_small",
        "sliced_wasserstein",
        "soft_argmax_eq5",
        "equivariance",
    ]
}
