//! Learned prototype bank and the clustering objectives.
//!
//! Prototypes are cluster centers in descriptor space. Their distribution is
//! matched to the descriptors' with a sliced Wasserstein loss computed
//! against samples drawn from a GMM whose modes are the prototypes; the
//! mixture weight of each mode combines its assignment ratio with a variance
//! spread term that keeps starved prototypes explorable. A log-soft-min
//! k-means loss pulls descriptors toward their nearest prototype, and two
//! ablation baselines (plain k-means, vector quantization) are provided for
//! the clustering-strategy comparison.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{Graph, Scalar, Tensor, Var};
use crate::error::{Result, TuskError};
use crate::nn::{ParamId, ParamStore};

/// Prototype bank: `M x C` learnable vectors plus the shared isotropic GMM
/// variance (the paper's Sigma, default 4e-4).
pub struct PrototypeBank {
    pub param: ParamId,
    pub m: usize,
    pub c: usize,
    pub sigma: f64,
}

pub const PROTO_PARAM: &str = "proto.P";

impl PrototypeBank {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        m: usize,
        c: usize,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(TuskError::InvalidParameter {
                name: "sigma_gmm",
                reason: format!("must be positive, got {sigma}"),
            });
        }
        let data: Vec<T> = (0..m * c)
            .map(|_| T::from_f64(rng.gen_range(-0.05..0.05)))
            .collect();
        let param = store.add(PROTO_PARAM, Tensor::new(vec![m, c], data)?)?;
        Ok(PrototypeBank { param, m, c, sigma })
    }
}

/// Nearest prototype per descriptor (l2; ties to the lower index).
pub fn assign<T: Scalar>(d: &Tensor<T>, p: &Tensor<T>) -> Vec<usize> {
    let (n, c) = (d.shape()[0], d.shape()[1]);
    let m = p.shape()[0];
    debug_assert_eq!(p.shape()[1], c);
    let (dd, pd) = (d.data(), p.data());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for j in 0..m {
            let mut acc = 0.0f64;
            for ch in 0..c {
                let diff = dd[i * c + ch].to_f64() - pd[j * c + ch].to_f64();
                acc += diff * diff;
            }
            if acc < best_d {
                best_d = acc;
                best = j;
            }
        }
        out[i] = best;
    }
    out
}

/// GMM bookkeeping for one batch of descriptors.
#[derive(Clone, Debug)]
pub struct MixtureState {
    pub assignments: Vec<usize>,
    /// Fraction of descriptors per prototype.
    pub r: Vec<f64>,
    /// Mean per-coordinate variance of each prototype's descriptors
    /// (population convention); 1 for empty prototypes.
    pub sigma_m: Vec<f64>,
    /// `r_m + Var({sigma_i})`.
    pub alpha: Vec<f64>,
    /// Normalized mixture weights.
    pub pi: Vec<f64>,
}

pub fn mixture_weights<T: Scalar>(d: &Tensor<T>, p: &Tensor<T>) -> MixtureState {
    let (n, c) = (d.shape()[0], d.shape()[1]);
    let m = p.shape()[0];
    let assignments = assign(d, p);
    let dd = d.data();

    let mut counts = vec![0usize; m];
    for &a in &assignments {
        counts[a] += 1;
    }
    let r: Vec<f64> = counts.iter().map(|&k| k as f64 / n as f64).collect();

    let mut sigma_m = vec![1.0f64; m];
    for j in 0..m {
        if counts[j] == 0 {
            continue;
        }
        let nm = counts[j] as f64;
        let mut var_sum = 0.0;
        for ch in 0..c {
            let mut mean = 0.0;
            for (i, &a) in assignments.iter().enumerate() {
                if a == j {
                    mean += dd[i * c + ch].to_f64();
                }
            }
            mean /= nm;
            let mut var = 0.0;
            for (i, &a) in assignments.iter().enumerate() {
                if a == j {
                    let dv = dd[i * c + ch].to_f64() - mean;
                    var += dv * dv;
                }
            }
            var_sum += var / nm;
        }
        sigma_m[j] = var_sum / c as f64;
    }

    let mean_sigma: f64 = sigma_m.iter().sum::<f64>() / m as f64;
    let var_sigma: f64 =
        sigma_m.iter().map(|s| (s - mean_sigma) * (s - mean_sigma)).sum::<f64>() / m as f64;

    let alpha: Vec<f64> = r.iter().map(|&rm| rm + var_sigma).collect();
    let total: f64 = alpha.iter().sum();
    let pi: Vec<f64> = if total > 0.0 {
        alpha.iter().map(|&a| a / total).collect()
    } else {
        vec![1.0 / m as f64; m]
    };

    MixtureState {
        assignments,
        r,
        sigma_m,
        alpha,
        pi,
    }
}

/// Deterministic largest-remainder allocation of `n` samples to weights
/// `pi` (sums to exactly `n`; remainder ties go to the lower index).
pub fn allocate_counts(pi: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = pi.iter().map(|&p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|&q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..pi.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &j in order.iter().take(n.saturating_sub(assigned)) {
        counts[j] += 1;
    }
    counts
}

/// Per-sample prototype indices for the allocation, in prototype order.
pub fn gmm_indices(counts: &[usize]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(counts.iter().sum());
    for (j, &k) in counts.iter().enumerate() {
        idx.extend(std::iter::repeat(j).take(k));
    }
    idx
}

/// Draw `n` samples from the prototype GMM: counts are allocated by largest
/// remainder, then each sample is `P_m + sqrt(sigma) * z`, `z ~ N(0, I)`.
pub fn sample_gmm<T: Scalar>(
    p: &Tensor<T>,
    sigma: f64,
    pi: &[f64],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let c = p.shape()[1];
    let idx = gmm_indices(&allocate_counts(pi, n));
    let std = sigma.sqrt();
    let pd = p.data();
    let mut out = Vec::with_capacity(n * c);
    for &j in &idx {
        for ch in 0..c {
            let z: f64 = StandardNormal.sample(rng);
            out.push(T::from_f64(pd[j * c + ch].to_f64() + std * z));
        }
    }
    Tensor::new(vec![n, c], out).expect("gmm sample shape")
}

/// `n_proj` unit projection directions as a `(C, N)` matrix, ready for
/// right-multiplication of `(n, C)` point sets.
pub fn projections<T: Scalar>(c: usize, n_proj: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut out = vec![T::ZERO; c * n_proj];
    for j in 0..n_proj {
        loop {
            let v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                for (i, x) in v.iter().enumerate() {
                    out[i * n_proj + j] = T::from_f64(x / norm);
                }
                break;
            }
        }
    }
    Tensor::new(vec![c, n_proj], out).expect("projection shape")
}

/// Graph form of the sliced Wasserstein loss between two equal-count point
/// sets: project both onto each direction, sort, mean squared difference.
pub fn sw_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    d: Var,
    p_samples: Var,
    proj: &Tensor<T>,
) -> Result<Var> {
    let shape_d = g.value(d).shape().to_vec();
    let shape_p = g.value(p_samples).shape().to_vec();
    if shape_d != shape_p {
        return Err(TuskError::ShapeMismatch {
            op: "sliced_wasserstein",
            lhs: shape_d,
            rhs: shape_p,
        });
    }
    let w = g.input(proj.clone());
    let pd = g.matmul(d, w)?;
    let pp = g.matmul(p_samples, w)?;
    let sd = g.sort_cols(pd)?;
    let sp = g.sort_cols(pp)?;
    let diff = g.sub(sd, sp)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq))
}

/// Plain evaluation of the sliced Wasserstein loss with freshly drawn
/// projections.
pub fn sliced_wasserstein<T: Scalar>(
    d: &Tensor<T>,
    p_samples: &Tensor<T>,
    n_proj: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let proj = projections::<T>(d.shape()[1], n_proj, rng);
    let mut g = Graph::new();
    let dv = g.input(d.clone());
    let pv = g.input(p_samples.clone());
    let loss = sw_loss_graph(&mut g, dv, pv, &proj)?;
    Ok(g.value(loss).item().to_f64())
}

/// Graph form of the k-means loss: negative mean log soft-min of the
/// unsquared l2 distances to the prototypes.
pub fn kmeans_loss_graph<T: Scalar>(g: &mut Graph<T>, d: Var, p: Var) -> Result<Var> {
    let dist = g.pairwise_l2(d, p)?;
    let dmin = g.row_min(dist)?;
    let neg = g.scale(dist, -1.0);
    let lse = g.row_logsumexp(neg)?;
    let per = g.add(dmin, lse)?;
    Ok(g.mean_all(per))
}

/// Plain evaluation of the k-means loss.
pub fn kmeans_loss<T: Scalar>(d: &Tensor<T>, p: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let dv = g.input(d.clone());
    let pv = g.input(p.clone());
    let loss = kmeans_loss_graph(&mut g, dv, pv)?;
    Ok(g.value(loss).item().to_f64())
}

/// Ablation baseline: mean squared distance to the nearest prototype, with
/// the assignment frozen from the forward pass (straight-through). The mean
/// is over descriptors, so one descriptor at distance `d` gives `d^2`.
pub fn kmeans_only_loss_graph<T: Scalar>(g: &mut Graph<T>, d: Var, p: Var) -> Result<Var> {
    let idx = assign(g.value(d), g.value(p));
    let n = idx.len();
    let nearest = g.gather_rows(p, idx)?;
    let diff = g.sub(d, nearest)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum_all(sq);
    Ok(g.scale(total, 1.0 / n as f64))
}

pub fn kmeans_only_loss<T: Scalar>(d: &Tensor<T>, p: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let dv = g.input(d.clone());
    let pv = g.input(p.clone());
    let loss = kmeans_only_loss_graph(&mut g, dv, pv)?;
    Ok(g.value(loss).item().to_f64())
}

/// Ablation baseline: VQ codebook + commitment objective with stop-gradients
/// (codebook term trains `p`, commitment term trains `d`). Returns the total
/// loss node; `beta` is the commitment weight.
pub fn vq_baseline_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    d: Var,
    p: Var,
    beta: f64,
) -> Result<Var> {
    let idx = assign(g.value(d), g.value(p));
    let n = idx.len();
    // codebook: || sg(D) - P_nearest ||^2
    let d_const = g.input(g.value(d).clone());
    let nearest = g.gather_rows(p, idx.clone())?;
    let cb_diff = g.sub(d_const, nearest)?;
    let cb_sq = g.mul(cb_diff, cb_diff)?;
    let cb = g.sum_all(cb_sq);
    let cb = g.scale(cb, 1.0 / n as f64);
    // commitment: || D - sg(P_nearest) ||^2
    let nearest_const = g.input(g.value(nearest).clone());
    let cm_diff = g.sub(d, nearest_const)?;
    let cm_sq = g.mul(cm_diff, cm_diff)?;
    let cm = g.sum_all(cm_sq);
    let cm = g.scale(cm, beta / n as f64);
    g.add(cb, cm)
}

/// Straight-through quantization: forward value is the nearest prototype,
/// gradient passes to `d` unchanged (none reaches `p` on this path).
pub fn vq_substitute<T: Scalar>(g: &mut Graph<T>, d: Var, p: Var) -> Result<Var> {
    let idx = assign(g.value(d), g.value(p));
    let nearest = g.gather_rows(p, idx)?;
    let nearest_val = g.value(nearest).clone();
    let mut delta = nearest_val.clone();
    for (dv, &orig) in delta.data_mut().iter_mut().zip(g.value(d).data().iter()) {
        *dv -= orig;
    }
    let delta = g.input(delta);
    g.add(d, delta)
}

pub fn vq_baseline_loss<T: Scalar>(d: &Tensor<T>, p: &Tensor<T>, beta: f64) -> Result<f64> {
    let mut g = Graph::new();
    let dv = g.input(d.clone());
    let pv = g.input(p.clone());
    let loss = vq_baseline_loss_graph(&mut g, dv, pv, beta)?;
    Ok(g.value(loss).item().to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, data).unwrap()
    }

    #[test]
    fn assign_identity_and_nearest() {
        let p = t(&[2, 1], &[0.0, 1.0]);
        assert_eq!(assign(&p.clone(), &p), vec![0, 1]);
        let d = t(&[1, 1], &[0.9]);
        assert_eq!(assign(&d, &p), vec![1]);
        let single = t(&[1, 1], &[0.3]);
        let d3 = t(&[3, 1], &[-5.0, 0.0, 5.0]);
        assert_eq!(assign(&d3, &single), vec![0, 0, 0]);
    }

    #[test]
    fn mixture_weights_hand_example() {
        // M=2, all descriptors identical and assigned to prototype 0:
        // r=(1,0), sigma=(0,1), Var=0.25, alpha=(1.25,0.25), pi=(5/6,1/6).
        let d = t(&[4, 2], &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let p = t(&[2, 2], &[0.5, 0.5, 9.0, 9.0]);
        let mw = mixture_weights(&d, &p);
        assert_eq!(mw.r, vec![1.0, 0.0]);
        assert!((mw.sigma_m[0] - 0.0).abs() < 1e-12);
        assert!((mw.sigma_m[1] - 1.0).abs() < 1e-12);
        assert!((mw.alpha[0] - 1.25).abs() < 1e-12);
        assert!((mw.alpha[1] - 0.25).abs() < 1e-12);
        assert!((mw.pi[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((mw.pi[1] - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn mixture_weights_symmetric_split() {
        // even split, equal within-cluster variance -> pi = (0.5, 0.5)
        let d = t(&[4, 1], &[-1.1, -0.9, 0.9, 1.1]);
        let p = t(&[2, 1], &[-1.0, 1.0]);
        let mw = mixture_weights(&d, &p);
        assert!((mw.pi[0] - 0.5).abs() < 1e-12);
        assert!((mw.pi[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn counts_sum_and_round() {
        assert_eq!(allocate_counts(&[0.5, 0.5], 4), vec![2, 2]);
        assert_eq!(allocate_counts(&[1.0, 0.0], 5), vec![5, 0]);
        let c = allocate_counts(&[0.4, 0.35, 0.25], 7);
        assert_eq!(c.iter().sum::<usize>(), 7);
    }

    #[test]
    fn gmm_sampling_degenerate_sigma() {
        let p = t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, -2.0, -3.0]);
        let mut r = rng::derive(0, "gmm", &[]);
        let s = sample_gmm(&p, 1e-30, &[1.0, 0.0], 5, &mut r);
        for i in 0..5 {
            for c in 0..3 {
                assert!((s.data()[i * 3 + c] - p.data()[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gmm_sample_spread_matches_sigma() {
        let p = t(&[2, 1], &[0.0, 0.0]);
        let mut r = rng::derive(3, "gmm", &[]);
        let n = 4000;
        let s = sample_gmm(&p, 4e-4, &[0.5, 0.5], n, &mut r);
        let mean: f64 = s.data().iter().sum::<f64>() / n as f64;
        let var: f64 = s.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        // std should be ~ sqrt(4e-4) = 0.02
        assert!((var.sqrt() - 0.02).abs() < 0.002, "std {}", var.sqrt());
    }

    #[test]
    fn sw_identical_sets_zero_and_permutation_invariant() {
        let d = t(&[2, 1], &[0.0, 2.0]);
        let p = t(&[2, 1], &[2.0, 0.0]);
        let mut r = rng::derive(0, "proj", &[]);
        let loss = sliced_wasserstein(&d, &p, 16, &mut r).unwrap();
        assert!(loss.abs() < 1e-12, "permuted identical sets: {loss}");
    }

    #[test]
    fn sw_fixed_projection_hand_value() {
        // C=1, w=+1 or -1, D={0,0}, P={1,1} -> 1.0 either way
        let d = t(&[2, 1], &[0.0, 0.0]);
        let p = t(&[2, 1], &[1.0, 1.0]);
        let proj = t(&[1, 1], &[1.0]);
        let mut g = Graph::new();
        let dv = g.input(d);
        let pv = g.input(p);
        let loss = sw_loss_graph(&mut g, dv, pv, &proj).unwrap();
        assert!((g.value(loss).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sw_count_mismatch_is_error() {
        let d = t(&[2, 1], &[0.0, 0.0]);
        let p = t(&[3, 1], &[1.0, 1.0, 1.0]);
        let mut r = rng::derive(0, "proj", &[]);
        assert!(sliced_wasserstein(&d, &p, 4, &mut r).is_err());
    }

    #[test]
    fn kmeans_loss_hand_values() {
        // single prototype -> 0
        let d = t(&[3, 2], &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        let p1 = t(&[1, 2], &[0.5, 0.5]);
        assert!(kmeans_loss(&d, &p1).unwrap().abs() < 1e-12);
        // equidistant from two prototypes -> -log(0.5)
        let d2 = t(&[1, 1], &[0.0]);
        let p2 = t(&[2, 1], &[-1.0, 1.0]);
        let v = kmeans_loss(&d2, &p2).unwrap();
        assert!((v - 0.5f64.ln().abs()).abs() < 1e-12, "{v}");
        // at one prototype, other at distance 10 -> log(1 + e^-10)
        let d3 = t(&[1, 1], &[0.0]);
        let p3 = t(&[2, 1], &[0.0, 10.0]);
        let v3 = kmeans_loss(&d3, &p3).unwrap();
        let expect = (1.0f64 + (-10.0f64).exp()).ln();
        assert!((v3 - expect).abs() < 1e-12, "{v3} vs {expect}");
    }

    #[test]
    fn baseline_losses_zero_at_prototypes() {
        let p = t(&[3, 2], &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(kmeans_only_loss(&p.clone(), &p).unwrap().abs() < 1e-12);
        assert!(vq_baseline_loss(&p.clone(), &p, 0.25).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kmeans_only_single_pair_squared_distance() {
        let d = t(&[1, 1], &[3.0]);
        let p = t(&[1, 1], &[0.0]);
        assert!((kmeans_only_loss(&d, &p).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn pi_is_probability_vector() {
        let mut r = rng::derive(9, "mw", &[]);
        for trial in 0..20u64 {
            let n = 5 + (trial as usize % 7);
            let data: Vec<f64> = (0..n * 3).map(|_| r.gen_range(-2.0..2.0)).collect();
            let pdata: Vec<f64> = (0..4 * 3).map(|_| r.gen_range(-2.0..2.0)).collect();
            let d = t(&[n, 3], &data);
            let p = t(&[4, 3], &pdata);
            let mw = mixture_weights(&d, &p);
            let sum: f64 = mw.pi.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(mw.pi.iter().all(|&x| x >= 0.0));
        }
    }
}
