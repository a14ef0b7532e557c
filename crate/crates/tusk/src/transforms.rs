//! Random thin-plate-spline warps and the equivariance objective.
//!
//! A transform maps output pixel coordinates to source sampling coordinates:
//! `warp(map, T)(p) = map(T(p))` by bilinear resampling, with pixels whose
//! source lands outside the map masked invalid (filled 0). The equivariance
//! loss compares encoding-the-warped-image against warping-the-encoding,
//! restricted to the valid region.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Scalar, Tensor, Var, WarpGrid};
use crate::encoder::Encoder;
use crate::error::{Result, TuskError};
use crate::linalg::solve;
use crate::nn::ParamVars;

/// Magnitudes for random TPS sampling. Fractions are of the image size.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TpsConfig {
    /// Control grid is `grid x grid`.
    pub grid: usize,
    /// Gaussian jitter std as a fraction of image size.
    pub jitter_frac: f64,
    /// Max rotation in degrees.
    pub rot_max_deg: f64,
    /// Scale drawn from `[1 - amp, 1 + amp]`.
    pub scale_amp: f64,
    /// Max translation as a fraction of image size.
    pub trans_frac: f64,
}

impl Default for TpsConfig {
    fn default() -> Self {
        TpsConfig {
            grid: 5,
            jitter_frac: 0.05,
            rot_max_deg: 15.0,
            scale_amp: 0.10,
            trans_frac: 0.05,
        }
    }
}

/// A fitted thin-plate-spline mapping output `(x, y)` to source `(x, y)`.
#[derive(Clone, Debug)]
pub struct TpsTransform {
    ctrl: Vec<[f64; 2]>,
    /// RBF + affine coefficients for the x and y output channels; length
    /// `ctrl.len() + 3` each. Empty for the exact identity.
    wx: Vec<f64>,
    wy: Vec<f64>,
    identity: bool,
}

fn rbf(r2: f64) -> f64 {
    // phi(r) = r^2 ln r = 0.5 * r^2 ln r^2
    if r2 <= 1e-300 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

impl TpsTransform {
    pub fn identity() -> Self {
        TpsTransform {
            ctrl: Vec::new(),
            wx: Vec::new(),
            wy: Vec::new(),
            identity: true,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// Fit a TPS through `src -> dst` control pairs.
    pub fn fit(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Self> {
        let n = src.len();
        let dim = n + 3;
        let mut a = vec![0.0f64; dim * dim];
        for i in 0..n {
            for j in 0..n {
                let dx = src[i][0] - src[j][0];
                let dy = src[i][1] - src[j][1];
                a[i * dim + j] = rbf(dx * dx + dy * dy);
            }
            // slight diagonal loading for conditioning
            a[i * dim + i] += 1e-9;
            a[i * dim + n] = 1.0;
            a[i * dim + n + 1] = src[i][0];
            a[i * dim + n + 2] = src[i][1];
            a[n * dim + i] = 1.0;
            a[(n + 1) * dim + i] = src[i][0];
            a[(n + 2) * dim + i] = src[i][1];
        }
        let mut bx = vec![0.0f64; dim];
        let mut by = vec![0.0f64; dim];
        for i in 0..n {
            bx[i] = dst[i][0];
            by[i] = dst[i][1];
        }
        let wx = solve(a.clone(), bx)?;
        let wy = solve(a, by)?;
        Ok(TpsTransform {
            ctrl: src.to_vec(),
            wx,
            wy,
            identity: false,
        })
    }

    /// Evaluate the mapping at a point.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        if self.identity {
            return (x, y);
        }
        let n = self.ctrl.len();
        let mut ox = self.wx[n] + self.wx[n + 1] * x + self.wx[n + 2] * y;
        let mut oy = self.wy[n] + self.wy[n + 1] * x + self.wy[n + 2] * y;
        for (i, c) in self.ctrl.iter().enumerate() {
            let dx = x - c[0];
            let dy = y - c[1];
            let phi = rbf(dx * dx + dy * dy);
            ox += self.wx[i] * phi;
            oy += self.wy[i] * phi;
        }
        (ox, oy)
    }

    /// Jacobian determinant by central differences.
    fn jacobian_det(&self, x: f64, y: f64, eps: f64) -> f64 {
        let (xp, yp) = self.apply(x + eps, y);
        let (xm, ym) = self.apply(x - eps, y);
        let (xq, yq) = self.apply(x, y + eps);
        let (xr, yr) = self.apply(x, y - eps);
        let dxdx = (xp - xm) / (2.0 * eps);
        let dydx = (yp - ym) / (2.0 * eps);
        let dxdy = (xq - xr) / (2.0 * eps);
        let dydy = (yq - yr) / (2.0 * eps);
        dxdx * dydy - dxdy * dydx
    }
}

/// Draw a random TPS for a `w x h` image. Degenerate draws (non-positive
/// Jacobian at any control point) are resampled up to 10 times.
pub fn sample_tps(
    rng: &mut ChaCha8Rng,
    cfg: &TpsConfig,
    w: usize,
    h: usize,
) -> Result<TpsTransform> {
    if cfg.jitter_frac == 0.0
        && cfg.rot_max_deg == 0.0
        && cfg.scale_amp == 0.0
        && cfg.trans_frac == 0.0
    {
        return Ok(TpsTransform::identity());
    }
    let size = w.min(h) as f64;
    for _try in 0..10 {
        let g = cfg.grid.max(2);
        let mut src = Vec::with_capacity(g * g);
        for gy in 0..g {
            for gx in 0..g {
                src.push([
                    gx as f64 * (w - 1) as f64 / (g - 1) as f64,
                    gy as f64 * (h - 1) as f64 / (g - 1) as f64,
                ]);
            }
        }
        let theta = rng.gen_range(-1.0..1.0) * cfg.rot_max_deg.to_radians();
        let scale = 1.0 + rng.gen_range(-1.0..1.0) * cfg.scale_amp;
        let tx = rng.gen_range(-1.0..1.0) * cfg.trans_frac * size;
        let ty = rng.gen_range(-1.0..1.0) * cfg.trans_frac * size;
        let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
        let (cos, sin) = (theta.cos(), theta.sin());
        let jitter_std = cfg.jitter_frac * size;
        let dst: Vec<[f64; 2]> = src
            .iter()
            .map(|&[x, y]| {
                let jx: f64 = StandardNormal.sample(rng);
                let jy: f64 = StandardNormal.sample(rng);
                let rx = (x - cx) * scale;
                let ry = (y - cy) * scale;
                [
                    cx + cos * rx - sin * ry + tx + jx * jitter_std,
                    cy + sin * rx + cos * ry + ty + jy * jitter_std,
                ]
            })
            .collect();
        let t = TpsTransform::fit(&src, &dst)?;
        let ok = src.iter().all(|&[x, y]| t.jacobian_det(x, y, 0.5) > 0.0);
        if ok {
            return Ok(t);
        }
    }
    Err(TuskError::DegenerateWarp(10))
}

/// Precompute the sampling grid and validity mask of `t` over `w x h`.
pub fn warp_grid(t: &TpsTransform, w: usize, h: usize) -> WarpGrid {
    let mut sx = vec![0.0f64; h * w];
    let mut sy = vec![0.0f64; h * w];
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if t.is_identity() {
                sx[p] = x as f64;
                sy[p] = y as f64;
                valid[p] = true;
                continue;
            }
            let (ox, oy) = t.apply(x as f64, y as f64);
            sx[p] = ox;
            sy[p] = oy;
            // epsilon absorbs the solver's ~1e-9 bias so exact-boundary
            // samples stay valid
            let eps = 1e-6;
            valid[p] = ox >= -eps
                && oy >= -eps
                && ox <= (w - 1) as f64 + eps
                && oy <= (h - 1) as f64 + eps;
        }
    }
    WarpGrid { h, w, sx, sy, valid }
}

/// Resample a plain tensor map through a transform (for images outside the
/// graph). Identity transforms copy exactly.
pub fn warp_tensor<T: Scalar>(map: &Tensor<T>, grid: &WarpGrid) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.input(map.clone());
    let out = g.warp(v, Arc::new(grid.clone()))?;
    Ok(g.value(out).clone())
}

/// Equivariance penalty of Eq-style `E(T(I)) vs T(E(I))`, as two masked mean
/// squared differences: one for the scoremap, one for the feature map. The
/// caller weights them separately.
pub fn eqv_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    enc: &Encoder,
    vars: &ParamVars,
    image: Var,
    s_plain: Var,
    f_plain: Var,
    grid: &Arc<WarpGrid>,
) -> Result<(Var, Var)> {
    let image_t = g.warp(image, grid.clone())?;
    let (s_t, f_t) = enc.encode(g, vars, image_t)?;
    let s_w = g.warp(s_plain, grid.clone())?;
    let f_w = g.warp(f_plain, grid.clone())?;
    let mask = Arc::new(grid.valid.clone());
    let loss_s = g.masked_mse(s_t, s_w, mask.clone())?;
    let loss_f = g.masked_mse(f_t, f_w, mask)?;
    Ok((loss_s, loss_f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_magnitudes_give_exact_identity() {
        let cfg = TpsConfig {
            grid: 5,
            jitter_frac: 0.0,
            rot_max_deg: 0.0,
            scale_amp: 0.0,
            trans_frac: 0.0,
        };
        let mut r = rng::derive(0, "tps", &[]);
        let t = sample_tps(&mut r, &cfg, 16, 16).unwrap();
        assert!(t.is_identity());
        let grid = warp_grid(&t, 16, 16);
        assert!(grid.valid.iter().all(|&v| v));
        let map = Tensor::<f32>::from_f64_slice(
            &[16, 16],
            &(0..256).map(|i| i as f64 / 255.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let warped = warp_tensor(&map, &grid).unwrap();
        assert_eq!(map.data(), warped.data());
    }

    #[test]
    fn pure_translation_shifts_and_masks() {
        // control points displaced by (+2, 0): every pixel samples 2 px to
        // the right, so the rightmost 2 columns become invalid.
        let (w, h) = (8usize, 6usize);
        let g = 4usize;
        let mut src = Vec::new();
        for gy in 0..g {
            for gx in 0..g {
                src.push([
                    gx as f64 * (w - 1) as f64 / (g - 1) as f64,
                    gy as f64 * (h - 1) as f64 / (g - 1) as f64,
                ]);
            }
        }
        let dst: Vec<[f64; 2]> = src.iter().map(|&[x, y]| [x + 2.0, y]).collect();
        let t = TpsTransform::fit(&src, &dst).unwrap();
        let grid = warp_grid(&t, w, h);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                assert_eq!(grid.valid[p], x + 2 <= w - 1, "pixel ({x},{y})");
                if grid.valid[p] {
                    assert!((grid.sx[p] - (x as f64 + 2.0)).abs() < 1e-6);
                    assert!((grid.sy[p] - y as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_transform() {
        let cfg = TpsConfig::default();
        let mut r1 = rng::derive(11, "tps", &[4]);
        let mut r2 = rng::derive(11, "tps", &[4]);
        let t1 = sample_tps(&mut r1, &cfg, 32, 32).unwrap();
        let t2 = sample_tps(&mut r2, &cfg, 32, 32).unwrap();
        for p in [(3.2, 4.5), (20.0, 11.0), (31.0, 0.0)] {
            let a = t1.apply(p.0, p.1);
            let b = t2.apply(p.0, p.1);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn translate_then_inverse_recovers_on_joint_valid_region() {
        let (w, h) = (12usize, 12usize);
        let g = 4usize;
        let mut src = Vec::new();
        for gy in 0..g {
            for gx in 0..g {
                src.push([
                    gx as f64 * (w - 1) as f64 / (g - 1) as f64,
                    gy as f64 * (h - 1) as f64 / (g - 1) as f64,
                ]);
            }
        }
        let fwd: Vec<[f64; 2]> = src.iter().map(|&[x, y]| [x + 3.0, y + 1.0]).collect();
        let bwd: Vec<[f64; 2]> = src.iter().map(|&[x, y]| [x - 3.0, y - 1.0]).collect();
        let tf = TpsTransform::fit(&src, &fwd).unwrap();
        let tb = TpsTransform::fit(&src, &bwd).unwrap();
        let gf = warp_grid(&tf, w, h);
        let gb = warp_grid(&tb, w, h);
        let data: Vec<f64> = (0..w * h).map(|i| (i % 17) as f64 / 16.0).collect();
        let map = Tensor::<f64>::from_f64_slice(&[h, w], &data).unwrap();
        let once = warp_tensor(&map, &gf).unwrap();
        let back = warp_tensor(&once, &gb).unwrap();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                // jointly valid: sampling x-3 must be valid in `back`, and the
                // intermediate sample (x-3)+3 valid in `once`'s own read.
                if x >= 3 && x + 3 <= w - 1 && y >= 1 && y + 1 <= h - 1 {
                    let diff = (back.data()[p] - map.data()[p]).abs();
                    assert!(diff < 1e-5, "({x},{y}): {diff}");
                }
            }
        }
    }
}
