//! Sparse-to-dense reconstruction: Gaussian splatting of descriptors at
//! keypoint locations, then a U-Net back to image space. Two modes:
//! a score-weighted sum of the splat maps ("sum"), or one RGBA render per
//! keypoint composited by alpha blending ("rgba") so per-object masks fall
//! out of the alpha channels.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Scalar, Tensor, Var};
use crate::error::Result;
use crate::nn::{ParamStore, ParamVars, UNet, UNetConfig};

/// Reconstruction mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplatMode {
    Sum,
    Rgba,
}

/// Splat geometry: blob std-dev in pixels; the kernel is truncated past
/// `3 sigma` (see `Graph::splat`).
#[derive(Clone, Copy, Debug)]
pub struct SplatConfig {
    pub sigma: f64,
    pub mode: SplatMode,
}

/// U-Net mirror of the encoder; input C channels, output 3 (`sum`) or
/// 4 (`rgba`) channels through a final sigmoid.
pub struct Decoder {
    net: UNet,
    pub mode: SplatMode,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        feat_ch: usize,
        base: usize,
        depth: usize,
        mode: SplatMode,
        fast: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let out_ch = match mode {
            SplatMode::Sum => 3,
            SplatMode::Rgba => 4,
        };
        let net = UNet::new(
            store,
            &UNetConfig {
                heads: vec![("rgb".into(), out_ch)],
                // splat maps are smooth; a 1x1 stem costs a fraction
                stem_kernel: if fast { 1 } else { 3 },
                full_res_1x1: fast,
                ..UNetConfig::new("dec", feat_ch, base, depth)
            },
            rng,
        )?;
        Ok(Decoder { net, mode })
    }

    /// `sum` mode: decode an aggregated feature map to an image in [0,1].
    pub fn decode_sum<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        featmap: Var,
    ) -> Result<Var> {
        let outs = self.net.forward(g, vars, featmap)?;
        Ok(g.sigmoid(outs[0]))
    }

    /// `rgba` mode: decode each keypoint's (score-weighted) splat map to an
    /// RGBA layer; returns `(K, H, W, 4)` in [0,1].
    pub fn decode_rgba<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        splats: Var,
        scores: Var,
    ) -> Result<Var> {
        let k = g.value(splats).shape()[0];
        let mut layers = Vec::with_capacity(k);
        for i in 0..k {
            let r_i = g.index_k(splats, i)?;
            let s_i = g.index_k(scores, i)?;
            let weighted = g.mul_scalar(r_i, s_i)?;
            let outs = self.net.forward(g, vars, weighted)?;
            layers.push(outs[0]);
        }
        let stacked = g.stack0(&layers)?;
        Ok(g.sigmoid(stacked))
    }
}

/// Alpha-blend `(K, H, W, 4)` layers: per-pixel softmax over the K raw alpha
/// channels weights the RGB layers. Returns the blended `(H, W, 3)` image.
pub fn alpha_blend<T: Scalar>(g: &mut Graph<T>, rgba: Var) -> Result<Var> {
    let rgb = g.slice_last(rgba, 0, 3)?; // (K, H, W, 3)
    let alpha = g.slice_last(rgba, 3, 1)?; // (K, H, W, 1)
    let alpha = g.squeeze_last(alpha)?; // (K, H, W)
    let weights = g.softmax_axis(alpha, 0)?; // normalized over K
    let weights3 = g.expand_last(weights, 3)?; // (K, H, W, 3)
    let weighted = g.mul(rgb, weights3)?;
    g.sum_axis0(weighted) // (H, W, 3)
}

/// Per-pixel instance labels from raw (pre-softmax) alphas: `argmax_k`, or
/// `background` (label 0) where the max alpha falls below the threshold.
/// Returns labels in `{0} + {1..=K}`.
pub fn masks_from_alpha<T: Scalar>(rgba: &Tensor<T>, bg_threshold: f64) -> Vec<u32> {
    let s = rgba.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    let d = rgba.data();
    let mut labels = vec![0u32; h * w];
    for p in 0..h * w {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for i in 0..k {
            let v = d[((i * h * w) + p) * 4 + 3].to_f64();
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        if best_v >= bg_threshold {
            labels[p] = (best + 1) as u32;
        }
    }
    labels
}
