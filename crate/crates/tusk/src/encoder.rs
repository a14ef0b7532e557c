//! Image -> (scoremap, feature map) -> K sub-pixel keypoints with
//! descriptors. Detection runs on a single heatmap so any number of
//! instances of the same thing can be picked up.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Scalar, Tensor, Var};
use crate::error::Result;
use crate::nn::{bind_params, ParamStore, ParamVars, UNet, UNetConfig};

/// Encoder sizing. Output spatial dims always equal the input's.
#[derive(Clone, Debug)]
pub struct EncoderConfig {
    /// Descriptor channels (C).
    pub feat_ch: usize,
    pub base: usize,
    pub depth: usize,
    /// 1x1 convs on the top up level (see `UNetConfig::full_res_1x1`).
    pub full_res_1x1: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feat_ch: 32,
            base: 32,
            depth: 3,
            full_res_1x1: false,
        }
    }
}

/// U-Net with a 1-channel heatmap head (sigmoid applied in `encode`) and a
/// C-channel linear feature head.
pub struct Encoder {
    net: UNet,
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let net = UNet::new(
            store,
            &UNetConfig {
                heads: vec![("heat".into(), 1), ("feat".into(), cfg.feat_ch)],
                full_res_1x1: cfg.full_res_1x1,
                ..UNetConfig::new("enc", 3, cfg.base, cfg.depth)
            },
            rng,
        )?;
        Ok(Encoder { net, cfg })
    }

    /// Forward pass: scoremap `S in [0,1]^(H,W)` and feature map
    /// `F in R^(H,W,C)`.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        image: Var,
    ) -> Result<(Var, Var)> {
        let outs = self.net.forward(g, vars, image)?;
        let logits = g.squeeze_last(outs[0])?;
        let s = g.sigmoid(logits);
        Ok((s, outs[1]))
    }
}

/// Integer keypoint candidates with scores, sorted by descending score.
pub struct Candidates {
    /// (x, y) integer locations.
    pub points: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
}

/// Non-maximum suppression: keep `S[p]` where it is the strict maximum of
/// its `window x window` neighbourhood (ties broken toward the lowest
/// row-major index), zero elsewhere.
pub fn nms<T: Scalar>(s: &Tensor<T>, window: usize) -> Tensor<T> {
    assert!(window >= 3 && window % 2 == 1, "window must be odd and >= 3");
    let (h, w) = (s.shape()[0], s.shape()[1]);
    let r = window / 2;
    let src = s.data();
    let mut out = Tensor::zeros(s.shape());
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let v = src[y * w + x];
            let idx = y * w + x;
            let mut keep = true;
            'scan: for ny in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for nx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    let nidx = ny * w + nx;
                    if nidx == idx {
                        continue;
                    }
                    let nv = src[nidx];
                    if nv > v || (nv == v && nidx < idx) {
                        keep = false;
                        break 'scan;
                    }
                }
            }
            if keep {
                dst[idx] = v;
            }
        }
    }
    out
}

/// Top-K locations of a (suppressed) scoremap, sorted by descending score,
/// ties toward the lowest row-major index. Always returns exactly K entries,
/// padding from the remaining highest entries (including zeros).
pub fn topk<T: Scalar>(s: &Tensor<T>, k: usize) -> Candidates {
    let (h, w) = (s.shape()[0], s.shape()[1]);
    let src = s.data();
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| src[b].total_cmp(&src[a]).then(a.cmp(&b)));
    let mut points = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        points.push((idx % w, idx / w));
        scores.push(src[idx].to_f64());
    }
    Candidates { points, scores }
}

/// One image's extracted keypoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeypointSet {
    /// Sub-pixel (x, y) locations, score-descending order.
    pub points: Vec<[f32; 2]>,
    /// Detection scores in [0, 1], non-increasing.
    pub scores: Vec<f32>,
    /// K x C descriptors.
    pub descriptors: Vec<Vec<f32>>,
    /// Nearest-prototype ids; empty until assigned.
    #[serde(default)]
    pub prototype_ids: Vec<usize>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Graph nodes produced by the full extraction pipeline.
pub struct Extraction {
    pub scoremap: Var,
    pub featmap: Var,
    /// (K, 2) sub-pixel locations.
    pub locations: Var,
    /// (K,) scores at the integer candidates (differentiable w.r.t. S).
    pub scores: Var,
    /// (K, C) descriptors.
    pub descriptors: Var,
    pub centers: Vec<(usize, usize)>,
}

/// Extraction hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct ExtractConfig {
    pub k: usize,
    pub nms_window: usize,
    /// Soft-argmax kernel size B (odd).
    pub kernel: usize,
    pub tau: f64,
}

/// encode -> NMS -> top-K -> soft-argmax -> bilinear descriptor sampling,
/// all recorded on the graph (NMS/top-K pick integer candidates outside it).
pub fn extract_graph<T: Scalar>(
    g: &mut Graph<T>,
    enc: &Encoder,
    vars: &ParamVars,
    image: Var,
    cfg: &ExtractConfig,
) -> Result<Extraction> {
    let (s, f) = enc.encode(g, vars, image)?;
    let suppressed = nms(g.value(s), cfg.nms_window);
    let cand = topk(&suppressed, cfg.k);
    let centers = cand.points.clone();
    let scores = g.gather_pixels(s, centers.clone())?;
    let locations = g.soft_argmax(s, centers.clone(), cfg.kernel, cfg.tau)?;
    let descriptors = g.bilinear_sample(f, locations)?;
    Ok(Extraction {
        scoremap: s,
        featmap: f,
        locations,
        scores,
        descriptors,
        centers,
    })
}

/// Inference-only extraction to a plain [`KeypointSet`].
pub fn extract<T: Scalar>(
    enc: &Encoder,
    store: &ParamStore<T>,
    image: &Tensor<T>,
    cfg: &ExtractConfig,
) -> Result<KeypointSet> {
    let mut g = Graph::new();
    let vars = bind_params(&mut g, store, |_| false);
    let img = g.input(image.clone());
    let ex = extract_graph(&mut g, enc, &vars, img, cfg)?;
    let loc = g.value(ex.locations);
    let k = cfg.k;
    let points: Vec<[f32; 2]> = (0..k)
        .map(|i| {
            [
                loc.data()[2 * i].to_f64() as f32,
                loc.data()[2 * i + 1].to_f64() as f32,
            ]
        })
        .collect();
    let scores: Vec<f32> = g.value(ex.scores).data().iter().map(|v| v.to_f64() as f32).collect();
    let c = g.value(ex.descriptors).shape()[1];
    let dd = g.value(ex.descriptors).data();
    let descriptors: Vec<Vec<f32>> = (0..k)
        .map(|i| dd[i * c..(i + 1) * c].iter().map(|v| v.to_f64() as f32).collect())
        .collect();
    Ok(KeypointSet {
        points,
        scores,
        descriptors,
        prototype_ids: Vec::new(),
    })
}
