//! The full objective and the iterative schedule: one encoder/decoder step
//! on `recon + km + eqv`, then a run of prototype steps on the sliced
//! Wasserstein loss over the batch's (detached) descriptors.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datagen::Sample;
use crate::decoder::{alpha_blend, masks_from_alpha, Decoder, SplatMode};
use crate::diff::{Graph, Tensor, Var};
use crate::encoder::{extract_graph, Encoder, EncoderConfig, ExtractConfig, KeypointSet};
use crate::error::{Result, TuskError};
use crate::evalmetrics::{self, ClassifySample};
use crate::nn::{bind_params, Adam, ParamId, ParamStore};
use crate::par;
use crate::prototypes::{
    self, allocate_counts, gmm_indices, kmeans_only_loss_graph, mixture_weights, sw_loss_graph,
    vq_substitute, PrototypeBank,
};
use crate::rng;
use crate::transforms::{eqv_loss_graph, sample_tps, warp_grid, TpsConfig};

/// Which loss drives the prototype updates (the clustering-strategy
/// ablation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMode {
    Sw,
    Kmeans,
    Vq,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Keypoints per image.
    pub k: usize,
    /// Prototypes.
    pub m: usize,
    /// Descriptor channels.
    pub feat_ch: usize,
    pub base_width: usize,
    pub depth: usize,
    /// Cheap full-resolution policy: 1x1 convs on both nets' top up level
    /// and a 1x1 decoder stem.
    pub fast_unet: bool,
    pub decoder_mode: SplatMode,
    pub nms_window: usize,
    pub softargmax_kernel: usize,
    pub tau: f64,
    pub sigma_splat: f64,
    pub coef_recon: f64,
    pub coef_km: f64,
    pub coef_eqv_heat: f64,
    pub coef_eqv_feat: f64,
    pub coef_sw: f64,
    pub sigma_gmm: f64,
    pub n_proj: usize,
    pub proto_steps_per_main: usize,
    /// Alternate enc/dec and prototype updates; `false` is the single-stage
    /// ablation (everything optimized jointly each step).
    pub iterative: bool,
    pub enable_sw: bool,
    pub enable_km: bool,
    pub enable_eqv: bool,
    pub cluster_mode: ClusterMode,
    pub lr_encdec: f64,
    pub lr_proto: f64,
    pub save_every: usize,
    pub early_stop: bool,
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
    pub score_threshold: f64,
    pub tps: TpsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 10_000,
            batch_size: 8,
            k: 9,
            m: 10,
            feat_ch: 32,
            base_width: 32,
            depth: 3,
            fast_unet: false,
            decoder_mode: SplatMode::Sum,
            nms_window: 13,
            softargmax_kernel: 13,
            tau: 0.1,
            sigma_splat: 13.0 / 4.0,
            coef_recon: 1.0,
            coef_km: 0.01,
            coef_eqv_heat: 0.01,
            coef_eqv_feat: 100.0,
            coef_sw: 1.0,
            sigma_gmm: 4e-4,
            n_proj: 64,
            proto_steps_per_main: 8,
            iterative: true,
            enable_sw: true,
            enable_km: true,
            enable_eqv: true,
            cluster_mode: ClusterMode::Sw,
            lr_encdec: 1e-3,
            lr_proto: 0.1,
            save_every: 1000,
            early_stop: true,
            early_stop_window: 1000,
            early_stop_tol: 1e-3,
            score_threshold: 0.5,
            tps: TpsConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn extract_config(&self) -> ExtractConfig {
        ExtractConfig {
            k: self.k,
            nms_window: self.nms_window,
            kernel: self.softargmax_kernel,
            tau: self.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.proto_steps_per_main < 1 {
            return Err(TuskError::Config("proto_steps_per_main must be >= 1".into()));
        }
        for (name, v) in [
            ("coef_recon", self.coef_recon),
            ("coef_km", self.coef_km),
            ("coef_eqv_heat", self.coef_eqv_heat),
            ("coef_eqv_feat", self.coef_eqv_feat),
            ("coef_sw", self.coef_sw),
        ] {
            if v < 0.0 {
                return Err(TuskError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.softargmax_kernel % 2 == 0 || self.nms_window % 2 == 0 {
            return Err(TuskError::Config(
                "softargmax_kernel and nms_window must be odd".into(),
            ));
        }
        Ok(())
    }
}

/// Raw (pre-weighting) loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub km: f64,
    pub eqv_h: f64,
    pub eqv_f: f64,
    pub sw: f64,
    pub total: f64,
}

/// Encoder + decoder + prototype bank with their parameter store.
pub struct Model {
    pub store: ParamStore<f32>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub bank: PrototypeBank,
    pub cfg: TrainConfig,
}

impl Model {
    pub fn new(cfg: TrainConfig) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init_rng = rng::derive(cfg.seed, "init", &[]);
        let encoder = Encoder::new(
            &mut store,
            EncoderConfig {
                feat_ch: cfg.feat_ch,
                base: cfg.base_width,
                depth: cfg.depth,
                full_res_1x1: cfg.fast_unet,
            },
            &mut init_rng,
        )?;
        let decoder = Decoder::new(
            &mut store,
            cfg.feat_ch,
            cfg.base_width,
            cfg.depth,
            cfg.decoder_mode,
            cfg.fast_unet,
            &mut init_rng,
        )?;
        let bank = PrototypeBank::new(&mut store, cfg.m, cfg.feat_ch, cfg.sigma_gmm, &mut init_rng)?;
        Ok(Model {
            store,
            encoder,
            decoder,
            bank,
            cfg,
        })
    }

    pub fn prototypes(&self) -> &Tensor<f32> {
        self.store.value(self.bank.param)
    }

    /// Inference on one image.
    pub fn infer(&self, image: &Tensor<f32>) -> Result<InferOutput> {
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &self.store, |_| false);
        let img = g.input(image.clone());
        let ex = extract_graph(&mut g, &self.encoder, &vars, img, &self.cfg.extract_config())?;
        let h = image.shape()[0];
        let w = image.shape()[1];
        let splats = g.splat(ex.locations, ex.descriptors, h, w, self.cfg.sigma_splat)?;
        let (recon, rgba) = match self.decoder.mode {
            SplatMode::Sum => {
                let fm = g.weighted_sum_k(splats, ex.scores)?;
                (self.decoder.decode_sum(&mut g, &vars, fm)?, None)
            }
            SplatMode::Rgba => {
                let layers = self.decoder.decode_rgba(&mut g, &vars, splats, ex.scores)?;
                let blended = alpha_blend(&mut g, layers)?;
                (blended, Some(g.value(layers).clone()))
            }
        };
        let loc = g.value(ex.locations);
        let points: Vec<[f32; 2]> = (0..self.cfg.k)
            .map(|i| [loc.data()[2 * i], loc.data()[2 * i + 1]])
            .collect();
        let scores: Vec<f32> = g.value(ex.scores).data().to_vec();
        let c = self.cfg.feat_ch;
        let dd = g.value(ex.descriptors).data();
        let descriptors: Vec<Vec<f32>> = (0..self.cfg.k)
            .map(|i| dd[i * c..(i + 1) * c].to_vec())
            .collect();
        let proto_ids = prototypes::assign(g.value(ex.descriptors), self.prototypes());
        Ok(InferOutput {
            keypoints: KeypointSet {
                points,
                scores,
                descriptors,
                prototype_ids: proto_ids,
            },
            scoremap: g.value(ex.scoremap).clone(),
            reconstruction: g.value(recon).clone(),
            rgba,
        })
    }
}

pub struct InferOutput {
    pub keypoints: KeypointSet,
    pub scoremap: Tensor<f32>,
    pub reconstruction: Tensor<f32>,
    /// `(K, H, W, 4)` per-keypoint renders, rgba mode only.
    pub rgba: Option<Tensor<f32>>,
}

struct SampleStepOutput {
    losses: LossBreakdown,
    grads: Vec<(ParamId, Tensor<f32>)>,
    descriptors: Tensor<f32>,
}

/// Training driver: owns the model, optimizer state and the step counter.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam<f32>,
    pub step: usize,
    encdec_ids: Vec<ParamId>,
    history: VecDeque<f64>,
}

/// One CSV row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub main: Option<LossBreakdown>,
    pub sw: Option<f64>,
    pub wall_ms: f64,
}

pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| TuskError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| TuskError::io(path, e);
        writeln!(w, "step,l_recon,l_km,l_eqv_h,l_eqv_f,l_sw,wall_ms").map_err(io_err)?;
        for r in &self.rows {
            match (&r.main, r.sw) {
                (Some(m), _) => writeln!(
                    w,
                    "{},{:.6e},{:.6e},{:.6e},{:.6e},{},{:.3}",
                    r.step,
                    m.recon,
                    m.km,
                    m.eqv_h,
                    m.eqv_f,
                    if m.sw != 0.0 { format!("{:.6e}", m.sw) } else { String::new() },
                    r.wall_ms
                )
                .map_err(io_err)?,
                (None, Some(sw)) => {
                    writeln!(w, "{},,,,,{:.6e},{:.3}", r.step, sw, r.wall_ms).map_err(io_err)?
                }
                (None, None) => {}
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }
}

impl Trainer {
    pub fn new(model: Model) -> Trainer {
        let adam = Adam::new(&model.store);
        let mut encdec_ids = model.store.ids_with_prefix("enc.");
        encdec_ids.extend(model.store.ids_with_prefix("dec."));
        Trainer {
            model,
            adam,
            step: 0,
            encdec_ids,
            history: VecDeque::new(),
        }
    }

    /// Restore parameters, optimizer moments and the step counter.
    pub fn resume(&mut self, ckpt: &Path) -> Result<()> {
        self.step = checkpoint::load_train_state(ckpt, &mut self.model.store, &mut self.adam)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_train_state(path, self.step, &self.model.store, &self.adam)
    }

    fn proto_trainable(&self) -> bool {
        self.model.cfg.enable_sw
    }

    /// One optimizer update of the encoder/decoder (and, in single-stage
    /// mode, the prototypes) on a batch. Returns the mean loss terms and the
    /// batch's pooled descriptors, detached.
    pub fn main_step(&mut self, batch: &[&Sample]) -> Result<(LossBreakdown, Tensor<f32>)> {
        let cfg = self.model.cfg.clone();
        let model = &self.model;
        let step = self.step;
        let single_stage_sw = !cfg.iterative && cfg.enable_sw;

        let outputs: Vec<Result<SampleStepOutput>> = par::map_range(batch.len(), |i| {
            sample_step(model, batch[i], step, i, single_stage_sw)
        });

        let mut mean = LossBreakdown::default();
        let mut grad_acc: Vec<Option<Tensor<f32>>> = vec![None; self.model.store.len()];
        let mut desc_all: Vec<f32> = Vec::new();
        let b = batch.len() as f64;
        for out in outputs {
            let out = out?;
            mean.recon += out.losses.recon / b;
            mean.km += out.losses.km / b;
            mean.eqv_h += out.losses.eqv_h / b;
            mean.eqv_f += out.losses.eqv_f / b;
            mean.sw += out.losses.sw / b;
            mean.total += out.losses.total / b;
            for (id, g) in out.grads {
                match &mut grad_acc[id.0] {
                    Some(t) => t.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            desc_all.extend_from_slice(out.descriptors.data());
        }
        for (term, v) in [
            ("recon", mean.recon),
            ("km", mean.km),
            ("eqv_heatmap", mean.eqv_h),
            ("eqv_featmap", mean.eqv_f),
            ("sw", mean.sw),
        ] {
            if !v.is_finite() {
                return Err(TuskError::NonFiniteLoss { term, step });
            }
        }

        let scale = 1.0 / b as f32;
        let mut encdec_updates = Vec::new();
        let mut proto_updates = Vec::new();
        for id in &self.encdec_ids {
            if let Some(mut g) = grad_acc[id.0].take() {
                g.scale_assign(scale);
                encdec_updates.push((*id, g));
            }
        }
        if let Some(mut g) = grad_acc[self.model.bank.param.0].take() {
            g.scale_assign(scale);
            proto_updates.push((self.model.bank.param, g));
        }
        self.adam.step(&mut self.model.store, &encdec_updates, cfg.lr_encdec);
        if !proto_updates.is_empty() {
            self.adam.step(&mut self.model.store, &proto_updates, cfg.lr_proto);
        }

        let n_desc = desc_all.len() / cfg.feat_ch;
        let descriptors = Tensor::new(vec![n_desc, cfg.feat_ch], desc_all)?;
        Ok((mean, descriptors))
    }

    /// One prototype update against the detached descriptor buffer.
    /// `sub_step` indexes the run of prototype steps within this main step.
    pub fn proto_step(&mut self, descriptors: &Tensor<f32>, sub_step: usize) -> Result<f64> {
        let cfg = &self.model.cfg;
        let n = descriptors.shape()[0];
        let p_val = self.model.prototypes().clone();
        let mut g: Graph<f32> = Graph::new();
        let p_var = g.param(p_val.clone());
        let d_var = g.input(descriptors.clone());
        let loss = match cfg.cluster_mode {
            ClusterMode::Sw => {
                let mw = mixture_weights(descriptors, &p_val);
                let idx = gmm_indices(&allocate_counts(&mw.pi, n));
                let mut noise_rng =
                    rng::derive(cfg.seed, "gmm_noise", &[self.step as u64, sub_step as u64]);
                let std = cfg.sigma_gmm.sqrt();
                let noise: Vec<f32> = (0..n * cfg.feat_ch)
                    .map(|_| {
                        let z: f64 = rand_distr::Distribution::sample(
                            &rand_distr::StandardNormal,
                            &mut noise_rng,
                        );
                        (std * z) as f32
                    })
                    .collect();
                let centers = g.gather_rows(p_var, idx)?;
                let noise_var = g.input(Tensor::new(vec![n, cfg.feat_ch], noise)?);
                let samples = g.add(centers, noise_var)?;
                let mut proj_rng =
                    rng::derive(cfg.seed, "proj", &[self.step as u64, sub_step as u64]);
                let proj = prototypes::projections::<f32>(cfg.feat_ch, cfg.n_proj, &mut proj_rng);
                sw_loss_graph(&mut g, d_var, samples, &proj)?
            }
            ClusterMode::Kmeans | ClusterMode::Vq => kmeans_only_loss_graph(&mut g, d_var, p_var)?,
        };
        let loss_val = g.value(loss).item() as f64;
        if !loss_val.is_finite() {
            return Err(TuskError::NonFiniteLoss {
                term: "sw",
                step: self.step,
            });
        }
        let mut grads = g.backward(loss)?;
        if let Some(grad) = grads.take(p_var) {
            self.adam.step(
                &mut self.model.store,
                &[(self.model.bank.param, grad)],
                self.model.cfg.lr_proto,
            );
        }
        Ok(loss_val)
    }

    fn should_stop(&mut self, total: f64) -> bool {
        let cfg = &self.model.cfg;
        if !cfg.early_stop {
            return false;
        }
        self.history.push_back(total);
        let w = cfg.early_stop_window;
        if self.history.len() < 2 * w {
            return false;
        }
        while self.history.len() > 2 * w {
            self.history.pop_front();
        }
        let prev: f64 = self.history.iter().take(w).sum::<f64>() / w as f64;
        let cur: f64 = self.history.iter().skip(w).sum::<f64>() / w as f64;
        prev.abs() > 0.0 && (prev - cur) / prev.abs() < cfg.early_stop_tol
    }

    /// Run the iterative schedule over a dataset. Checkpoints land in
    /// `out_dir` (when given) every `save_every` main steps and at the end.
    pub fn train(&mut self, dataset: &[Sample], out_dir: Option<&Path>) -> Result<TrainLog> {
        if dataset.is_empty() {
            return Err(TuskError::Config("empty training dataset".into()));
        }
        let cfg = self.model.cfg.clone();
        let mut rows = Vec::new();
        let started = self.step;
        for step in started..cfg.steps {
            self.step = step;
            let t0 = Instant::now();
            let mut batch_rng = rng::derive(cfg.seed, "batch", &[step as u64]);
            let batch: Vec<&Sample> = (0..cfg.batch_size)
                .map(|_| &dataset[batch_rng.gen_range(0..dataset.len())])
                .collect();
            let (losses, descriptors) = self.main_step(&batch)?;
            rows.push(LogRow {
                step,
                main: Some(losses),
                sw: None,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            if cfg.iterative && self.proto_trainable() {
                for j in 0..cfg.proto_steps_per_main {
                    let tp = Instant::now();
                    let sw = self.proto_step(&descriptors, j)?;
                    rows.push(LogRow {
                        step,
                        main: None,
                        sw: Some(sw),
                        wall_ms: tp.elapsed().as_secs_f64() * 1e3,
                    });
                }
            }
            if let Some(dir) = out_dir {
                if cfg.save_every > 0 && (step + 1) % cfg.save_every == 0 {
                    self.step = step + 1;
                    self.save(&dir.join(format!("ckpt_{:06}.tusk", step + 1)))?;
                    self.step = step;
                }
            }
            if self.should_stop(losses.total) {
                self.step = step + 1;
                break;
            }
            self.step = step + 1;
        }
        if let Some(dir) = out_dir {
            self.save(&dir.join("ckpt_final.tusk"))?;
        }
        Ok(TrainLog { rows })
    }
}

/// Forward/backward for one sample; pure w.r.t. the model.
fn sample_step(
    model: &Model,
    sample: &Sample,
    step: usize,
    index: usize,
    single_stage_sw: bool,
) -> Result<SampleStepOutput> {
    let cfg = &model.cfg;
    let mut g: Graph<f32> = Graph::new();
    let trainable: Box<dyn Fn(&str) -> bool> = if cfg.iterative {
        Box::new(|name: &str| name.starts_with("enc.") || name.starts_with("dec."))
    } else {
        Box::new(|_: &str| true)
    };
    let vars = bind_params(&mut g, &model.store, |n| trainable(n));
    let image = g.input(sample.image.clone());
    let ex = extract_graph(&mut g, &model.encoder, &vars, image, &cfg.extract_config())?;
    let (h, w) = (sample.height, sample.width);

    // descriptors fed to the decoder; VQ ablation substitutes codes
    let p_var = vars.var(model.bank.param);
    let dec_desc = if cfg.cluster_mode == ClusterMode::Vq {
        vq_substitute(&mut g, ex.descriptors, p_var)?
    } else {
        ex.descriptors
    };

    let splats = g.splat(ex.locations, dec_desc, h, w, cfg.sigma_splat)?;
    let recon_img = match model.decoder.mode {
        SplatMode::Sum => {
            let fm = g.weighted_sum_k(splats, ex.scores)?;
            model.decoder.decode_sum(&mut g, &vars, fm)?
        }
        SplatMode::Rgba => {
            let layers = model.decoder.decode_rgba(&mut g, &vars, splats, ex.scores)?;
            alpha_blend(&mut g, layers)?
        }
    };
    let diff = g.sub(recon_img, image)?;
    let sq = g.mul(diff, diff)?;
    let recon = g.mean_all(sq);

    let mut terms: Vec<(Var, f64)> = vec![(recon, cfg.coef_recon)];
    let mut breakdown = LossBreakdown {
        recon: g.value(recon).item() as f64,
        ..Default::default()
    };

    if cfg.enable_km {
        let km = prototypes::kmeans_loss_graph(&mut g, ex.descriptors, p_var)?;
        breakdown.km = g.value(km).item() as f64;
        terms.push((km, cfg.coef_km));
    }
    if cfg.cluster_mode == ClusterMode::Vq {
        // commitment term of the VQ objective (codes train in proto steps)
        let nearest_idx = prototypes::assign(g.value(ex.descriptors), g.value(p_var));
        let nearest = g.gather_rows(p_var, nearest_idx)?;
        let nearest_const = g.input(g.value(nearest).clone());
        let cdiff = g.sub(ex.descriptors, nearest_const)?;
        let csq = g.mul(cdiff, cdiff)?;
        let cm = g.sum_all(csq);
        let n_desc = g.value(ex.descriptors).shape()[0] as f64;
        let cm = g.scale(cm, 0.25 / n_desc);
        terms.push((cm, cfg.coef_km.max(1e-3)));
    }
    if cfg.enable_eqv {
        let mut tps_rng = rng::derive(cfg.seed, "tps", &[step as u64, index as u64]);
        let t = sample_tps(&mut tps_rng, &cfg.tps, w, h)?;
        let grid = Arc::new(warp_grid(&t, w, h));
        let (eh, ef) = eqv_loss_graph(
            &mut g,
            &model.encoder,
            &vars,
            image,
            ex.scoremap,
            ex.featmap,
            &grid,
        )?;
        breakdown.eqv_h = g.value(eh).item() as f64;
        breakdown.eqv_f = g.value(ef).item() as f64;
        terms.push((eh, cfg.coef_eqv_heat));
        terms.push((ef, cfg.coef_eqv_feat));
    }
    if single_stage_sw && cfg.cluster_mode == ClusterMode::Sw {
        let d_val = g.value(ex.descriptors).clone();
        let p_val = g.value(p_var).clone();
        let mw = mixture_weights(&d_val, &p_val);
        let n = d_val.shape()[0];
        let idx = gmm_indices(&allocate_counts(&mw.pi, n));
        let mut noise_rng = rng::derive(cfg.seed, "sw_ss", &[step as u64, index as u64]);
        let std = cfg.sigma_gmm.sqrt();
        let noise: Vec<f32> = (0..n * cfg.feat_ch)
            .map(|_| {
                let z: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut noise_rng);
                (std * z) as f32
            })
            .collect();
        let centers = g.gather_rows(p_var, idx)?;
        let noise_var = g.input(Tensor::new(vec![n, cfg.feat_ch], noise)?);
        let samples = g.add(centers, noise_var)?;
        let proj = prototypes::projections::<f32>(cfg.feat_ch, cfg.n_proj, &mut noise_rng);
        let sw = sw_loss_graph(&mut g, ex.descriptors, samples, &proj)?;
        breakdown.sw = g.value(sw).item() as f64;
        terms.push((sw, cfg.coef_sw));
    }

    // weighted sum of the enabled terms
    let mut total = g.scale(terms[0].0, terms[0].1);
    for &(v, c) in &terms[1..] {
        let scaled = g.scale(v, c);
        total = g.add(total, scaled)?;
    }
    breakdown.total = g.value(total).item() as f64;

    let mut grads = g.backward(total)?;
    let mut out_grads = Vec::new();
    for (id, p) in model.store.iter() {
        if trainable(&p.name) {
            if let Some(grad) = grads.take(vars.var(id)) {
                out_grads.push((id, grad));
            }
        }
    }
    Ok(SampleStepOutput {
        losses: breakdown,
        grads: out_grads,
        descriptors: g.value(ex.descriptors).clone(),
    })
}

// ---- evaluation -----------------------------------------------------------

/// Evaluation report, serialized by `tusk eval`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
    pub localization: f64,
    pub classification: f64,
    pub both: f64,
    pub per_prototype_occupancy: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reverse_consistency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub landmark_px_error: Option<f64>,
    pub n_samples: usize,
}

/// Evaluation knobs (box size follows the detection protocol of the data).
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub box_size: f32,
    pub iou_thresh: f64,
    /// Compute ARI from alpha masks (rgba decoders only).
    pub ari: bool,
    /// Alpha threshold under which a pixel is background.
    pub alpha_bg_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            box_size: 20.0,
            iou_thresh: 0.5,
            ari: false,
            alpha_bg_threshold: 0.1,
        }
    }
}

pub struct PerSampleEval {
    pub keypoints: KeypointSet,
    pub ari: Option<f64>,
}

/// Run the full evaluation protocol over a sample set.
pub fn evaluate(model: &Model, samples: &[Sample], n_classes: usize, opts: &EvalOptions) -> Result<EvalReport> {
    let per: Vec<Result<PerSampleEval>> = par::map_slice(samples, |s| {
        let out = model.infer(&s.image)?;
        let ari = match (&out.rgba, opts.ari) {
            (Some(rgba), true) => {
                let pred = masks_from_alpha(rgba, opts.alpha_bg_threshold);
                let gt = s.label_map();
                Some(evalmetrics::ari(&gt, &pred, true)?)
            }
            _ => None,
        };
        Ok(PerSampleEval {
            keypoints: out.keypoints,
            ari,
        })
    });
    let per: Vec<PerSampleEval> = per.into_iter().collect::<Result<_>>()?;

    let mut cls_inputs = Vec::with_capacity(samples.len());
    let mut occupancy = vec![0usize; model.cfg.m];
    let mut total_kp = 0usize;
    let mut ari_sum = 0.0;
    let mut ari_n = 0usize;
    for (s, e) in samples.iter().zip(per.iter()) {
        for &p in &e.keypoints.prototype_ids {
            occupancy[p] += 1;
            total_kp += 1;
        }
        if let Some(a) = e.ari {
            ari_sum += a;
            ari_n += 1;
        }
        cls_inputs.push(ClassifySample {
            gt_classes: s.instances.iter().map(|i| i.class_id).collect(),
            gt_boxes: s.instances.iter().map(|i| i.bbox).collect(),
            pred_points: e.keypoints.points.clone(),
            proto_ids: e.keypoints.prototype_ids.clone(),
        });
    }
    let res = evalmetrics::classify(&cls_inputs, model.cfg.m, n_classes, opts.box_size, opts.iou_thresh);
    Ok(EvalReport {
        ari: if ari_n > 0 { Some(ari_sum / ari_n as f64) } else { None },
        localization: res.localization,
        classification: res.classification,
        both: res.both,
        per_prototype_occupancy: occupancy
            .iter()
            .map(|&c| if total_kp == 0 { 0.0 } else { c as f64 / total_kp as f64 })
            .collect(),
        reverse_consistency: res.reverse_consistency,
        landmark_px_error: None,
        n_samples: samples.len(),
    })
}

/// Load a TOML or JSON config file (by extension; TOML when ambiguous).
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| TuskError::io(path, e))?;
    let is_json = path.extension().map(|e| e == "json").unwrap_or(false);
    if is_json {
        serde_json::from_str(&text).map_err(|e| TuskError::Json {
            path: path.into(),
            source: e,
        })
    } else {
        toml::from_str(&text).map_err(|e| TuskError::Config(format!("{}: {e}", path.display())))
    }
}

pub fn save_config(cfg: &TrainConfig, path: &Path) -> Result<()> {
    let text =
        toml::to_string_pretty(cfg).map_err(|e| TuskError::Config(format!("encode: {e}")))?;
    std::fs::write(path, text).map_err(|e| TuskError::io(path, e))
}

/// Checkpoint path helper used by the CLI.
pub fn final_checkpoint(dir: &Path) -> PathBuf {
    dir.join("ckpt_final.tusk")
}
