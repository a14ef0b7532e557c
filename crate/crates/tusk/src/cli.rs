//! Command implementations behind the `tusk` binary: generate, train, eval,
//! infer, export-prototypes, ablate, sweep-prototypes, varcount-eval. Every
//! command writes its artifacts plus a replayable manifest into one run
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::datagen::{
    gen_glyph_dataset, gen_procedural_glyphs, gen_tetromino_dataset, glyph_class_names,
    load_mnist_idx, read_dataset, tetromino_class_names, write_dataset, DatasetMeta,
    GlyphCanvasConfig, Sample, TetrominoConfig, SCHEMA_VERSION,
};
use crate::decoder::SplatMode;
use crate::diff::Tensor;
use crate::error::{Result, TuskError};
use crate::evalmetrics::pca2;
use crate::trainer::{
    evaluate, load_config, save_config, EvalOptions, Model, TrainConfig, Trainer,
};

/// Provenance record dropped next to every command's artifacts.
#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub code_version: String,
    pub code_hash: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_fingerprint: Option<String>,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn code_version() -> (String, String) {
    let version = format!("tusk {}", env!("CARGO_PKG_VERSION"));
    let hash = sha_hex(version.as_bytes());
    (version, hash)
}

pub fn dataset_fingerprint(dir: &Path) -> Result<String> {
    let meta =
        fs::read(dir.join("meta.json")).map_err(|e| TuskError::io(dir.join("meta.json"), e))?;
    Ok(sha_hex(&meta))
}

pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    seed: u64,
    dataset_fp: Option<String>,
    config: serde_json::Value,
    outputs: &[PathBuf],
) -> Result<()> {
    let (code_version, code_hash) = code_version();
    let manifest = RunManifest {
        command: command.to_string(),
        argv: std::env::args().collect(),
        code_version,
        code_hash,
        seed,
        dataset_fingerprint: dataset_fp,
        config,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let path = out_dir.join("manifest.json");
    fs::write(
        &path,
        serde_json::to_vec_pretty(&manifest).map_err(|e| TuskError::Json {
            path: path.clone(),
            source: e,
        })?,
    )
    .map_err(|e| TuskError::io(&path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| TuskError::io(dir, e))
}

// ---- image helpers ---------------------------------------------------

pub fn save_rgb_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = t.shape();
    let (h, w) = (s[0], s[1]);
    let buf: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("rgb buffer");
    img.save(path).map_err(|e| TuskError::format(path, e.to_string()))
}

pub fn save_gray_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = t.shape();
    let (h, w) = (s[0], s[1]);
    let buf: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("gray buffer");
    img.save(path).map_err(|e| TuskError::format(path, e.to_string()))
}

/// RGBA layer `(H, W, 4)` straight to a PNG with its own alpha.
pub fn save_rgba_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = t.shape();
    let (h, w) = (s[0], s[1]);
    let buf: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbaImage::from_raw(w as u32, h as u32, buf).expect("rgba buffer");
    img.save(path).map_err(|e| TuskError::format(path, e.to_string()))
}

/// Image with the scoremap burned into the red channel.
pub fn heatmap_overlay(image: &Tensor<f32>, score: &Tensor<f32>) -> Tensor<f32> {
    let s = image.shape();
    let (h, w) = (s[0], s[1]);
    let mut out = image.clone();
    for p in 0..h * w {
        let sv = score.data()[p];
        let r = out.data()[p * 3] * 0.5 + sv * 0.5;
        out.data_mut()[p * 3] = r.min(1.0);
    }
    out
}

/// Rebuild a model from a checkpoint (parameters only; optimizer state is
/// ignored). The config comes from `config_path` or `config.toml` beside the
/// checkpoint.
pub fn load_model(ckpt: &Path, config_path: Option<&Path>) -> Result<Model> {
    let cfg_path = match config_path {
        Some(p) => p.to_path_buf(),
        None => {
            let beside = ckpt.parent().map(|d| d.join("config.toml"));
            match beside {
                Some(p) if p.exists() => p,
                _ => {
                    return Err(TuskError::Config(format!(
                        "no config.toml next to {}; pass --config",
                        ckpt.display()
                    )))
                }
            }
        }
    };
    let cfg = load_config(&cfg_path)?;
    let mut model = Model::new(cfg)?;
    let (_step, tensors) = checkpoint::load::<f32>(ckpt)?;
    for (name, tensor) in tensors {
        if name.starts_with("opt.") {
            continue;
        }
        let id = model.store.id_of(&name)?;
        if model.store.value(id).shape() != tensor.shape() {
            return Err(TuskError::Checkpoint(format!(
                "shape mismatch restoring `{name}`"
            )));
        }
        *model.store.value_mut(id) = tensor;
    }
    Ok(model)
}

// ---- generate ---------------------------------------------------------

pub struct GenerateArgs {
    pub dataset: String,
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub mnist_idx: Option<(PathBuf, PathBuf)>,
    pub image_size: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub n_shapes: usize,
    pub n_colors: usize,
    pub cell_px: usize,
    pub n_glyphs: usize,
    pub n_classes: usize,
    pub variants: usize,
    pub min_center_dist: f64,
}

impl Default for GenerateArgs {
    fn default() -> Self {
        GenerateArgs {
            dataset: "tetromino".into(),
            n: 100,
            seed: 0,
            out: PathBuf::from("dataset"),
            mnist_idx: None,
            image_size: 32,
            objects_min: 3,
            objects_max: 3,
            n_shapes: 19,
            n_colors: 6,
            cell_px: 5,
            n_glyphs: 4,
            n_classes: 4,
            variants: 20,
            min_center_dist: 20.0,
        }
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let (samples, classes, kind, image_size) = match args.dataset.as_str() {
        "tetromino" => {
            let cfg = TetrominoConfig {
                image_size: args.image_size,
                n_objects_min: args.objects_min,
                n_objects_max: args.objects_max,
                n_shapes: args.n_shapes,
                n_colors: args.n_colors,
                cell_px: args.cell_px,
                max_retries: 100,
            };
            (
                gen_tetromino_dataset(args.seed, args.n, &cfg)?,
                tetromino_class_names(args.n_shapes, args.n_colors),
                "tetromino".to_string(),
                args.image_size,
            )
        }
        "glyphs" => {
            let glyphs = match &args.mnist_idx {
                Some((img, lbl)) => load_mnist_idx(img, lbl)?,
                None => gen_procedural_glyphs(args.seed, args.n_classes, args.variants)?,
            };
            let cfg = GlyphCanvasConfig {
                canvas_size: args.image_size,
                n_glyphs: args.n_glyphs,
                min_center_dist: args.min_center_dist,
                max_retries: 1000,
                ..Default::default()
            };
            (
                gen_glyph_dataset(args.seed, args.n, &cfg, &glyphs)?,
                glyph_class_names(glyphs.n_classes),
                "glyphs".to_string(),
                args.image_size,
            )
        }
        other => {
            return Err(TuskError::Config(format!(
                "unknown dataset kind `{other}` (expected tetromino|glyphs)"
            )))
        }
    };
    let meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        image_size: [image_size, image_size],
        classes,
        n_samples: samples.len(),
        kind,
    };
    write_dataset(&samples, &meta, &args.out)?;
    write_manifest(
        &args.out,
        "generate",
        args.seed,
        None,
        serde_json::json!({
            "dataset": args.dataset, "n": args.n, "image_size": image_size,
            "objects": [args.objects_min, args.objects_max],
            "n_shapes": args.n_shapes, "n_colors": args.n_colors, "cell_px": args.cell_px,
            "n_glyphs": args.n_glyphs, "n_classes": args.n_classes,
        }),
        &[args.out.join("meta.json")],
    )?;
    Ok(())
}

// ---- train ------------------------------------------------------------

pub fn cmd_train(
    config: TrainConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let (_meta, samples) = read_dataset(dataset_dir)?;
    let model = Model::new(config.clone())?;
    let mut trainer = Trainer::new(model);
    if let Some(ckpt) = resume {
        trainer.resume(ckpt)?;
    }
    let log = trainer.train(&samples, Some(out_dir))?;
    log.write_csv(&out_dir.join("train_log.csv"))?;
    save_config(&config, &out_dir.join("config.toml"))?;
    write_manifest(
        out_dir,
        "train",
        config.seed,
        Some(dataset_fingerprint(dataset_dir)?),
        serde_json::to_value(&config).unwrap(),
        &[
            out_dir.join("ckpt_final.tusk"),
            out_dir.join("train_log.csv"),
            out_dir.join("config.toml"),
        ],
    )?;
    Ok(())
}

// ---- eval -------------------------------------------------------------

pub fn cmd_eval(
    ckpt: &Path,
    config_path: Option<&Path>,
    dataset_dir: &Path,
    report_path: &Path,
    scatter_csv: Option<&Path>,
    box_size: f32,
) -> Result<()> {
    let model = load_model(ckpt, config_path)?;
    let (meta, samples) = read_dataset(dataset_dir)?;
    let opts = EvalOptions {
        box_size,
        iou_thresh: 0.5,
        ari: model.cfg.decoder_mode == SplatMode::Rgba,
        alpha_bg_threshold: 0.1,
    };
    let report = evaluate(&model, &samples, meta.classes.len(), &opts)?;
    if let Some(dir) = report_path.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    fs::write(
        report_path,
        serde_json::to_vec_pretty(&report).map_err(|e| TuskError::Json {
            path: report_path.into(),
            source: e,
        })?,
    )
    .map_err(|e| TuskError::io(report_path, e))?;

    if let Some(csv) = scatter_csv {
        export_scatter(&model, &samples, csv)?;
    }
    if let Some(dir) = report_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_manifest(
            dir,
            "eval",
            model.cfg.seed,
            Some(dataset_fingerprint(dataset_dir)?),
            serde_json::to_value(&model.cfg).unwrap(),
            &[report_path.to_path_buf()],
        )?;
    }
    Ok(())
}

/// 2D PCA of descriptors and prototypes, as CSV rows
/// `x,y,kind,label` (kind in {descriptor, prototype}).
pub fn export_scatter(model: &Model, samples: &[Sample], csv: &Path) -> Result<()> {
    let mut points: Vec<Vec<f32>> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for s in samples.iter().take(64) {
        let out = model.infer(&s.image)?;
        for (i, d) in out.keypoints.descriptors.iter().enumerate() {
            points.push(d.clone());
            labels.push(format!("descriptor,{}", out.keypoints.prototype_ids[i]));
        }
    }
    let protos = model.prototypes();
    let c = model.cfg.feat_ch;
    for p in 0..model.cfg.m {
        points.push(protos.data()[p * c..(p + 1) * c].to_vec());
        labels.push(format!("prototype,{p}"));
    }
    let (proj, _) = pca2(&points)?;
    let mut text = String::from("x,y,kind,label\n");
    for (xy, lab) in proj.iter().zip(labels.iter()) {
        text.push_str(&format!("{:.6},{:.6},{}\n", xy[0], xy[1], lab));
    }
    fs::write(csv, text).map_err(|e| TuskError::io(csv, e))
}

// ---- infer ------------------------------------------------------------

pub fn cmd_infer(
    ckpt: &Path,
    config_path: Option<&Path>,
    image_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let model = load_model(ckpt, config_path)?;
    let img = image::open(image_path)
        .map_err(|e| TuskError::format(image_path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let tensor = Tensor::new(
        vec![h, w, 3],
        img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
    )?;
    let out = model.infer(&tensor)?;
    let mut outputs = vec![
        out_dir.join("reconstruction.png"),
        out_dir.join("heatmap_overlay.png"),
        out_dir.join("keypoints.json"),
    ];
    save_rgb_png(&out.reconstruction, &outputs[0])?;
    save_rgb_png(&heatmap_overlay(&tensor, &out.scoremap), &outputs[1])?;
    fs::write(
        &outputs[2],
        serde_json::to_vec_pretty(&out.keypoints).map_err(|e| TuskError::Json {
            path: outputs[2].clone(),
            source: e,
        })?,
    )
    .map_err(|e| TuskError::io(&outputs[2], e))?;
    if let Some(rgba) = &out.rgba {
        let s = rgba.shape();
        let (k, hh, ww) = (s[0], s[1], s[2]);
        for i in 0..k {
            let layer = Tensor::new(
                vec![hh, ww, 4],
                rgba.data()[i * hh * ww * 4..(i + 1) * hh * ww * 4].to_vec(),
            )?;
            let path = out_dir.join(format!("keypoint_{i:02}_rgba.png"));
            save_rgba_png(&layer, &path)?;
            outputs.push(path);
        }
    }
    write_manifest(
        out_dir,
        "infer",
        model.cfg.seed,
        None,
        serde_json::to_value(&model.cfg).unwrap(),
        &outputs,
    )?;
    Ok(())
}

// ---- export-prototypes --------------------------------------------------

/// CSV of the prototype bank plus a PNG grid where each prototype is
/// splatted at the image center and pushed through the decoder.
pub fn cmd_export_prototypes(
    ckpt: &Path,
    config_path: Option<&Path>,
    out_csv: &Path,
    tile: usize,
) -> Result<()> {
    let model = load_model(ckpt, config_path)?;
    let protos = model.prototypes().clone();
    let c = model.cfg.feat_ch;
    let m = model.cfg.m;
    let mut text = String::new();
    for p in 0..m {
        let row: Vec<String> = protos.data()[p * c..(p + 1) * c]
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    if let Some(dir) = out_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    fs::write(out_csv, text).map_err(|e| TuskError::io(out_csv, e))?;

    // decoded-prototype grid
    let tiles: Vec<Tensor<f32>> = (0..m)
        .map(|p| decode_prototype(&model, &protos, p, tile))
        .collect::<Result<_>>()?;
    let cols = (m as f64).sqrt().ceil() as usize;
    let rows = m.div_ceil(cols);
    let mut grid = Tensor::<f32>::zeros(&[rows * tile, cols * tile, 3]);
    for (p, t) in tiles.iter().enumerate() {
        let (r, cidx) = (p / cols, p % cols);
        for y in 0..tile {
            for x in 0..tile {
                for ch in 0..3 {
                    grid.data_mut()[((r * tile + y) * cols * tile + cidx * tile + x) * 3 + ch] =
                        t.data()[(y * tile + x) * 3 + ch];
                }
            }
        }
    }
    let png = out_csv.with_extension("png");
    save_rgb_png(&grid, &png)?;
    Ok(())
}

fn decode_prototype(model: &Model, protos: &Tensor<f32>, p: usize, size: usize) -> Result<Tensor<f32>> {
    use crate::decoder::alpha_blend;
    use crate::nn::bind_params;
    let c = model.cfg.feat_ch;
    let mut g = crate::diff::Graph::new();
    let vars = bind_params(&mut g, &model.store, |_| false);
    let loc = g.input(Tensor::new(
        vec![1, 2],
        vec![size as f32 / 2.0, size as f32 / 2.0],
    )?);
    let desc = g.input(Tensor::new(
        vec![1, c],
        protos.data()[p * c..(p + 1) * c].to_vec(),
    )?);
    let scores = g.input(Tensor::new(vec![1], vec![1.0])?);
    let splats = g.splat(loc, desc, size, size, model.cfg.sigma_splat)?;
    let img = match model.decoder.mode {
        SplatMode::Sum => {
            let fm = g.weighted_sum_k(splats, scores)?;
            model.decoder.decode_sum(&mut g, &vars, fm)?
        }
        SplatMode::Rgba => {
            let layers = model.decoder.decode_rgba(&mut g, &vars, splats, scores)?;
            alpha_blend(&mut g, layers)?
        }
    };
    Ok(g.value(img).clone())
}

// ---- ablate -------------------------------------------------------------

/// The five-row loss/training ablation grid.
pub fn ablation_rows() -> Vec<(&'static str, TrainConfig)> {
    let base = TrainConfig::default();
    ablation_rows_from(&base)
}

pub fn ablation_rows_from(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let mut rows = Vec::new();
    let mut recon_only = base.clone();
    recon_only.enable_sw = false;
    recon_only.enable_km = false;
    recon_only.enable_eqv = false;
    rows.push(("recon", recon_only));
    let mut recon_sw = base.clone();
    recon_sw.enable_km = false;
    recon_sw.enable_eqv = false;
    rows.push(("recon+sw", recon_sw));
    let mut no_eqv = base.clone();
    no_eqv.enable_eqv = false;
    rows.push(("recon+sw+km", no_eqv));
    let mut single = base.clone();
    single.iterative = false;
    rows.push(("single-stage", single));
    rows.push(("full", base.clone()));
    rows
}

/// Train + evaluate each requested ablation row, writing `ablation.csv`
/// (columns: row, classification, localization, both).
pub fn cmd_ablate(
    base: TrainConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    disable: &[String],
    box_size: f32,
) -> Result<()> {
    for d in disable {
        if !["sw", "km", "eqv", "iterative"].contains(&d.as_str()) {
            return Err(TuskError::Config(format!(
                "unknown ablation component `{d}` (allowed: sw, km, eqv, iterative)"
            )));
        }
    }
    ensure_dir(out_dir)?;
    let (meta, samples) = read_dataset(dataset_dir)?;
    let split = samples.len() * 3 / 4;
    let (train_set, eval_set) = samples.split_at(split.max(1).min(samples.len() - 1));

    let rows = if disable.is_empty() {
        ablation_rows_from(&base)
    } else {
        let mut cfg = base.clone();
        for d in disable {
            match d.as_str() {
                "sw" => cfg.enable_sw = false,
                "km" => cfg.enable_km = false,
                "eqv" => cfg.enable_eqv = false,
                "iterative" => cfg.iterative = false,
                _ => unreachable!(),
            }
        }
        vec![("custom", cfg)]
    };

    let mut csv = String::from("row,classification,localization,both\n");
    for (name, cfg) in rows {
        let model = Model::new(cfg.clone())?;
        let mut trainer = Trainer::new(model);
        trainer.train(train_set, None)?;
        let opts = EvalOptions {
            box_size,
            iou_thresh: 0.5,
            ari: false,
            alpha_bg_threshold: 0.1,
        };
        let report = evaluate(&trainer.model, eval_set, meta.classes.len(), &opts)?;
        csv.push_str(&format!(
            "{name},{:.4},{:.4},{:.4}\n",
            report.classification, report.localization, report.both
        ));
    }
    let csv_path = out_dir.join("ablation.csv");
    fs::write(&csv_path, csv).map_err(|e| TuskError::io(&csv_path, e))?;
    write_manifest(
        out_dir,
        "ablate",
        base.seed,
        Some(dataset_fingerprint(dataset_dir)?),
        serde_json::to_value(&base).unwrap(),
        &[csv_path],
    )?;
    Ok(())
}

// ---- sweep-prototypes -----------------------------------------------------

pub fn cmd_sweep_prototypes(
    base: TrainConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    m_list: &[usize],
    box_size: f32,
) -> Result<()> {
    if m_list.is_empty() {
        return Err(TuskError::Config("empty M list".into()));
    }
    ensure_dir(out_dir)?;
    let (meta, samples) = read_dataset(dataset_dir)?;
    let split = samples.len() * 3 / 4;
    let (train_set, eval_set) = samples.split_at(split.max(1).min(samples.len() - 1));
    let mut csv = String::from("m,localization,classification,both,reverse_consistency\n");
    for &m in m_list {
        let mut cfg = base.clone();
        cfg.m = m;
        let model = Model::new(cfg)?;
        let mut trainer = Trainer::new(model);
        trainer.train(train_set, None)?;
        let opts = EvalOptions {
            box_size,
            iou_thresh: 0.5,
            ari: false,
            alpha_bg_threshold: 0.1,
        };
        let report = evaluate(&trainer.model, eval_set, meta.classes.len(), &opts)?;
        csv.push_str(&format!(
            "{m},{:.4},{:.4},{:.4},{}\n",
            report.localization,
            report.classification,
            report.both,
            report
                .reverse_consistency
                .map(|v| format!("{v:.4}"))
                .unwrap_or_default()
        ));
    }
    let csv_path = out_dir.join("prototype_sweep.csv");
    fs::write(&csv_path, csv).map_err(|e| TuskError::io(&csv_path, e))?;
    write_manifest(
        out_dir,
        "sweep-prototypes",
        base.seed,
        Some(dataset_fingerprint(dataset_dir)?),
        serde_json::to_value(&base).unwrap(),
        &[csv_path],
    )?;
    Ok(())
}

// ---- varcount-eval --------------------------------------------------------

#[derive(Serialize)]
pub struct VarCountReport {
    pub ari: Option<f64>,
    pub count_accuracy: f64,
    /// Fraction of scenes where at least `K - n` detections score below the
    /// threshold (no more than `n` confident detections on `n` objects).
    pub surplus_suppressed_rate: f64,
    pub threshold: f64,
    pub n_samples: usize,
}

pub fn varcount_report(
    model: &Model,
    samples: &[Sample],
    threshold: f64,
) -> Result<VarCountReport> {
    let mut count_hits = 0usize;
    let mut suppressed_ok = 0usize;
    let mut ari_sum = 0.0;
    let mut ari_n = 0usize;
    for s in samples {
        let out = model.infer(&s.image)?;
        let confident = out
            .keypoints
            .scores
            .iter()
            .filter(|&&v| v as f64 >= threshold)
            .count();
        let n = s.instances.len();
        if confident == n {
            count_hits += 1;
        }
        if confident <= n {
            suppressed_ok += 1;
        }
        if let Some(rgba) = &out.rgba {
            let pred = crate::decoder::masks_from_alpha(rgba, 0.1);
            ari_sum += crate::evalmetrics::ari(&s.label_map(), &pred, true)?;
            ari_n += 1;
        }
    }
    Ok(VarCountReport {
        ari: if ari_n > 0 { Some(ari_sum / ari_n as f64) } else { None },
        count_accuracy: count_hits as f64 / samples.len() as f64,
        surplus_suppressed_rate: suppressed_ok as f64 / samples.len() as f64,
        threshold,
        n_samples: samples.len(),
    })
}

pub fn cmd_varcount_eval(
    ckpt: &Path,
    config_path: Option<&Path>,
    dataset_dir: &Path,
    out_dir: &Path,
    threshold: f64,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let model = load_model(ckpt, config_path)?;
    let (_meta, samples) = read_dataset(dataset_dir)?;
    let report = varcount_report(&model, &samples, threshold)?;
    let path = out_dir.join("varcount_report.json");
    fs::write(
        &path,
        serde_json::to_vec_pretty(&report).map_err(|e| TuskError::Json {
            path: path.clone(),
            source: e,
        })?,
    )
    .map_err(|e| TuskError::io(&path, e))?;
    write_manifest(
        out_dir,
        "varcount-eval",
        model.cfg.seed,
        Some(dataset_fingerprint(dataset_dir)?),
        serde_json::to_value(&model.cfg).unwrap(),
        &[path],
    )?;
    Ok(())
}
