// scratch: mini-tetromino calibration (rgba mode, ARI + classification)
use tusk::datagen::*;
use tusk::decoder::SplatMode;
use tusk::trainer::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1500);
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let nmsw: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(9);
    let sigma: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let basew: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(16);
    let m: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(15);

    let tcfg = TetrominoConfig {
        image_size: 32, n_objects_min: 3, n_objects_max: 3,
        n_shapes: 5, n_colors: 3, cell_px: 5, max_retries: 100,
    };
    let train = gen_tetromino_dataset(300, 256, &tcfg).unwrap();
    let eval = gen_tetromino_dataset(400, 64, &tcfg).unwrap();

    let cfg = TrainConfig {
        seed, steps, batch_size: 4, k: 3, m, feat_ch: 32,
        base_width: basew, depth: 2, fast_unet: true,
        decoder_mode: SplatMode::Rgba,
        nms_window: nmsw, softargmax_kernel: nmsw, sigma_splat: sigma,
        coef_eqv_feat: 1.0,
        save_every: 0, early_stop: false,
        ..Default::default()
    };
    let model = Model::new(cfg).unwrap();
    let mut trainer = Trainer::new(model);
    let t0 = std::time::Instant::now();
    let log = trainer.train(&train, None).unwrap();
    let mains: Vec<&LogRow> = log.rows.iter().filter(|r| r.main.is_some()).collect();
    let last = mains.last().unwrap().main.unwrap();
    let opts = EvalOptions { box_size: 12.0, iou_thresh: 0.5, ari: true, alpha_bg_threshold: 0.1 };
    let report = evaluate(&trainer.model, &eval, 15, &opts).unwrap();
    println!(
        "steps {steps} nms {nmsw} sig {sigma} bw {basew} m {m} seed {seed}: recon {:.4} | ari {:.3} loc {:.3} cls {:.3} both {:.3} ({:.0}s)",
        last.recon, report.ari.unwrap_or(-1.0), report.localization, report.classification, report.both, t0.elapsed().as_secs_f64()
    );
    // alpha diagnostics on one sample
    let out = trainer.model.infer(&eval[0].image).unwrap();
    if let Some(rgba) = &out.rgba {
        let s = rgba.shape();
        let (k, hw) = (s[0], s[1] * s[2]);
        for i in 0..k {
            let alphas: Vec<f32> = (0..hw).map(|p| rgba.data()[(i * hw + p) * 4 + 3]).collect();
            let mn = alphas.iter().cloned().fold(f32::INFINITY, f32::min);
            let mx = alphas.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mean: f32 = alphas.iter().sum::<f32>() / hw as f32;
            println!("layer {i}: alpha min {mn:.3} max {mx:.3} mean {mean:.3} score {:.3}", out.keypoints.scores[i]);
        }
        let labels = tusk::decoder::masks_from_alpha(rgba, 0.1);
        let bg = labels.iter().filter(|&&l| l == 0).count();
        println!("pred background fraction: {:.3}", bg as f64 / hw as f64);
        let gtfg = eval[0].instances.iter().map(|i| i.mask.iter().filter(|&&m| m).count()).sum::<usize>();
        println!("gt foreground px: {gtfg}, kp points {:?}", out.keypoints.points);
    }
    use tusk::cli::{save_rgb_png, save_gray_png};
    std::fs::create_dir_all("/tmp/tet").unwrap();
    save_rgb_png(&eval[0].image, std::path::Path::new("/tmp/tet/input.png")).unwrap();
    save_rgb_png(&out.reconstruction, std::path::Path::new("/tmp/tet/recon.png")).unwrap();
    save_gray_png(&out.scoremap, std::path::Path::new("/tmp/tet/heat.png")).unwrap();
}
