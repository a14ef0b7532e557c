// scratch: overfit smoke + visual dumps
use tusk::cli::{heatmap_overlay, save_gray_png, save_rgb_png};
use tusk::datagen::*;
use tusk::decoder::SplatMode;
use tusk::trainer::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(500);
    let recon_only = args.get(2).map(|s| s == "recononly").unwrap_or(false);

    let glyphs = gen_procedural_glyphs(7, 4, 24).unwrap();
    let gcfg = GlyphCanvasConfig { canvas_size: 64, n_glyphs: 4, min_center_dist: 20.0, max_retries: 2000, ..Default::default() };
    let train = gen_glyph_dataset(100, 16, &gcfg, &glyphs).unwrap();

    let mut cfg = TrainConfig {
        seed: 0,
        steps,
        batch_size: 4,
        k: 4,
        m: 4,
        feat_ch: 32,
        base_width: 8,
        depth: 2,
        decoder_mode: SplatMode::Sum,
        nms_window: 13,
        softargmax_kernel: 13,
        sigma_splat: 13.0 / 4.0,
        save_every: 0,
        early_stop: false,
        ..Default::default()
    };
    if recon_only {
        cfg.enable_sw = false;
        cfg.enable_km = false;
        cfg.enable_eqv = false;
    }
    let model = Model::new(cfg).unwrap();
    let mut trainer = Trainer::new(model);
    let log = trainer.train(&train, None).unwrap();
    let mains: Vec<&LogRow> = log.rows.iter().filter(|r| r.main.is_some()).collect();
    let first = mains.first().unwrap().main.unwrap();
    let last = mains.last().unwrap().main.unwrap();
    println!("recon first {:.4} last {:.4} (ratio {:.3})", first.recon, last.recon, last.recon / first.recon);

    std::fs::create_dir_all("/tmp/dbg").unwrap();
    for (i, s) in train.iter().take(3).enumerate() {
        let out = trainer.model.infer(&s.image).unwrap();
        save_rgb_png(&s.image, std::path::Path::new(&format!("/tmp/dbg/{i}_input.png"))).unwrap();
        save_rgb_png(&out.reconstruction, std::path::Path::new(&format!("/tmp/dbg/{i}_recon.png"))).unwrap();
        save_gray_png(&out.scoremap, std::path::Path::new(&format!("/tmp/dbg/{i}_heat.png"))).unwrap();
        save_rgb_png(&heatmap_overlay(&s.image, &out.scoremap), std::path::Path::new(&format!("/tmp/dbg/{i}_overlay.png"))).unwrap();
        println!("sample {i}: points {:?} scores {:?}", out.keypoints.points, out.keypoints.scores);
    }
    // scoremap stats
    let s0 = trainer.model.infer(&train[0].image).unwrap();
    let sm = &s0.scoremap;
    let mn = sm.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let mx = sm.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mean: f32 = sm.data().iter().sum::<f32>() / sm.numel() as f32;
    println!("scoremap min {mn:.4} max {mx:.4} mean {mean:.4}");
}
