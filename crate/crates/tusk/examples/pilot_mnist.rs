// scratch pilot: mini MNIST-Hard end-to-end calibration
use tusk::datagen::*;
use tusk::decoder::SplatMode;
use tusk::trainer::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let base: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4);

    let glyphs = gen_procedural_glyphs(7, 4, 24).unwrap();
    let gcfg = GlyphCanvasConfig { canvas_size: 64, n_glyphs: 4, min_center_dist: 20.0, max_retries: 2000, ..Default::default() };
    let train = gen_glyph_dataset(100, 256, &gcfg, &glyphs).unwrap();
    let eval = gen_glyph_dataset(200, 64, &gcfg, &glyphs).unwrap();

    let cfg = TrainConfig {
        seed,
        steps,
        batch_size: batch,
        k: 4,
        m: 4,
        feat_ch: 32,
        base_width: base,
        depth: 2,
        decoder_mode: SplatMode::Sum,
        nms_window: 13,
        softargmax_kernel: 13,
        sigma_splat: 13.0 / 4.0,
        save_every: 0,
        early_stop: false,
        ..Default::default()
    };
    let model = Model::new(cfg).unwrap();
    let mut trainer = Trainer::new(model);
    let t0 = std::time::Instant::now();
    let log = trainer.train(&train, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let mains: Vec<&LogRow> = log.rows.iter().filter(|r| r.main.is_some()).collect();
    let first = mains.first().unwrap().main.unwrap();
    let last = mains.last().unwrap().main.unwrap();
    println!("steps {} in {:.1}s ({:.3} s/step)", mains.len(), dt, dt / mains.len() as f64);
    println!("first: recon {:.4} km {:.4} eqv_h {:.5} eqv_f {:.5}", first.recon, first.km, first.eqv_h, first.eqv_f);
    println!("last:  recon {:.4} km {:.4} eqv_h {:.5} eqv_f {:.5}", last.recon, last.km, last.eqv_h, last.eqv_f);

    let opts = EvalOptions { box_size: 20.0, iou_thresh: 0.5, ari: false, alpha_bg_threshold: 0.1 };
    let report = evaluate(&trainer.model, &eval, 4, &opts).unwrap();
    println!("loc {:.3} cls {:.3} both {:.3} occ {:?}", report.localization, report.classification, report.both, report.per_prototype_occupancy);
}
