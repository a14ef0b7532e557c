// scratch: coefficient sweep on mini MNIST-Hard
use tusk::datagen::*;
use tusk::decoder::SplatMode;
use tusk::trainer::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let eqv_f: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(100.0);
    let eqv_h: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let km: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);
    let lr: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let batch: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(4);
    let ntrain: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(256);
    let sigma: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(13.0 / 4.0);
    let basew: usize = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(16);

    let glyphs = gen_procedural_glyphs(7, 4, 24).unwrap();
    let gcfg = GlyphCanvasConfig { canvas_size: 64, n_glyphs: 4, min_center_dist: 20.0, max_retries: 2000, ..Default::default() };
    let train = gen_glyph_dataset(100, ntrain, &gcfg, &glyphs).unwrap();
    let eval = gen_glyph_dataset(200, 64, &gcfg, &glyphs).unwrap();

    let cfg = TrainConfig {
        seed,
        steps,
        batch_size: batch,
        k: 4,
        m: 4,
        feat_ch: 32,
        base_width: basew,
        depth: 2,
        fast_unet: true,
        decoder_mode: SplatMode::Sum,
        nms_window: 13,
        softargmax_kernel: 13,
        sigma_splat: sigma,
        lr_encdec: lr,
        coef_eqv_feat: eqv_f,
        coef_eqv_heat: eqv_h,
        coef_km: km,
        save_every: 0,
        early_stop: false,
        ..Default::default()
    };
    let model = Model::new(cfg).unwrap();
    let mut trainer = Trainer::new(model);
    let t0 = std::time::Instant::now();
    let log = trainer.train(&train, None).unwrap();
    let mains: Vec<&LogRow> = log.rows.iter().filter(|r| r.main.is_some()).collect();
    let last = mains.last().unwrap().main.unwrap();
    let opts = EvalOptions { box_size: 20.0, iou_thresh: 0.5, ari: false, alpha_bg_threshold: 0.1 };
    let report = evaluate(&trainer.model, &eval, 4, &opts).unwrap();
    // mean distance from each gt center to the nearest keypoint
    let mut dsum = 0.0f64;
    let mut dn = 0usize;
    let mut class_off = vec![(0.0f64, 0.0f64, 0usize); 4];
    let mut dists: Vec<f64> = vec![];
    for s in eval.iter().take(64) {
        let out = trainer.model.infer(&s.image).unwrap();
        for inst in &s.instances {
            let (mut bd, mut bdx, mut bdy) = (f64::INFINITY, 0.0, 0.0);
            for p in &out.keypoints.points {
                let dx = (p[0] - inst.center[0]) as f64;
                let dy = (p[1] - inst.center[1]) as f64;
                let d = (dx * dx + dy * dy).sqrt();
                if d < bd { bd = d; bdx = dx; bdy = dy; }
            }
            dsum += bd;
            dists.push(bd);
            dn += 1;
            let c = &mut class_off[inst.class_id];
            c.0 += bdx; c.1 += bdy; c.2 += 1;
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("dist quantiles: p25 {:.2} p50 {:.2} p75 {:.2} p90 {:.2}", dists[dists.len()/4], dists[dists.len()/2], dists[dists.len()*3/4], dists[dists.len()*9/10]);
    for (c, (dx, dy, n)) in class_off.iter().enumerate() {
        println!("class {c}: mean offset ({:.2}, {:.2}) over {n}", dx / *n as f64, dy / *n as f64);
    }
    println!(
        "steps {steps} eqv_f {eqv_f} km {km} seed {seed} lr {lr} b {batch} n {ntrain} sig {sigma}: recon {:.4} | loc {:.3} cls {:.3} both {:.3} | meandist {:.2} occ {:?} ({:.0}s)",
        last.recon, report.localization, report.classification, report.both, dsum / dn as f64, report.per_prototype_occupancy, t0.elapsed().as_secs_f64()
    );
}
