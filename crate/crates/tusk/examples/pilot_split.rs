// scratch: time split between pipeline phases
use std::time::Instant;
use tusk::datagen::*;
use tusk::decoder::SplatMode;
use tusk::trainer::*;

fn run(label: &str, mut cfg: TrainConfig, train: &[Sample], steps: usize) {
    cfg.steps = steps;
    cfg.save_every = 0;
    cfg.early_stop = false;
    let model = Model::new(cfg).unwrap();
    let mut trainer = Trainer::new(model);
    let t0 = Instant::now();
    trainer.train(train, None).unwrap();
    println!("{label}: {:.3} s/step", t0.elapsed().as_secs_f64() / steps as f64);
}

fn main() {
    let glyphs = gen_procedural_glyphs(7, 4, 24).unwrap();
    let gcfg = GlyphCanvasConfig { canvas_size: 64, n_glyphs: 4, min_center_dist: 20.0, max_retries: 2000, ..Default::default() };
    let train = gen_glyph_dataset(100, 64, &gcfg, &glyphs).unwrap();
    let base = TrainConfig {
        seed: 0, batch_size: 4, k: 4, m: 4, feat_ch: 32, base_width: 8, depth: 2,
        decoder_mode: SplatMode::Sum, nms_window: 13, softargmax_kernel: 13,
        sigma_splat: 3.25, ..Default::default()
    };
    run("full", base.clone(), &train, 40);
    let mut no_eqv = base.clone();
    no_eqv.enable_eqv = false;
    run("no eqv", no_eqv, &train, 40);
    let mut recon_only = base.clone();
    recon_only.enable_eqv = false;
    recon_only.enable_km = false;
    recon_only.enable_sw = false;
    run("recon only (no proto steps)", recon_only, &train, 40);
    let mut tiny_k = base.clone();
    tiny_k.enable_eqv = false;
    tiny_k.enable_km = false;
    run("recon+sw only", tiny_k, &train, 40);
}
