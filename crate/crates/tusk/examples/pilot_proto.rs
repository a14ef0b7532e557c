// scratch pilot: prototype convergence + anti-collapse dynamics
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tusk::diff::{Graph, Tensor};
use tusk::evalmetrics::hungarian;
use tusk::nn::{Adam, ParamStore};
use tusk::prototypes::*;
use tusk::rng;

fn synth_batch(modes: &[[f64; 2]], n: usize, std: f64, r: &mut rand_chacha::ChaCha8Rng) -> Tensor<f32> {
    let mut data = Vec::with_capacity(n * 2);
    for i in 0..n {
        let m = &modes[i % modes.len()];
        for c in 0..2 {
            let z: f64 = StandardNormal.sample(r);
            data.push((m[c] + std * z) as f32);
        }
    }
    Tensor::new(vec![n, 2], data).unwrap()
}

fn run_sw(modes: &[[f64; 2]], m: usize, steps: usize, seed: u64) -> (Vec<f64>, Tensor<f32>) {
    let mut store: ParamStore<f32> = ParamStore::new();
    let mut init = rng::derive(seed, "init", &[]);
    let bank = PrototypeBank::new(&mut store, m, 2, 4e-4, &mut init).unwrap();
    let mut adam = Adam::new(&store);
    for step in 0..steps {
        let mut dr = rng::derive(seed, "data", &[step as u64]);
        let desc = synth_batch(modes, 64, 0.05, &mut dr);
        let p_val = store.value(bank.param).clone();
        let mw = mixture_weights(&desc, &p_val);
        let idx = gmm_indices(&allocate_counts(&mw.pi, 64));
        let mut nr = rng::derive(seed, "noise", &[step as u64]);
        let std = (4e-4f64).sqrt();
        let noise: Vec<f32> = (0..64 * 2).map(|_| { let z: f64 = StandardNormal.sample(&mut nr); (std * z) as f32 }).collect();
        let mut g: Graph<f32> = Graph::new();
        let p_var = g.param(p_val);
        let d_var = g.input(desc);
        let centers = g.gather_rows(p_var, idx).unwrap();
        let nv = g.input(Tensor::new(vec![64, 2], noise).unwrap());
        let samples = g.add(centers, nv).unwrap();
        let proj = projections::<f32>(2, 64, &mut nr);
        let loss = sw_loss_graph(&mut g, d_var, samples, &proj).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let grad = grads.take(p_var).unwrap();
        adam.step(&mut store, &[(bank.param, grad)], 0.1);
    }
    // final: mode-center error via hungarian + occupancy
    let p_val = store.value(bank.param).clone();
    let mut dr = rng::derive(seed, "eval", &[]);
    let eval = synth_batch(modes, 512, 0.05, &mut dr);
    let asg = assign(&eval, &p_val);
    let mut occ = vec![0usize; m];
    for &a in &asg { occ[a] += 1; }
    let occf: Vec<f64> = occ.iter().map(|&c| c as f64 / 512.0).collect();
    (occf, p_val)
}

fn run_kmeans_only(modes: &[[f64; 2]], m: usize, steps: usize, seed: u64) -> Vec<f64> {
    let mut store: ParamStore<f32> = ParamStore::new();
    let mut init = rng::derive(seed, "init", &[]);
    let bank = PrototypeBank::new(&mut store, m, 2, 4e-4, &mut init).unwrap();
    let mut adam = Adam::new(&store);
    for step in 0..steps {
        let mut dr = rng::derive(seed, "data", &[step as u64]);
        let desc = synth_batch(modes, 64, 0.05, &mut dr);
        let p_val = store.value(bank.param).clone();
        let mut g: Graph<f32> = Graph::new();
        let p_var = g.param(p_val);
        let d_var = g.input(desc);
        let loss = kmeans_only_loss_graph(&mut g, d_var, p_var).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let grad = grads.take(p_var).unwrap();
        adam.step(&mut store, &[(bank.param, grad)], 0.1);
    }
    let p_val = store.value(bank.param).clone();
    let mut dr = rng::derive(seed, "eval", &[]);
    let eval = synth_batch(modes, 512, 0.05, &mut dr);
    let asg = assign(&eval, &p_val);
    let mut occ = vec![0usize; m];
    for &a in &asg { occ[a] += 1; }
    occ.iter().map(|&c| c as f64 / 512.0).collect()
}

fn main() {
    // criterion 3: 4 well-separated 2D gaussians, M=4, 2000 steps, err < 0.05, 5/5 seeds
    let modes4 = [[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]];
    println!("== C3: prototype convergence (M=4, 2000 steps)");
    for seed in 0..5u64 {
        let t0 = std::time::Instant::now();
        let (occ, p) = run_sw(&modes4, 4, 2000, seed);
        // hungarian match prototypes to modes
        let mut cost = vec![0.0f64; 16];
        for pi in 0..4 {
            for mi in 0..4 {
                let dx = p.data()[pi * 2] as f64 - modes4[mi][0];
                let dy = p.data()[pi * 2 + 1] as f64 - modes4[mi][1];
                cost[pi * 4 + mi] = (dx * dx + dy * dy).sqrt();
            }
        }
        let asg = hungarian(&cost, 4);
        let mean_err: f64 = asg.iter().enumerate().map(|(pi, &mi)| cost[pi * 4 + mi]).sum::<f64>() / 4.0;
        println!("  seed {seed}: mean center err {mean_err:.4} occ {occ:?} ({:.1}s)", t0.elapsed().as_secs_f64());
    }
    // criterion 4: 2 modes, M=2: sw occupancy >= 20% each in >= 4/5; kmeans collapses in >= 1/5
    let modes2 = [[1.0, 0.0], [2.0, 0.0]];
    println!("== C4: anti-collapse (M=2, 1000 steps)");
    for seed in 0..5u64 {
        let (occ_sw, _) = run_sw(&modes2, 2, 1000, seed);
        let occ_km = run_kmeans_only(&modes2, 2, 1000, seed);
        println!("  seed {seed}: sw occ {occ_sw:?} | kmeans occ {occ_km:?}");
    }
}
