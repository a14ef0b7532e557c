// scratch: conv micro-profile
use std::time::Instant;
use tusk::diff::{Graph, Tensor};
use tusk::rng;
use rand::Rng;

fn t(shape: &[usize], r: &mut rand_chacha::ChaCha8Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_conv(h: usize, w: usize, cin: usize, cout: usize, stride: usize, iters: usize) {
    let mut r = rng::derive(0, "perf", &[]);
    let x = t(&[h, w, cin], &mut r);
    let wt = t(&[3, 3, cin, cout], &mut r);
    let b = t(&[cout], &mut r);
    // forward only
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut g: Graph<f32> = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.input(wt.clone());
        let bv = g.input(b.clone());
        let _ = g.conv2d(xv, wv, bv, stride, 1).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / iters as f64;
    // forward + backward
    let t1 = Instant::now();
    for _ in 0..iters {
        let mut g: Graph<f32> = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.param(wt.clone());
        let bv = g.param(b.clone());
        let y = g.conv2d(xv, wv, bv, stride, 1).unwrap();
        let l = g.mean_all(y);
        let _ = g.backward(l).unwrap();
    }
    let fb = t1.elapsed().as_secs_f64() / iters as f64;
    let ho = (h + 2 - 3) / stride + 1;
    let wo = (w + 2 - 3) / stride + 1;
    let macs = (ho * wo * cout * cin * 9) as f64;
    println!(
        "conv {h}x{w}x{cin}->{cout} s{stride}: fwd {:.3}ms ({:.1} GFLOPS), fwd+bwd {:.3}ms ({:.1} GFLOPS)",
        fwd * 1e3, 2.0 * macs / fwd / 1e9, fb * 1e3, 6.0 * macs / fb / 1e9
    );
}

fn main() {
    bench_conv(64, 64, 3, 8, 1, 50);
    bench_conv(64, 64, 8, 8, 1, 50);
    bench_conv(64, 64, 8, 32, 1, 50);   // feature head as 3x3 equivalent cost probe
    bench_conv(32, 32, 16, 16, 1, 50);
    bench_conv(64, 64, 32, 8, 1, 50);   // decoder stem
    bench_conv(64, 64, 16, 8, 1, 50);   // fuse at full res
    bench_conv(16, 16, 32, 32, 1, 50);
}
