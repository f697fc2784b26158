// Scratch micro-benchmark of the hot kernels at stage-1 shapes.

use std::time::Instant;

use desamba::rng::Rng;
use desamba::tape::Tape;
use desamba::tensor::Array;

fn time<F: FnMut()>(name: &str, iters: usize, mut f: F) {
    let t0 = Instant::now();
    for _ in 0..iters {
        f();
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("{name:<36} {:>9.1} ms", dt * 1e3);
}

fn main() {
    let mut rng = Rng::new(1);
    // Stage-1 shapes for batch 4, width 16 at input (16, 64, 64) -> (8, 32, 32).
    let x = Array::randn(&[4, 16, 8, 32, 32], 1.0, &mut rng);
    let w7 = Array::randn(&[16, 1, 7, 7, 7], 0.1, &mut rng);
    let wpw = Array::randn(&[64, 16, 1, 1, 1], 0.1, &mut rng);
    let xex = Array::randn(&[4, 64, 8, 32, 32], 1.0, &mut rng);
    let gamma = Array::randn(&[16], 0.1, &mut rng);
    let beta = Array::randn(&[16], 0.1, &mut rng);
    let g64 = Array::randn(&[64], 0.1, &mut rng);
    let b64 = Array::randn(&[64], 0.1, &mut rng);

    time("dw7 conv fwd+bwd", 3, || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w7.clone());
        let y = t.conv3d(xv, wv, None, desamba::ConvSpec { stride: [1, 1, 1], pad: [3, 3, 3], groups: 16 });
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    time("pw conv 16->64 fwd+bwd", 3, || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(wpw.clone());
        let y = t.conv3d(xv, wv, None, desamba::ConvSpec { stride: [1, 1, 1], pad: [0, 0, 0], groups: 1 });
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    time("gelu on 4C volume fwd+bwd", 3, || {
        let mut t = Tape::new();
        let xv = t.leaf(xex.clone());
        let y = t.gelu(xv);
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    time("layer_norm_ch C=16 fwd+bwd", 3, || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let gv = t.leaf(gamma.clone());
        let bv = t.leaf(beta.clone());
        let y = t.layer_norm_ch(xv, gv, bv, 1e-6);
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    time("grn C=64 fwd+bwd", 3, || {
        let mut t = Tape::new();
        let xv = t.leaf(xex.clone());
        let gv = t.leaf(g64.clone());
        let bv = t.leaf(b64.clone());
        let y = t.grn(xv, gv, bv, 1e-6);
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    time("rfft3+irfft3 fwd+bwd", 3, || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let sp = t.rfft3(xv);
        let y = t.irfft3(sp, 32);
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
    time("channel_std fwd+bwd", 3, || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = t.channel_std(xv, 1e-6);
        let s = t.sum_all(y);
        let _ = t.backward(s);
    });
}
