// Scratch: time one forward/backward of the criterion-scale micro model.

use std::time::Instant;

use desamba::config::ModelConfig;
use desamba::model::{Batch, DesambaModel};
use desamba::nn::param_grads;
use desamba::rng::Rng;
use desamba::tape::Tape;
use desamba::tensor::Array;

fn main() {
    let fp = std::env::args().nth(1).map(|s| s == "fp").unwrap_or(true);
    let cfg = ModelConfig {
        num_sequences: 2,
        num_classes: 6,
        input_shape: [16, 64, 64],
        stage_depths: [1, 1, 1, 1],
        stage_widths: [16, 32, 64, 128],
        enable_frequency_path: fp,
        enable_mamba_encoder: false,
        enable_cnn_encoder: true,
        enable_tabular_encoder: false,
        enable_decouple: false,
        enable_cross_loss: false,
        enable_self_loss: false,
        fused_dim: 128,
        head_hidden: 64,
        head_dropout: 0.0,
        seed: 1,
        ..ModelConfig::default()
    };
    let (model, store) = DesambaModel::build(&cfg, None).unwrap();
    let mut rng = Rng::new(2);
    let batch = Batch {
        volumes: (0..2).map(|_| Array::randn(&[4, 1, 16, 64, 64], 1.0, &mut rng)).collect(),
        labels: vec![0, 1, 2, 3],
        tabular: None,
    };
    // Warm, then measure forward only.
    for label in ["fwd", "fwd+bwd"] {
        let t0 = Instant::now();
        let iters = 3;
        for _ in 0..iters {
            let mut t = Tape::new();
            let out = model.forward(&mut t, &store, &batch, true, None).unwrap();
            let loss = model.losses(&mut t, &out, &batch.labels).unwrap();
            if label == "fwd+bwd" {
                let grads = t.backward(loss.total);
                let _ = param_grads(&t, &grads);
            }
        }
        println!(
            "fp={fp} {label}: {:.0} ms per batch-4 step",
            t0.elapsed().as_secs_f64() * 1e3 / iters as f64
        );
    }
}
