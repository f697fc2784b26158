// Scratch calibration harness (not part of the test suite): times one
// micro-scale training run on the synthetic frequency task and prints the
// accuracy trajectory.
//
// Usage: calibrate <fp|nofp> <epochs> <per_class> <seed> <dhw:16x64x64>
//        <amp> <noise> <rlo> <rhi> <lr> <batch> <augment:0|1>

use std::time::Instant;

use desamba::config::{ExperimentConfig, ModelConfig, TrainConfig};
use desamba::data::{load_dataset, write_dataset};
use desamba::synth::{synth_generate, SynthSpec};
use desamba::train::train;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let fp = a.get(1).map(|s| s == "fp").unwrap_or(true);
    let epochs: usize = a.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let per_cohort: usize = a.get(3).and_then(|s| s.parse().ok()).unwrap_or(6);
    let seed: u64 = a.get(4).and_then(|s| s.parse().ok()).unwrap_or(42);
    let dims: Vec<usize> = a
        .get(5)
        .map(|s| s.split('x').map(|t| t.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![16, 64, 64]);
    let amp: f64 = a.get(6).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let noise: f64 = a.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let rlo: f64 = a.get(8).and_then(|s| s.parse().ok()).unwrap_or(7.0);
    let rhi: f64 = a.get(9).and_then(|s| s.parse().ok()).unwrap_or(11.0);
    let lr: f64 = a.get(10).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let batch: usize = a.get(11).and_then(|s| s.parse().ok()).unwrap_or(4);
    let augment = a.get(12).map(|s| s == "1").unwrap_or(true);

    let crop = [dims[0], dims[1], dims[2]];
    let volume = [crop[0] + 4, crop[1] + 8, crop[2] + 8];
    let mut spec = SynthSpec::six_class(volume, per_cohort);
    spec.texture_amplitude = amp;
    spec.noise_level = noise;
    if a.get(13).map(|s| s == "global").unwrap_or(false) {
        spec.texture_scope = desamba::synth::TextureScope::Global;
        spec.shared_strength = 0.3;
        spec.unique_strength = 0.15;
    }
    if a.get(14).map(|s| s == "lowbands").unwrap_or(false) {
        let centers = [0.05, 0.09, 0.13, 0.17, 0.21, 0.245];
        spec.min_band_separation = 0.035;
        for (c, &ct) in spec.classes.iter_mut().zip(&centers) {
            c.center = ct;
            c.bandwidth = 0.03;
        }
    }
    if a.get(14).map(|s| s == "widebands").unwrap_or(false) {
        let centers = [0.045, 0.085, 0.125, 0.165, 0.205, 0.245];
        spec.min_band_separation = 0.035;
        for (c, &ct) in spec.classes.iter_mut().zip(&centers) {
            c.center = ct;
            c.bandwidth = 0.04;
        }
    }
    for c in &mut spec.classes {
        c.radius_range = [rlo, rhi];
    }
    let key = format!(
        "{}x{}x{}_{per_cohort}_{amp}_{noise}_{rlo}_{rhi}_{}",
        volume[0],
        volume[1],
        volume[2],
        format!("{}{}", a.get(13).cloned().unwrap_or_default(), a.get(14).cloned().unwrap_or_default())
    );
    let root = std::env::temp_dir().join("desamba_calibrate");
    let data_dir = root.join(format!("data_{key}"));
    if !data_dir.join("schema.toml").exists() {
        let t0 = Instant::now();
        let (schema, cases) = synth_generate(&spec, 7).unwrap();
        write_dataset(&data_dir, &schema, &cases).unwrap();
        println!("synth: {:.1}s", t0.elapsed().as_secs_f64());
    }
    let dataset = load_dataset(&data_dir).unwrap();

    let cfg = ExperimentConfig {
        model: ModelConfig {
            num_sequences: 2,
            num_classes: 6,
            input_shape: crop,
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
            head_dropout: 0.1,
            seed,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs,
            batch_size: batch,
            lr,
            eval_every: 2,
            augment,
            ..Default::default()
        },
    };
    let t0 = Instant::now();
    let out = root.join(format!("run_{key}_fp{fp}_{seed}_{lr}_{epochs}"));
    let _ = std::fs::remove_dir_all(&out);
    let manifest = train(&cfg, &dataset, &data_dir, &out, None, None).unwrap();
    for log in &manifest.epochs {
        println!(
            "epoch {:>2}: total {:.4} val {:?}",
            log.epoch, log.total, log.val_top1
        );
    }
    println!(
        "fp={fp} seed={seed}: best internal top-1 {:.2}% at epoch {} in {:.1}s",
        manifest.best_val_top1,
        manifest.best_epoch,
        t0.elapsed().as_secs_f64()
    );
}
