//! 3D Grad-CAM with channel aggregation and per-slice overlay export.
//!
//! The class score (pre-softmax logit) is differentiated against a chosen
//! spatial activation; per-channel weights are the spatial means of that
//! gradient; the map is the rectified weighted channel sum, trilinearly
//! upsampled to the input grid and min-max normalized to [0, 1] (all-zero
//! maps stay zero).

use std::path::{Path, PathBuf};

use crate::data::TabularSchema;
use crate::error::{Error, Result};
use crate::head::tabular_batch;
use crate::model::{Batch, DesambaModel};
use crate::nn::ParamStore;
use crate::preprocess::PreparedCase;
use crate::tape::Tape;
use crate::tensor::Array;
use crate::train::TabularStats;

/// Class-specific saliency volume on the input grid, values in [0, 1].
#[derive(Clone, Debug)]
pub struct Heatmap3D {
    pub values: Array,
    pub source_layer: String,
    pub target_class: usize,
}

/// Trilinear resize of a `[d, h, w]` volume.
pub fn upsample_trilinear(src: &Array, target: [usize; 3]) -> Array {
    let s = src.shape();
    let (sd, sh, sw) = (s[0], s[1], s[2]);
    let [td, th, tw] = target;
    let mut out = Array::zeros(&target);
    let coord = |i: usize, t: usize, n: usize| -> f64 {
        if t == 1 {
            0.0
        } else {
            ((i as f64 + 0.5) * n as f64 / t as f64 - 0.5).clamp(0.0, (n - 1) as f64)
        }
    };
    for z in 0..td {
        let fz = coord(z, td, sd);
        let z0 = fz.floor() as usize;
        let z1 = (z0 + 1).min(sd - 1);
        let az = fz - z0 as f64;
        for y in 0..th {
            let fy = coord(y, th, sh);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let ay = fy - y0 as f64;
            for x in 0..tw {
                let fx = coord(x, tw, sw);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(sw - 1);
                let ax = fx - x0 as f64;
                let c000 = src.at(&[z0, y0, x0]);
                let c001 = src.at(&[z0, y0, x1]);
                let c010 = src.at(&[z0, y1, x0]);
                let c011 = src.at(&[z0, y1, x1]);
                let c100 = src.at(&[z1, y0, x0]);
                let c101 = src.at(&[z1, y0, x1]);
                let c110 = src.at(&[z1, y1, x0]);
                let c111 = src.at(&[z1, y1, x1]);
                let c00 = c000 * (1.0 - ax) + c001 * ax;
                let c01 = c010 * (1.0 - ax) + c011 * ax;
                let c10 = c100 * (1.0 - ax) + c101 * ax;
                let c11 = c110 * (1.0 - ax) + c111 * ax;
                let c0 = c00 * (1.0 - ay) + c01 * ay;
                let c1 = c10 * (1.0 - ay) + c11 * ay;
                out.set(&[z, y, x], c0 * (1.0 - az) + c1 * az);
            }
        }
    }
    out
}

/// Result of one explanation: the heatmap plus the class probabilities of
/// the explained case.
#[derive(Debug)]
pub struct Explanation {
    pub heatmap: Heatmap3D,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
}

/// Compute Grad-CAM for one prepared case. `target_class = None` explains
/// the predicted class.
pub fn gradcam3d(
    model: &DesambaModel,
    store: &ParamStore,
    case: &PreparedCase,
    schema: &TabularSchema,
    stats: &TabularStats,
    target_class: Option<usize>,
    layer_id: &str,
) -> Result<Explanation> {
    let cfg = &model.config;
    let [d, h, w] = cfg.input_shape;
    let vol_len = d * h * w;
    let mut volumes = Vec::with_capacity(cfg.num_sequences);
    for s in 0..cfg.num_sequences {
        let mut arr = Array::zeros(&[1, 1, d, h, w]);
        arr.data_mut()[..vol_len].copy_from_slice(case.volumes[s].data());
        volumes.push(arr);
    }
    let tabular = cfg.enable_tabular_encoder.then(|| {
        let rows = vec![stats.standardize(&case.tabular)];
        tabular_batch(&rows, schema, &vec![0.0; schema.numeric.len()])
    });
    let batch = Batch { volumes, labels: vec![case.label], tabular };

    let mut tape = Tape::new();
    let out = model.forward(&mut tape, store, &batch, false, None)?;
    let activation = out
        .activations
        .iter()
        .find(|(name, _)| name == layer_id)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            Error::Contract(format!(
                "unknown layer {layer_id:?}; available layers: {}",
                model.layer_ids().join(", ")
            ))
        })?;
    let logits = tape.value(out.logits).clone();
    let classes = logits.shape()[1];
    let probs = {
        let row = logits.data();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        row.iter().map(|v| (v - m).exp() / z).collect::<Vec<f64>>()
    };
    let predicted = (0..classes).fold(0, |best, c| if probs[c] > probs[best] { c } else { best });
    let target = target_class.unwrap_or(predicted);
    if target >= classes {
        return Err(Error::Contract(format!("target class {target} out of {classes}")));
    }

    let score = tape.select_elem(out.logits, target);
    let grads = tape.backward(score);
    let grad = grads
        .wrt(activation)
        .ok_or_else(|| Error::Runtime("activation received no gradient".into()))?;
    let act = tape.value(activation);
    let shape = act.shape();
    let (c, ad, ah, aw) = (shape[1], shape[2], shape[3], shape[4]);
    let sp = ad * ah * aw;
    // Channel weights: spatial mean of the gradient.
    let mut cam = Array::zeros(&[ad, ah, aw]);
    for ci in 0..c {
        let gslice = &grad.data()[ci * sp..(ci + 1) * sp];
        let weight = gslice.iter().sum::<f64>() / sp as f64;
        let aslice = &act.data()[ci * sp..(ci + 1) * sp];
        for (o, &a) in cam.data_mut().iter_mut().zip(aslice) {
            *o += weight * a;
        }
    }
    // Rectify, upsample, normalize.
    for v in cam.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mut up = upsample_trilinear(&cam, [d, h, w]);
    let max = up.data().iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        up.scale(1.0 / max);
    }
    Ok(Explanation {
        heatmap: Heatmap3D {
            values: up,
            source_layer: layer_id.to_string(),
            target_class: target,
        },
        probabilities: probs,
        predicted,
    })
}

/// Flat voxel index of the heatmap peak.
pub fn peak_index(heatmap: &Heatmap3D) -> usize {
    let mut best = 0;
    for (i, &v) in heatmap.values.data().iter().enumerate() {
        if v > heatmap.values.data()[best] {
            best = i;
        }
    }
    best
}

fn colormap(h: f64) -> [f64; 3] {
    // Black-red-yellow heat ramp.
    let r = (3.0 * h).min(1.0);
    let g = (3.0 * h - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * h - 2.0).clamp(0.0, 1.0);
    [r, g, b]
}

const HEAT_BLEND: f64 = 0.6;

/// Write one composite PNG per axial slice: grayscale volume, color-mapped
/// heatmap (blend proportional to heat), and the ROI contour in green.
/// Returns the written paths; re-exporting identical inputs produces
/// byte-identical files.
pub fn overlay_export(
    volume: &Array,
    heatmap: &Heatmap3D,
    mask: Option<&Array>,
    out_dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    let sh = volume.shape();
    if sh.len() != 3 || heatmap.values.shape() != sh {
        return Err(Error::Contract(format!(
            "volume {sh:?} and heatmap {:?} must share one 3D grid",
            heatmap.values.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != sh {
            return Err(Error::Contract(format!(
                "mask {:?} does not match volume {sh:?}",
                m.shape()
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let (d, hgt, wid) = (sh[0], sh[1], sh[2]);
    let vmin = volume.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = volume.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let vspan = (vmax - vmin).max(1e-12);
    let mut paths = Vec::with_capacity(d);
    for z in 0..d {
        let mut rgb = vec![0u8; hgt * wid * 3];
        for y in 0..hgt {
            for x in 0..wid {
                let gray = (volume.at(&[z, y, x]) - vmin) / vspan;
                let heat = heatmap.values.at(&[z, y, x]);
                let a = HEAT_BLEND * heat;
                let cm = colormap(heat);
                let mut px = [
                    gray * (1.0 - a) + cm[0] * a,
                    gray * (1.0 - a) + cm[1] * a,
                    gray * (1.0 - a) + cm[2] * a,
                ];
                if let Some(m) = mask {
                    // In-plane boundary voxels of the mask get a green contour.
                    if m.at(&[z, y, x]) > 0.0 {
                        let mut boundary = false;
                        for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                            let ny = y as isize + dy;
                            let nx = x as isize + dx;
                            if ny < 0 || ny >= hgt as isize || nx < 0 || nx >= wid as isize {
                                boundary = true;
                                break;
                            }
                            if m.at(&[z, ny as usize, nx as usize]) == 0.0 {
                                boundary = true;
                                break;
                            }
                        }
                        if boundary {
                            px = [0.0, 1.0, 0.0];
                        }
                    }
                }
                let off = (y * wid + x) * 3;
                for k in 0..3 {
                    rgb[off + k] = (px[k].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        let path = out_dir.join(format!("{prefix}_z{z:03}.png"));
        let file = std::fs::File::create(&path)?;
        let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), wid as u32, hgt as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Runtime(format!("png header: {e}")))?;
        writer
            .write_image_data(&rgb)
            .map_err(|e| Error::Runtime(format!("png data: {e}")))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::TabularRow;
    use crate::rng::Rng;

    fn micro_model() -> (DesambaModel, ParamStore) {
        let cfg = ModelConfig {
            num_sequences: 2,
            num_classes: 3,
            input_shape: [8, 16, 16],
            stage_depths: [1, 1, 1, 1],
            stage_widths: [4, 6, 8, 10],
            enable_tabular_encoder: false,
            enable_decouple: false,
            enable_self_loss: false,
            enable_cross_loss: false,
            fused_dim: 16,
            head_hidden: 16,
            head_dropout: 0.0,
            ..ModelConfig::default()
        };
        DesambaModel::build(&cfg, None).unwrap()
    }

    fn prepared(seed: u64) -> PreparedCase {
        let mut rng = Rng::new(seed);
        let mut mask = Array::zeros(&[8, 16, 16]);
        for z in 3..5 {
            for y in 6..10 {
                for x in 6..10 {
                    mask.set(&[z, y, x], 1.0);
                }
            }
        }
        PreparedCase {
            case_id: format!("case{seed}"),
            volumes: vec![
                Array::randn(&[8, 16, 16], 1.0, &mut rng),
                Array::randn(&[8, 16, 16], 1.0, &mut rng),
            ],
            mask,
            label: 1,
            tabular: TabularRow::default(),
        }
    }

    #[test]
    fn heatmap_grid_and_range_contract() {
        let (model, store) = micro_model();
        let case = prepared(1);
        let ex = gradcam3d(
            &model,
            &store,
            &case,
            &TabularSchema::default(),
            &TabularStats::default(),
            Some(1),
            "seq0.samnet.stage4",
        )
        .unwrap();
        assert_eq!(ex.heatmap.values.shape(), &[8, 16, 16]);
        let vmax = ex.heatmap.values.data().iter().cloned().fold(0.0, f64::max);
        let vmin = ex.heatmap.values.data().iter().cloned().fold(1.0, f64::min);
        assert!(vmin >= 0.0 && vmax <= 1.0);
        // Max normalizes to exactly 1 when any activation survives.
        if vmax > 0.0 {
            assert_eq!(vmax, 1.0);
        }
        assert_eq!(ex.probabilities.len(), 3);
    }

    #[test]
    fn unknown_layer_lists_available() {
        let (model, store) = micro_model();
        let case = prepared(2);
        let err = gradcam3d(
            &model,
            &store,
            &case,
            &TabularSchema::default(),
            &TabularStats::default(),
            None,
            "seq0.nope",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("seq0.samnet.stage4"), "{err}");
    }

    #[test]
    fn upsample_preserves_constants_and_interpolates() {
        let src = Array::filled(&[2, 2, 2], 3.0);
        let up = upsample_trilinear(&src, [4, 4, 4]);
        for &v in up.data() {
            assert!((v - 3.0).abs() < 1e-12);
        }
        let mut ramp = Array::zeros(&[1, 1, 2]);
        ramp.set(&[0, 0, 1], 1.0);
        let up = upsample_trilinear(&ramp, [1, 1, 4]);
        assert!(up.data()[0] <= up.data()[1] && up.data()[1] <= up.data()[2]);
    }

    #[test]
    fn zero_gradient_gives_zero_heatmap() {
        // A target logit that ignores the activation (weights zeroed) must
        // produce an all-zero map after the normalization guard.
        let (model, mut store) = micro_model();
        // Zero the entire head so every logit is constant.
        for name in ["head.fc1.w", "head.fc1.b", "head.fc2.w", "head.fc2.b"] {
            let slot = store.slot(name).unwrap();
            let shape = store.value(slot).shape().to_vec();
            *store.value_mut(slot) = Array::zeros(&shape);
        }
        let case = prepared(3);
        let ex = gradcam3d(
            &model,
            &store,
            &case,
            &TabularSchema::default(),
            &TabularStats::default(),
            Some(0),
            "seq0.samnet.stage4",
        )
        .unwrap();
        assert!(ex.heatmap.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overlay_export_writes_one_file_per_slice_deterministically() {
        let dir = std::env::temp_dir().join("desamba_overlay_test");
        let _ = std::fs::remove_dir_all(&dir);
        let case = prepared(4);
        let heat = Heatmap3D {
            values: case.mask.clone(),
            source_layer: "seq0.samnet.stage4".into(),
            target_class: 1,
        };
        let paths =
            overlay_export(&case.volumes[0], &heat, Some(&case.mask), &dir, "cam").unwrap();
        assert_eq!(paths.len(), 8);
        assert!(paths[0].file_name().unwrap().to_string_lossy().ends_with("cam_z000.png"));
        let first: Vec<Vec<u8>> =
            paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let again =
            overlay_export(&case.volumes[0], &heat, Some(&case.mask), &dir, "cam").unwrap();
        for (p, bytes) in again.iter().zip(&first) {
            assert_eq!(&std::fs::read(p).unwrap(), bytes, "re-export must be byte-identical");
        }
    }

    #[test]
    fn zero_heatmap_overlay_is_plain_grayscale() {
        let dir = std::env::temp_dir().join("desamba_overlay_zero");
        let _ = std::fs::remove_dir_all(&dir);
        let case = prepared(5);
        let zero = Heatmap3D {
            values: Array::zeros(&[8, 16, 16]),
            source_layer: "x".into(),
            target_class: 0,
        };
        let paths = overlay_export(&case.volumes[0], &zero, None, &dir, "plain").unwrap();
        // With a zero map every channel triplet is the gray value three times.
        let bytes = std::fs::read(&paths[3]).unwrap();
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!(info.color_type, png::ColorType::Rgb);
        for px in buf[..info.buffer_size()].chunks(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
    }
}
