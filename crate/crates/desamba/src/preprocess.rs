//! Model-ready preprocessing: ROI-centered crop and per-volume z-score
//! normalization. Deterministic; augmentation is separate.

use crate::data::MultiSequenceCase;
use crate::error::{Error, Result};
use crate::tensor::Array;

/// Zero-variance guard for the z-score denominator.
pub const STD_FLOOR: f64 = 1e-6;

/// A preprocessed case: per-sequence crops, the matching mask crop, label
/// and tabular row carried through.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub case_id: String,
    /// One `[d, h, w]` crop per sequence, z-scored inside the crop.
    pub volumes: Vec<Array>,
    pub mask: Array,
    pub label: usize,
    pub tabular: crate::data::TabularRow,
}

/// Integer centroid of the mask foreground.
pub fn mask_centroid(mask: &Array) -> Result<[usize; 3]> {
    let sh = mask.shape();
    if sh.len() != 3 {
        return Err(Error::Contract(format!("mask must be rank 3, got {sh:?}")));
    }
    let (mut sd, mut sh_, mut sw, mut n) = (0.0, 0.0, 0.0, 0.0);
    for z in 0..sh[0] {
        for y in 0..sh[1] {
            for x in 0..sh[2] {
                if mask.at(&[z, y, x]) > 0.0 {
                    sd += z as f64;
                    sh_ += y as f64;
                    sw += x as f64;
                    n += 1.0;
                }
            }
        }
    }
    if n == 0.0 {
        return Err(Error::Validation("mask has no foreground voxels".into()));
    }
    Ok([(sd / n).round() as usize, (sh_ / n).round() as usize, (sw / n).round() as usize])
}

/// Crop `crop_shape` voxels centered at `center`, zero-padding where the
/// window leaves the volume.
pub fn crop_centered(vol: &Array, center: [usize; 3], crop_shape: [usize; 3]) -> Array {
    let src = vol.shape();
    let mut out = Array::zeros(&crop_shape);
    let start: [isize; 3] = [
        center[0] as isize - (crop_shape[0] / 2) as isize,
        center[1] as isize - (crop_shape[1] / 2) as isize,
        center[2] as isize - (crop_shape[2] / 2) as isize,
    ];
    for z in 0..crop_shape[0] {
        let sz = start[0] + z as isize;
        if sz < 0 || sz >= src[0] as isize {
            continue;
        }
        for y in 0..crop_shape[1] {
            let sy = start[1] + y as isize;
            if sy < 0 || sy >= src[1] as isize {
                continue;
            }
            for x in 0..crop_shape[2] {
                let sx = start[2] + x as isize;
                if sx < 0 || sx >= src[2] as isize {
                    continue;
                }
                out.set(&[z, y, x], vol.at(&[sz as usize, sy as usize, sx as usize]));
            }
        }
    }
    out
}

/// Z-score a volume in place with the `max(std, STD_FLOOR)` guard; a
/// constant volume normalizes to all zeros.
pub fn zscore(vol: &Array) -> Array {
    let n = vol.len() as f64;
    let mean = vol.sum() / n;
    let var = vol.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(STD_FLOOR);
    vol.map(|v| (v - mean) / denom)
}

/// Full preprocessing: ROI-centered crop to `crop_shape`, z-score each
/// sequence inside the crop, crop the mask with the same window.
pub fn preprocess(case: &MultiSequenceCase, crop_shape: [usize; 3]) -> Result<PreparedCase> {
    let center = mask_centroid(&case.mask)?;
    let volumes = case
        .volumes
        .iter()
        .map(|v| zscore(&crop_centered(v, center, crop_shape)))
        .collect();
    let mask = crop_centered(&case.mask, center, crop_shape);
    Ok(PreparedCase {
        case_id: case.case_id.clone(),
        volumes,
        mask,
        label: case.label,
        tabular: case.tabular.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cohort, TabularRow};
    use crate::rng::Rng;

    #[test]
    fn centered_roi_crops_around_centroid() {
        let mut vol = Array::zeros(&[8, 8, 8]);
        vol.set(&[4, 4, 4], 9.0);
        let crop = crop_centered(&vol, [4, 4, 4], [4, 4, 4]);
        // Window starts at 4 - 2 = 2; the marked voxel lands at (2, 2, 2).
        assert_eq!(crop.at(&[2, 2, 2]), 9.0);
    }

    #[test]
    fn out_of_bounds_crop_zero_pads() {
        let vol = Array::filled(&[4, 4, 4], 1.0);
        let crop = crop_centered(&vol, [0, 0, 0], [4, 4, 4]);
        assert_eq!(crop.at(&[0, 0, 0]), 0.0, "padded region");
        assert_eq!(crop.at(&[2, 2, 2]), 1.0, "in-volume region");
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let vol = Array::filled(&[3, 3, 3], 7.0);
        let z = zscore(&vol);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zscore_is_idempotent_within_tolerance() {
        let mut rng = Rng::new(1);
        let vol = Array::randn(&[4, 4, 4], 2.5, &mut rng);
        let once = zscore(&vol);
        let twice = zscore(&once);
        assert!(once.max_abs_diff(&twice) < 1e-6);
    }

    #[test]
    fn preprocess_is_deterministic() {
        let mut rng = Rng::new(2);
        let mut mask = Array::zeros(&[10, 12, 12]);
        mask.set(&[5, 6, 6], 1.0);
        mask.set(&[5, 6, 7], 1.0);
        let case = MultiSequenceCase {
            case_id: "c".into(),
            volumes: vec![Array::randn(&[10, 12, 12], 1.0, &mut rng)],
            mask,
            label: 0,
            tabular: TabularRow::default(),
            cohort: Cohort::Train,
        };
        let a = preprocess(&case, [8, 8, 8]).unwrap();
        let b = preprocess(&case, [8, 8, 8]).unwrap();
        assert_eq!(a.volumes[0], b.volumes[0]);
        assert_eq!(a.mask, b.mask);
    }
}
