//! Synthetic multi-sequence generator.
//!
//! Every case is built as `shared structural component + per-sequence unique
//! component + class-specific band-limited lesion texture + noise`. Classes
//! differ by the radial frequency band of the texture painted inside the
//! lesion blob, which is exactly the premise the spectral path is supposed
//! to exploit; lesions carry an additional sequence-independent contrast
//! shift so they are visible to spatial branches too.
//!
//! All voxel values are quantized to f32 before leaving the generator, so a
//! write/load round trip through the `.dsv` container is bit-exact.

use serde::{Deserialize, Serialize};

use crate::data::{
    CategoricalColumn, Cohort, DatasetSchema, MultiSequenceCase, NumericColumn, TabularRow,
    TabularSchema,
};
use crate::error::{Error, Result};
use crate::fft;
use crate::rng::Rng;
use crate::tensor::Array;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClassSignature {
    /// Center of the texture band in cycles/voxel (0, 0.5].
    pub center: f64,
    /// Band width in cycles/voxel.
    pub bandwidth: f64,
    /// Multiplies the spec-level texture amplitude.
    #[serde(default = "one")]
    pub amplitude_scale: f64,
    /// Inclusive blob count range.
    #[serde(default = "default_blob_count")]
    pub blob_count: [usize; 2],
    /// In-plane blob radius range in voxels.
    #[serde(default = "default_radius")]
    pub radius_range: [f64; 2],
}

fn one() -> f64 {
    1.0
}
fn default_blob_count() -> [usize; 2] {
    [1, 1]
}
fn default_radius() -> [f64; 2] {
    [6.0, 10.0]
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CohortSizes {
    pub train: usize,
    pub internal_test: usize,
    pub external_test: usize,
}

impl CohortSizes {
    pub fn get(&self, cohort: Cohort) -> usize {
        match cohort {
            Cohort::Train => self.train,
            Cohort::InternalTest => self.internal_test,
            Cohort::ExternalTest => self.external_test,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TextureScope {
    #[default]
    Lesion,
    Global,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub sequences: Vec<String>,
    /// Generated grid (depth, height, width); crops happen downstream.
    pub volume_shape: [usize; 3],
    pub cases_per_class: CohortSizes,
    /// Strength of the case-level structure shared across sequences.
    pub shared_strength: f64,
    /// Strength of each sequence's own structural component.
    pub unique_strength: f64,
    pub noise_level: f64,
    /// Sequence-independent intensity shift inside the lesion.
    pub lesion_contrast: f64,
    /// Base amplitude of the class texture inside the lesion.
    pub texture_amplitude: f64,
    /// Validation floor for pairwise class band-center distance.
    pub min_band_separation: f64,
    /// Probability of a missing numeric tabular value.
    #[serde(default)]
    pub missing_rate: f64,
    /// Where the class texture lives: inside the lesion blob only (the
    /// default; localization tasks) or across the whole volume (pure
    /// spectral-signature discrimination).
    #[serde(default)]
    pub texture_scope: TextureScope,
    pub classes: Vec<ClassSignature>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.num_classes {
            return Err(Error::Validation(format!(
                "num_classes = {} but {} class signatures declared",
                self.num_classes,
                self.classes.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation("need at least 2 classes".into()));
        }
        if self.sequences.is_empty() {
            return Err(Error::Validation("need at least one sequence".into()));
        }
        if self.volume_shape.iter().any(|&d| d < 8) {
            return Err(Error::Validation(format!(
                "volume_shape {:?} too small; every axis needs >= 8 voxels",
                self.volume_shape
            )));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if !(0.0 < c.center && c.center <= 0.5) {
                return Err(Error::Validation(format!(
                    "class {i} band center {} outside (0, 0.5]",
                    c.center
                )));
            }
            if c.bandwidth <= 0.0 {
                return Err(Error::Validation(format!("class {i} bandwidth must be positive")));
            }
            if c.radius_range[0] < 2.0 || c.radius_range[1] < c.radius_range[0] {
                return Err(Error::Validation(format!(
                    "class {i} radius range {:?} invalid (min 2 voxels)",
                    c.radius_range
                )));
            }
            if c.blob_count[0] < 1 || c.blob_count[1] < c.blob_count[0] {
                return Err(Error::Validation(format!(
                    "class {i} blob count range {:?} invalid",
                    c.blob_count
                )));
            }
        }
        // Pairwise distinct signatures: band centers separated by the floor.
        for i in 0..self.classes.len() {
            for j in (i + 1)..self.classes.len() {
                let d = (self.classes[i].center - self.classes[j].center).abs();
                if d < self.min_band_separation {
                    return Err(Error::Validation(format!(
                        "classes {i} and {j} band centers {:.3} vs {:.3} closer than the {:.3} floor",
                        self.classes[i].center, self.classes[j].center, self.min_band_separation
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<SynthSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let spec: SynthSpec =
            toml::from_str(&text).map_err(|e| Error::Config(format!("synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Schema of the datasets this generator emits.
    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            sequences: self.sequences.clone(),
            num_classes: self.num_classes,
            tabular: TabularSchema {
                numeric: vec![
                    NumericColumn { name: "lesion_volume".into() },
                    NumericColumn { name: "marker".into() },
                ],
                categorical: vec![CategoricalColumn { name: "scanner".into(), cardinality: 3 }],
            },
        }
    }

    /// Six-class spec with well-separated bands, used by the examples and
    /// the synthetic discrimination task.
    pub fn six_class(volume_shape: [usize; 3], per_cohort: usize) -> SynthSpec {
        let centers = [0.06, 0.13, 0.20, 0.27, 0.34, 0.43];
        SynthSpec {
            num_classes: 6,
            sequences: vec!["T1".into(), "T2".into()],
            volume_shape,
            cases_per_class: CohortSizes {
                train: per_cohort,
                internal_test: per_cohort,
                external_test: per_cohort,
            },
            shared_strength: 0.6,
            unique_strength: 0.3,
            noise_level: 0.2,
            lesion_contrast: 1.0,
            texture_amplitude: 2.0,
            min_band_separation: 0.05,
            missing_rate: 0.05,
            texture_scope: TextureScope::Lesion,
            classes: centers
                .iter()
                .map(|&c| ClassSignature {
                    center: c,
                    bandwidth: 0.05,
                    amplitude_scale: 1.0,
                    blob_count: [1, 1],
                    radius_range: [7.0, 11.0],
                })
                .collect(),
        }
    }

    /// Two-class two-sequence spec (binary task analog).
    pub fn binary(volume_shape: [usize; 3], per_cohort: usize) -> SynthSpec {
        let mut spec = SynthSpec::six_class(volume_shape, per_cohort);
        spec.num_classes = 2;
        spec.classes = vec![
            ClassSignature {
                center: 0.08,
                bandwidth: 0.06,
                amplitude_scale: 1.0,
                blob_count: [1, 1],
                radius_range: [7.0, 11.0],
            },
            ClassSignature {
                center: 0.36,
                bandwidth: 0.06,
                amplitude_scale: 1.0,
                blob_count: [1, 1],
                radius_range: [7.0, 11.0],
            },
        ];
        spec
    }
}

/// Normalized radial frequency (cycles/voxel) of a half-spectrum bin.
fn bin_radius(k: [usize; 3], dims: [usize; 3]) -> f64 {
    let f = |idx: usize, n: usize| -> f64 {
        let m = idx.min(n - idx);
        m as f64 / n as f64
    };
    // Width axis is already the half spectrum: index == frequency bin.
    let fd = f(k[0], dims[0]);
    let fh = f(k[1], dims[1]);
    let fw = k[2] as f64 / dims[2] as f64;
    (fd * fd + fh * fh + fw * fw).sqrt()
}

/// Band-limited unit-variance noise field over a `[d, h, w]` grid.
pub fn band_noise(shape: [usize; 3], lo: f64, hi: f64, rng: &mut Rng) -> Array {
    let [d, h, w] = shape;
    let noise = Array::randn(&[1, 1, d, h, w], 1.0, rng);
    let mut spec = fft::rfft3(&noise);
    let wh = fft::half_width(w);
    let volh = d * h * wh;
    {
        let data = spec.data_mut();
        for kd in 0..d {
            for kh in 0..h {
                for kw in 0..wh {
                    let r = bin_radius([kd, kh, kw], shape);
                    if r < lo || r > hi {
                        let idx = (kd * h + kh) * wh + kw;
                        data[idx] = 0.0;
                        data[volh + idx] = 0.0;
                    }
                }
            }
        }
    }
    let field = fft::irfft3(&spec, w);
    let flat = Array::from_vec(&[d, h, w], field.data().to_vec());
    // Standardize to unit variance (guarding empty bands).
    let n = flat.len() as f64;
    let mean = flat.sum() / n;
    let var = flat.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(1e-9);
    flat.map(|v| (v - mean) / denom)
}

/// Mean spectral energy of a volume inside a radial band; the measurement
/// oracle used to verify class signatures.
pub fn band_energy(vol: &Array, lo: f64, hi: f64) -> f64 {
    let sh = vol.shape();
    assert_eq!(sh.len(), 3);
    let [d, h, w] = [sh[0], sh[1], sh[2]];
    let wrapped = Array::from_vec(&[1, 1, d, h, w], vol.data().to_vec());
    let spec = fft::rfft3(&wrapped);
    let wh = fft::half_width(w);
    let volh = d * h * wh;
    let (re, im) = spec.data().split_at(volh);
    let mut acc = 0.0;
    let mut count = 0.0;
    for kd in 0..d {
        for kh in 0..h {
            for kw in 0..wh {
                let r = bin_radius([kd, kh, kw], [d, h, w]);
                if r >= lo && r <= hi {
                    let idx = (kd * h + kh) * wh + kw;
                    let wgt = fft::hermitian_weight(kw, w);
                    acc += wgt * (re[idx] * re[idx] + im[idx] * im[idx]);
                    count += wgt;
                }
            }
        }
    }
    if count == 0.0 {
        0.0
    } else {
        acc / count
    }
}

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
}

fn paint_blobs(mask: &mut Array, blobs: &[Blob]) {
    let sh = mask.shape().to_vec();
    for z in 0..sh[0] {
        for y in 0..sh[1] {
            for x in 0..sh[2] {
                for b in blobs {
                    let dz = (z as f64 - b.center[0]) / b.radii[0];
                    let dy = (y as f64 - b.center[1]) / b.radii[1];
                    let dx = (x as f64 - b.center[2]) / b.radii[2];
                    if dz * dz + dy * dy + dx * dx <= 1.0 {
                        mask.set(&[z, y, x], 1.0);
                        break;
                    }
                }
            }
        }
    }
}

fn generate_case(spec: &SynthSpec, class: usize, cohort: Cohort, index: usize, seed: u64) -> MultiSequenceCase {
    let case_id = format!("{}_c{class}_{index:04}", cohort.dir_name());
    let mut rng = Rng::for_component(seed, &format!("synth/{case_id}"));
    let shape = spec.volume_shape;
    let [d, h, w] = shape;
    let sig = &spec.classes[class];

    // Lesion geometry: blobs kept away from the borders so the ROI crop has
    // context on every side.
    let count = sig.blob_count[0] + rng.below(sig.blob_count[1] - sig.blob_count[0] + 1);
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let r = rng.uniform_in(sig.radius_range[0], sig.radius_range[1]);
        let rd = (r * d as f64 / h as f64).max(2.0);
        let mut margin = |extent: usize, radius: f64| -> f64 {
            let m = radius + 2.0;
            rng.uniform_in(m, extent as f64 - m)
        };
        let center = [margin(d, rd), margin(h, r), margin(w, r)];
        blobs.push(Blob { center, radii: [rd, r, r] });
    }
    let mut mask = Array::zeros(&shape);
    paint_blobs(&mut mask, &blobs);

    // Case-level structure shared by all sequences, plus the class texture.
    let shared = band_noise(shape, 0.0, 0.06, &mut rng);
    let lo = (sig.center - sig.bandwidth / 2.0).max(1e-3);
    let hi = (sig.center + sig.bandwidth / 2.0).min(0.5 * 3f64.sqrt());
    let texture = band_noise(shape, lo, hi, &mut rng);
    let amp = spec.texture_amplitude * sig.amplitude_scale;

    let volumes: Vec<Array> = (0..spec.sequences.len())
        .map(|_| {
            let unique = band_noise(shape, 0.0, 0.06, &mut rng);
            let mut vol = Array::zeros(&shape);
            for i in 0..vol.len() {
                let m = mask.data()[i];
                let tex_gate = match spec.texture_scope {
                    TextureScope::Lesion => m,
                    TextureScope::Global => 1.0,
                };
                let v = spec.shared_strength * shared.data()[i]
                    + spec.unique_strength * unique.data()[i]
                    + spec.noise_level * rng.normal()
                    + m * spec.lesion_contrast
                    + tex_gate * amp * texture.data()[i];
                vol.data_mut()[i] = v as f32 as f64;
            }
            vol
        })
        .collect();

    let lesion_volume = mask.sum() / mask.len() as f64;
    let marker = if rng.uniform() < spec.missing_rate { None } else { Some(rng.normal()) };
    let tabular = TabularRow {
        numeric: vec![Some((lesion_volume * 1000.0) as f32 as f64), marker.map(|v| v as f32 as f64)],
        categorical: vec![Some(rng.below(3))],
    };
    MultiSequenceCase { case_id, volumes, mask, label: class, tabular, cohort }
}

/// Generate the full dataset for a spec: balanced labels per cohort,
/// deterministic per (spec, seed).
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<(DatasetSchema, Vec<MultiSequenceCase>)> {
    spec.validate()?;
    let schema = spec.schema();
    let mut cases = Vec::new();
    for cohort in Cohort::ALL {
        let per_class = spec.cases_per_class.get(cohort);
        for class in 0..spec.num_classes {
            for index in 0..per_class {
                cases.push(generate_case(spec, class, cohort, index, seed));
            }
        }
    }
    for case in &cases {
        case.validate(&schema)?;
    }
    Ok((schema, cases))
}
