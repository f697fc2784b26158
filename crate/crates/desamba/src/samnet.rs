//! SAMNet: a four-stage volumetric backbone of SAMBlocks.
//!
//! Every SAMBlock runs two parallel branches over the same input: a spatial
//! ConvNeXtV2-style branch (depthwise 7x7x7 mixer, channel layer norm, 4x
//! pointwise expansion, GRN, pointwise projection) and a frequency branch
//! (SAMB, then a depthwise 3x3x3 mixer and the mirrored tail). A dynamic
//! gate theta in (0, 1), computed per channel from the pooled concatenated
//! branch features, blends them:
//!
//! ```text
//!   y = 0.5 * x + 0.5 * theta . (alpha * F1 + beta * F2)
//! ```
//!
//! With the frequency path disabled the block degenerates to the plain
//! spatial block with a classic residual, `y = x + F1`.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv3d, Grn, Init, LayerNorm, Linear, ParamStore};
use crate::spectral::Samb;
use crate::tape::{Tape, Var};

/// Per-stage block counts, widths, and the fixed stride-2 downsampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub depths: [usize; 4],
    pub widths: [usize; 4],
}

impl StagePlan {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        StagePlan { depths: cfg.stage_depths, widths: cfg.stage_widths }
    }

    /// Right-pad target: the next multiple of the cumulative stride (16).
    pub fn padded_input(spatial: [usize; 3]) -> [usize; 3] {
        spatial.map(|d| d.div_ceil(16) * 16)
    }

    /// Spatial dims after stage `k` (0-based) for a padded input.
    pub fn stage_spatial(padded: [usize; 3], k: usize) -> [usize; 3] {
        padded.map(|d| d >> (k + 1))
    }
}

/// Mixer-plus-tail shared by both branches: depthwise conv, channel LN,
/// 4x pointwise expansion, GELU, GRN, pointwise projection. No residual;
/// the block composes residuals itself.
pub struct ConvNeXtCore {
    mixer: Conv3d,
    ln: LayerNorm,
    pw1: Conv3d,
    grn: Grn,
    pw2: Conv3d,
    width: usize,
}

impl ConvNeXtCore {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, mixer_k: usize) -> Self {
        ConvNeXtCore {
            mixer: Conv3d::same(store, &format!("{name}.dw"), width, width, mixer_k, width, Init::TruncNormal(0.02)),
            ln: LayerNorm::new(store, &format!("{name}.ln"), width),
            pw1: Conv3d::same(store, &format!("{name}.pw1"), width, 4 * width, 1, 1, Init::TruncNormal(0.02)),
            grn: Grn::new(store, &format!("{name}.grn"), 4 * width),
            pw2: Conv3d::same(store, &format!("{name}.pw2"), 4 * width, width, 1, 1, Init::TruncNormal(0.02)),
            width,
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.mixer.forward(t, store, x);
        let h = self.ln.forward(t, store, h);
        let h = self.pw1.forward(t, store, h);
        let h = t.gelu(h);
        let h = self.grn.forward(t, store, h);
        self.pw2.forward(t, store, h)
    }

    pub fn macs(&self, in_shape: &[usize; 5]) -> u64 {
        let expanded = [in_shape[0], 4 * self.width, in_shape[2], in_shape[3], in_shape[4]];
        let elems: u64 = in_shape.iter().product::<usize>() as u64;
        self.mixer.macs(in_shape)
            + self.pw1.macs(in_shape)
            + self.pw2.macs(&expanded)
            + 2 * elems // norms counted as one MAC per element each
    }
}

/// Per-channel gate theta in (0, 1) from globally pooled concatenated
/// branch features. Zero-initialized, so theta starts at exactly 0.5.
pub fn dynamic_gate(
    t: &mut Tape,
    store: &ParamStore,
    gate: &Linear,
    f1: Var,
    f2: Var,
) -> Result<Var> {
    if t.shape(f1) != t.shape(f2) {
        return Err(Error::Contract(format!(
            "gate branch shapes differ: {:?} vs {:?}",
            t.shape(f1),
            t.shape(f2)
        )));
    }
    let cat = t.concat_ax1(&[f1, f2]);
    let pooled = t.gap(cat);
    let z = gate.forward(t, store, pooled);
    Ok(t.sigmoid(z))
}

pub struct FreqBranch {
    pub samb: Samb,
    core: ConvNeXtCore,
}

/// One SAMBlock; `freq` is absent when the frequency path is disabled.
pub struct SamBlock {
    pub width: usize,
    spatial: ConvNeXtCore,
    freq: Option<FreqBranch>,
    gate: Option<Linear>,
    pub alpha: Option<usize>,
    pub beta: Option<usize>,
}

impl SamBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, frequency_path: bool) -> Self {
        let spatial = ConvNeXtCore::new(store, &format!("{name}.spatial"), width, 7);
        if !frequency_path {
            return SamBlock { width, spatial, freq: None, gate: None, alpha: None, beta: None };
        }
        let samb = Samb::new(store, &format!("{name}.freq.samb"), width);
        let core = ConvNeXtCore::new(store, &format!("{name}.freq"), width, 3);
        let gate = Linear::new(store, &format!("{name}.gate"), 2 * width, width, Init::Zero, true);
        let alpha = store.add(&format!("{name}.alpha"), &[1], Init::Const(0.5), false);
        let beta = store.add(&format!("{name}.beta"), &[1], Init::Const(0.5), false);
        SamBlock {
            width,
            spatial,
            freq: Some(FreqBranch { samb, core }),
            gate: Some(gate),
            alpha: Some(alpha),
            beta: Some(beta),
        }
    }

    pub fn has_frequency_path(&self) -> bool {
        self.freq.is_some()
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let sh = t.shape(x);
        if sh.len() != 5 || sh[1] != self.width {
            return Err(Error::Contract(format!(
                "samblock built for width {}, input {sh:?}",
                self.width
            )));
        }
        let f1 = self.spatial.forward(t, store, x);
        let Some(freq) = &self.freq else {
            return Ok(t.add(x, f1));
        };
        let spectral_out = freq.samb.forward(t, store, x)?;
        let f2 = freq.core.forward(t, store, spectral_out);
        let theta = dynamic_gate(t, store, self.gate.as_ref().unwrap(), f1, f2)?;
        let alpha = t.bind_param(self.alpha.unwrap(), store.value(self.alpha.unwrap()));
        let beta = t.bind_param(self.beta.unwrap(), store.value(self.beta.unwrap()));
        let af1 = t.scale_scalar(f1, alpha);
        let bf2 = t.scale_scalar(f2, beta);
        let mix = t.add(af1, bf2);
        let gated = t.mul_channel(mix, theta);
        let half_x = t.mul_const(x, 0.5);
        let half_g = t.mul_const(gated, 0.5);
        Ok(t.add(half_x, half_g))
    }

    pub fn macs(&self, in_shape: &[usize; 5]) -> u64 {
        let mut total = self.spatial.macs(in_shape);
        if let Some(freq) = &self.freq {
            total += freq.samb.macs(in_shape) + freq.core.macs(in_shape);
            total += (2 * self.width * self.width * in_shape[0]) as u64; // gate
            total += 3 * in_shape.iter().product::<usize>() as u64; // eq-4 blend
        }
        total
    }
}

/// Non-overlapping 2x2x2 strided conv followed by channel layer norm; used
/// for the stem and the three stage transitions of both backbones.
pub struct PatchDown {
    conv: Conv3d,
    ln: LayerNorm,
}

impl PatchDown {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Self {
        PatchDown {
            conv: Conv3d::new(
                store,
                &format!("{name}.conv"),
                in_ch,
                out_ch,
                [2, 2, 2],
                [2, 2, 2],
                [0, 0, 0],
                1,
                Init::TruncNormal(0.02),
                true,
            ),
            ln: LayerNorm::new(store, &format!("{name}.ln"), out_ch),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.conv.forward(t, store, x);
        self.ln.forward(t, store, h)
    }

    pub fn macs(&self, in_shape: &[usize; 5]) -> u64 {
        self.conv.macs(in_shape) + self.conv.out_shape(in_shape).iter().product::<usize>() as u64
    }

    pub fn out_shape(&self, in_shape: &[usize; 5]) -> [usize; 5] {
        self.conv.out_shape(in_shape)
    }
}

/// Four-stage SAMBlock backbone. `forward` returns the four stage outputs;
/// stage k has `widths[k]` channels at `padded_input / 2^(k+1)` resolution.
pub struct SamNet {
    pub plan: StagePlan,
    stem: PatchDown,
    downs: Vec<PatchDown>,
    stages: Vec<Vec<SamBlock>>,
}

impl SamNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        plan: StagePlan,
        frequency_path: bool,
    ) -> Self {
        let stem = PatchDown::new(store, &format!("{name}.stem"), in_ch, plan.widths[0]);
        let mut downs = Vec::new();
        let mut stages = Vec::new();
        for k in 0..4 {
            if k > 0 {
                downs.push(PatchDown::new(
                    store,
                    &format!("{name}.down{k}"),
                    plan.widths[k - 1],
                    plan.widths[k],
                ));
            }
            let blocks = (0..plan.depths[k])
                .map(|b| {
                    SamBlock::new(store, &format!("{name}.s{k}.b{b}"), plan.widths[k], frequency_path)
                })
                .collect();
            stages.push(blocks);
        }
        SamNet { plan, stem, downs, stages }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let sh = t.shape(x).to_vec();
        if sh.len() != 5 {
            return Err(Error::Contract(format!("backbone expects [b, c, d, h, w], got {sh:?}")));
        }
        let padded = StagePlan::padded_input([sh[2], sh[3], sh[4]]);
        let mut h = t.pad_spatial(x, padded);
        h = self.stem.forward(t, store, h);
        let mut outputs = Vec::with_capacity(4);
        for k in 0..4 {
            if k > 0 {
                h = self.downs[k - 1].forward(t, store, h);
            }
            for block in &self.stages[k] {
                h = block.forward(t, store, h)?;
            }
            outputs.push(h);
        }
        Ok(outputs)
    }

    /// Shapes of the four stage outputs for a given input shape.
    pub fn stage_shapes(&self, in_shape: &[usize; 5]) -> [[usize; 5]; 4] {
        let padded = StagePlan::padded_input([in_shape[2], in_shape[3], in_shape[4]]);
        let mut shapes = [[0usize; 5]; 4];
        for k in 0..4 {
            let sp = StagePlan::stage_spatial(padded, k);
            shapes[k] = [in_shape[0], self.plan.widths[k], sp[0], sp[1], sp[2]];
        }
        shapes
    }

    pub fn macs(&self, in_shape: &[usize; 5]) -> u64 {
        let padded = StagePlan::padded_input([in_shape[2], in_shape[3], in_shape[4]]);
        let mut shape = [in_shape[0], in_shape[1], padded[0], padded[1], padded[2]];
        let mut total = self.stem.macs(&shape);
        shape = self.stem.out_shape(&shape);
        for k in 0..4 {
            if k > 0 {
                total += self.downs[k - 1].macs(&shape);
                shape = self.downs[k - 1].out_shape(&shape);
            }
            for block in &self.stages[k] {
                total += block.macs(&shape);
            }
        }
        total
    }
}
