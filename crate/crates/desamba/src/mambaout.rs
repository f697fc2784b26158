//! 3D MambaOut branch: gated CNN blocks with no state-space component.
//!
//! Each block layer-norms the input, expands it pointwise into a gate half
//! and a value half, token-mixes the value half with a depthwise 3x3x3
//! convolution, gates with GELU, and projects back with a zero-initialized
//! pointwise layer, so every block starts as the identity:
//!
//! ```text
//!   y = x + proj(gelu(g) . dwconv3(v)),   [g, v] = split(expand(ln(x)))
//! ```

use crate::error::{Error, Result};
use crate::nn::{Conv3d, Init, LayerNorm, ParamStore};
use crate::samnet::{PatchDown, StagePlan};
use crate::tape::{Tape, Var};

pub struct GatedCnnBlock {
    pub width: usize,
    ln: LayerNorm,
    expand: Conv3d,
    mix: Conv3d,
    proj: Conv3d,
}

impl GatedCnnBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let hidden = 2 * width;
        GatedCnnBlock {
            width,
            ln: LayerNorm::new(store, &format!("{name}.ln"), width),
            // Expansion produces the two equal halves: [gate | value].
            expand: Conv3d::same(store, &format!("{name}.fc"), width, 2 * hidden, 1, 1, Init::TruncNormal(0.02)),
            mix: Conv3d::same(store, &format!("{name}.mix"), hidden, hidden, 3, hidden, Init::TruncNormal(0.02)),
            proj: Conv3d::same(store, &format!("{name}.proj"), hidden, width, 1, 1, Init::Zero),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let sh = t.shape(x);
        if sh.len() != 5 || sh[1] != self.width {
            return Err(Error::Contract(format!(
                "gated cnn block built for width {}, input {sh:?}",
                self.width
            )));
        }
        let hidden = 2 * self.width;
        let h = self.ln.forward(t, store, x);
        let e = self.expand.forward(t, store, h);
        let g = t.slice_ax1(e, 0, hidden);
        let v = t.slice_ax1(e, hidden, 2 * hidden);
        let v = self.mix.forward(t, store, v);
        let a = t.gelu(g);
        let u = t.mul(a, v);
        let delta = self.proj.forward(t, store, u);
        Ok(t.add(x, delta))
    }

    pub fn macs(&self, in_shape: &[usize; 5]) -> u64 {
        let hidden_shape = [in_shape[0], 2 * self.width, in_shape[2], in_shape[3], in_shape[4]];
        self.expand.macs(in_shape)
            + self.mix.macs(&hidden_shape)
            + self.proj.macs(&hidden_shape)
            + 2 * in_shape.iter().product::<usize>() as u64
    }
}

/// Four-stage gated-CNN backbone sharing SAMNet's stage plan and
/// downsampling scheme, so the two branches stay shape-aligned stage for
/// stage.
pub struct MambaOut3d {
    pub plan: StagePlan,
    stem: PatchDown,
    downs: Vec<PatchDown>,
    stages: Vec<Vec<GatedCnnBlock>>,
}

impl MambaOut3d {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, plan: StagePlan) -> Self {
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
            stages.push(
                (0..plan.depths[k])
                    .map(|b| GatedCnnBlock::new(store, &format!("{name}.s{k}.b{b}"), plan.widths[k]))
                    .collect(),
            );
        }
        MambaOut3d { plan, stem, downs, stages }
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels;
    use crate::rng::Rng;
    use crate::tensor::Array;

    #[test]
    fn block_is_identity_at_init() {
        let mut store = ParamStore::new(1);
        let block = GatedCnnBlock::new(&mut store, "blk", 8);
        let mut rng = Rng::new(2);
        let x = Array::randn(&[2, 8, 3, 4, 4], 1.0, &mut rng);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = block.forward(&mut t, &store, xv).unwrap();
        assert_eq!(t.value(y), &x, "zero-initialized projection must be a passthrough");
    }

    #[test]
    fn block_preserves_shape() {
        let mut store = ParamStore::new(3);
        let block = GatedCnnBlock::new(&mut store, "blk", 32);
        let mut t = Tape::new();
        let x = t.leaf(Array::zeros(&[2, 32, 4, 8, 8]));
        let y = block.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.shape(y), [2, 32, 4, 8, 8]);
    }

    #[test]
    fn width_mismatch_is_contract_error() {
        let mut store = ParamStore::new(4);
        let block = GatedCnnBlock::new(&mut store, "blk", 8);
        let mut t = Tape::new();
        let x = t.leaf(Array::zeros(&[1, 4, 2, 2, 2]));
        assert!(block.forward(&mut t, &store, x).is_err());
    }

    /// Scalar recomposition of the gated block from raw kernel calls.
    #[test]
    fn block_matches_kernel_recomposition() {
        let mut store = ParamStore::new(5);
        let block = GatedCnnBlock::new(&mut store, "blk", 4);
        let mut rng = Rng::new(6);
        // Off-neutral projection so the check is not trivially x == x.
        let pw = store.slot("blk.proj.w").unwrap();
        *store.value_mut(pw) = Array::randn(&[4, 8, 1, 1, 1], 0.3, &mut rng);
        let x = Array::randn(&[1, 4, 3, 3, 3], 1.0, &mut rng);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = block.forward(&mut t, &store, xv).unwrap();

        let val = |name: &str| store.value(store.slot(name).unwrap()).clone();
        let (h, _, _) = kernels::layer_norm_ch_forward(&x, &val("blk.ln.g"), &val("blk.ln.b"), 1e-6);
        let e = kernels::conv3d_forward(
            &h,
            &val("blk.fc.w"),
            Some(&val("blk.fc.b")),
            &kernels::ConvSpec { stride: [1; 3], pad: [0; 3], groups: 1 },
        );
        // Split halves manually.
        let mut g = Array::zeros(&[1, 8, 3, 3, 3]);
        let mut v = Array::zeros(&[1, 8, 3, 3, 3]);
        for c in 0..8 {
            for p in 0..27 {
                g.data_mut()[c * 27 + p] = e.data()[c * 27 + p];
                v.data_mut()[c * 27 + p] = e.data()[(c + 8) * 27 + p];
            }
        }
        let v = kernels::conv3d_forward(
            &v,
            &val("blk.mix.w"),
            Some(&val("blk.mix.b")),
            &kernels::ConvSpec { stride: [1; 3], pad: [1; 3], groups: 8 },
        );
        let gelu = |t: f64| 0.5 * t * (1.0 + ((2.0_f64 / std::f64::consts::PI).sqrt() * (t + 0.044715 * t * t * t)).tanh());
        let u = g.zip_map(&v, |a, b| gelu(a) * b);
        let delta = kernels::conv3d_forward(
            &u,
            &val("blk.proj.w"),
            Some(&val("blk.proj.b")),
            &kernels::ConvSpec { stride: [1; 3], pad: [0; 3], groups: 1 },
        );
        let want = x.zip_map(&delta, |a, d| a + d);
        let denom = want.data().iter().map(|q| q.abs()).fold(1e-12, f64::max);
        assert!(t.value(y).max_abs_diff(&want) / denom < 1e-12);
    }

    #[test]
    fn backbone_is_identity_transported_stem_at_init() {
        // All blocks start as passthroughs, so the full branch equals the
        // stem/downsample chain alone.
        let mut store = ParamStore::new(7);
        let plan = StagePlan { depths: [2, 2, 2, 2], widths: [4, 6, 8, 10] };
        let net = MambaOut3d::new(&mut store, "mo", 1, plan);
        let mut rng = Rng::new(8);
        let x = Array::randn(&[1, 1, 16, 16, 16], 1.0, &mut rng);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let stages = net.forward(&mut t, &store, xv).unwrap();

        let mut t2 = Tape::new();
        let xv2 = t2.leaf(x);
        let mut h = net.stem.forward(&mut t2, &store, xv2);
        for k in 0..4 {
            if k > 0 {
                h = net.downs[k - 1].forward(&mut t2, &store, h);
            }
            assert_eq!(t.value(stages[k]), t2.value(h), "stage {k}");
        }
    }

    #[test]
    fn stage_shapes_match_samnet_contract() {
        let mut store = ParamStore::new(9);
        let plan = StagePlan { depths: [1, 1, 1, 1], widths: [32, 64, 128, 256] };
        let net = MambaOut3d::new(&mut store, "mo", 1, plan);
        let mut t = Tape::new();
        let x = t.leaf(Array::zeros(&[1, 1, 16, 64, 64]));
        let stages = net.forward(&mut t, &store, x).unwrap();
        let want = [
            [1, 32, 8, 32, 32],
            [1, 64, 4, 16, 16],
            [1, 128, 2, 8, 8],
            [1, 256, 1, 4, 4],
        ];
        for (k, stage) in stages.iter().enumerate() {
            assert_eq!(t.shape(*stage), want[k]);
        }
    }

    #[test]
    fn fixed_seed_forward_is_deterministic() {
        let run = || -> Array {
            let mut store = ParamStore::new(31);
            let plan = StagePlan { depths: [1, 1, 1, 1], widths: [4, 6, 8, 10] };
            let net = MambaOut3d::new(&mut store, "mo", 1, plan);
            // Nudge projections off zero so the run exercises the full block.
            for k in 0..4 {
                let slot = store.slot(&format!("mo.s{k}.b0.proj.w")).unwrap();
                let shape = store.value(slot).shape().to_vec();
                let mut rng = Rng::new(32 + k as u64);
                *store.value_mut(slot) = Array::randn(&shape, 0.1, &mut rng);
            }
            let mut rng = Rng::new(30);
            let mut t = Tape::new();
            let x = t.leaf(Array::randn(&[1, 1, 8, 8, 8], 1.0, &mut rng));
            let stages = net.forward(&mut t, &store, x).unwrap();
            t.value(stages[3]).clone()
        };
        assert_eq!(run(), run());
    }
}
