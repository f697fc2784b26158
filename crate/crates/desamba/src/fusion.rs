//! Per-sequence dual-branch encoding and multi-scale feature fusion.
//!
//! Each sequence owns its encoder instance (no weight sharing across
//! sequences). The four stage maps of every enabled branch are globally
//! average-pooled per channel, concatenated, and linearly projected to the
//! fused dimension D_f, producing the initial feature f_i.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mambaout::MambaOut3d;
use crate::nn::{Init, Linear, ParamStore};
use crate::samnet::{SamNet, StagePlan};
use crate::tape::{Tape, Var};

/// Stage outputs of the enabled branches plus the fused feature.
pub struct EncodedSequence {
    pub samnet_stages: Vec<Var>,
    pub mamba_stages: Vec<Var>,
    /// `[b, fused_dim]`
    pub feature: Var,
}

/// Global average pool each stage map and concatenate: `[b, sum(widths)]`
/// per branch list.
pub fn pooled_concat(t: &mut Tape, stages: &[Var]) -> Var {
    let pooled: Vec<Var> = stages.iter().map(|&s| t.gap(s)).collect();
    if pooled.len() == 1 {
        pooled[0]
    } else {
        t.concat_ax1(&pooled)
    }
}

pub struct SequenceEncoder {
    pub samnet: Option<SamNet>,
    pub mamba: Option<MambaOut3d>,
    fuse: Linear,
    pub fused_dim: usize,
    concat_dim: usize,
}

impl SequenceEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        if !cfg.enable_cnn_encoder && !cfg.enable_mamba_encoder {
            return Err(Error::Validation(
                "sequence encoder needs at least one of the CNN/Mamba branches".into(),
            ));
        }
        let plan = StagePlan::from_config(cfg);
        let samnet = cfg
            .enable_cnn_encoder
            .then(|| SamNet::new(store, &format!("{name}.samnet"), 1, plan, cfg.enable_frequency_path));
        let mamba = cfg
            .enable_mamba_encoder
            .then(|| MambaOut3d::new(store, &format!("{name}.mambaout"), 1, plan));
        let branches = usize::from(samnet.is_some()) + usize::from(mamba.is_some());
        let concat_dim = branches * plan.widths.iter().sum::<usize>();
        let fuse = Linear::new(
            store,
            &format!("{name}.fuse"),
            concat_dim,
            cfg.fused_dim,
            Init::TruncNormal((2.0 / concat_dim as f64).sqrt()),
            true,
        );
        Ok(SequenceEncoder { samnet, mamba, fuse, fused_dim: cfg.fused_dim, concat_dim })
    }

    /// Fuse the pooled multi-scale pyramids of both branches into f_i.
    pub fn fuse_multiscale(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        samnet_stages: &[Var],
        mamba_stages: &[Var],
    ) -> Result<Var> {
        let mut pooled = Vec::new();
        if !samnet_stages.is_empty() {
            pooled.push(pooled_concat(t, samnet_stages));
        }
        if !mamba_stages.is_empty() {
            pooled.push(pooled_concat(t, mamba_stages));
        }
        if pooled.is_empty() {
            return Err(Error::Contract("fuse_multiscale needs at least one stage list".into()));
        }
        let cat = if pooled.len() == 1 { pooled[0] } else { t.concat_ax1(&pooled) };
        let got = t.shape(cat)[1];
        if got != self.concat_dim {
            return Err(Error::Contract(format!(
                "pooled stages give {got} channels, encoder fuses {}",
                self.concat_dim
            )));
        }
        Ok(self.fuse.forward(t, store, cat))
    }

    /// Encode one sequence volume `[b, 1, d, h, w]`.
    pub fn encode(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<EncodedSequence> {
        let samnet_stages = match &self.samnet {
            Some(net) => net.forward(t, store, x)?,
            None => Vec::new(),
        };
        let mamba_stages = match &self.mamba {
            Some(net) => net.forward(t, store, x)?,
            None => Vec::new(),
        };
        if let (Some(sn), Some(_)) = (&self.samnet, &self.mamba) {
            // Shape alignment between the two pyramids is what makes fusion
            // well-defined; guard it explicitly.
            let _ = sn;
            for (a, b) in samnet_stages.iter().zip(&mamba_stages) {
                if t.shape(*a) != t.shape(*b) {
                    return Err(Error::Contract(format!(
                        "branch stage shapes misaligned: {:?} vs {:?}",
                        t.shape(*a),
                        t.shape(*b)
                    )));
                }
            }
        }
        let feature = self.fuse_multiscale(t, store, &samnet_stages, &mamba_stages)?;
        Ok(EncodedSequence { samnet_stages, mamba_stages, feature })
    }

    pub fn macs(&self, in_shape: &[usize; 5]) -> u64 {
        let mut total = 0;
        if let Some(net) = &self.samnet {
            total += net.macs(in_shape);
        }
        if let Some(net) = &self.mamba {
            total += net.macs(in_shape);
        }
        total + self.fuse.macs(in_shape[0])
    }
}
