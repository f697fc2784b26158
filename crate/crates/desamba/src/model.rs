//! Full model assembly: per-sequence dual-branch encoders, optional DRLM
//! decoupling, optional tabular encoder, and the classification head, built
//! from a validated [`ModelConfig`].
//!
//! The classifier consumes, depending on the flags:
//!
//! * decoupling on:  concat(all U_i, all S_ij, tabular embedding?)
//! * decoupling off: concat(all f_i, tabular embedding?)

use crate::config::ModelConfig;
use crate::data::TabularSchema;
use crate::drlm::{drlm_losses, DecoupledBundle, Drlm};
use crate::error::{Error, Result};
use crate::fusion::SequenceEncoder;
use crate::head::{total_loss, ClassifierHead, LossVars, TabularBatch, TabularEncoder};
use crate::nn::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Array;

/// One training/eval batch in array form.
pub struct Batch {
    /// One `[b, 1, d, h, w]` volume tensor per sequence.
    pub volumes: Vec<Array>,
    pub labels: Vec<usize>,
    /// Present when the model has a tabular encoder.
    pub tabular: Option<TabularBatch>,
}

/// Forward products needed by training, evaluation and explanation.
pub struct ModelOutput {
    pub logits: Var,
    /// Initial features f_i per sequence.
    pub features: Vec<Var>,
    pub bundle: Option<DecoupledBundle>,
    /// Named spatial activations for Grad-CAM: `seq{i}.{branch}.stage{k}`.
    pub activations: Vec<(String, Var)>,
}

pub struct DesambaModel {
    pub config: ModelConfig,
    pub encoders: Vec<SequenceEncoder>,
    pub drlm: Option<Drlm>,
    pub tabular: Option<TabularEncoder>,
    pub head: ClassifierHead,
}

impl DesambaModel {
    /// Build the model and its parameter store. The tabular schema is
    /// required exactly when the tabular encoder flag is set.
    pub fn build(config: &ModelConfig, schema: Option<&TabularSchema>) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let encoders: Vec<SequenceEncoder> = (0..config.num_sequences)
            .map(|i| SequenceEncoder::new(&mut store, &format!("seq{i}"), config))
            .collect::<Result<_>>()?;
        let drlm = if config.enable_decouple {
            Some(Drlm::new(
                &mut store,
                "drlm",
                config.num_sequences,
                config.fused_dim,
                config.decoupled_dim(),
            )?)
        } else {
            None
        };
        let tabular = if config.enable_tabular_encoder {
            let schema = schema.ok_or_else(|| {
                Error::Config("tabular encoder enabled but no tabular schema provided".into())
            })?;
            Some(TabularEncoder::new(&mut store, "tab", schema, config.tabular_dim)?)
        } else {
            None
        };
        let n = config.num_sequences;
        let pairs = n * (n - 1) / 2;
        let rep_dim = if config.enable_decouple {
            (n + pairs) * config.decoupled_dim()
        } else {
            n * config.fused_dim
        } + if config.enable_tabular_encoder { config.tabular_dim } else { 0 };
        let head = ClassifierHead::new(
            &mut store,
            "head",
            rep_dim,
            config.head_hidden,
            config.num_classes,
            config.head_dropout,
        );
        Ok((DesambaModel { config: config.clone(), encoders, drlm, tabular, head }, store))
    }

    /// Forward pass. `dropout_rng` is consulted only in training mode.
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        train: bool,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<ModelOutput> {
        if batch.volumes.len() != self.config.num_sequences {
            return Err(Error::Contract(format!(
                "model built for {} sequences, batch has {}",
                self.config.num_sequences,
                batch.volumes.len()
            )));
        }
        let mut features = Vec::with_capacity(self.encoders.len());
        let mut activations = Vec::new();
        for (i, (enc, vol)) in self.encoders.iter().zip(&batch.volumes).enumerate() {
            let x = t.leaf(vol.clone());
            let out = enc.encode(t, store, x)?;
            for (k, &s) in out.samnet_stages.iter().enumerate() {
                activations.push((format!("seq{i}.samnet.stage{}", k + 1), s));
            }
            for (k, &s) in out.mamba_stages.iter().enumerate() {
                activations.push((format!("seq{i}.mambaout.stage{}", k + 1), s));
            }
            features.push(out.feature);
        }
        let bundle = match &self.drlm {
            Some(drlm) => Some(drlm.forward(
                t,
                store,
                &features,
                self.config.enable_self_loss,
                self.config.enable_cross_loss,
            )?),
            None => None,
        };
        let mut rep_parts: Vec<Var> = Vec::new();
        match &bundle {
            Some(b) => {
                rep_parts.extend(&b.unique);
                rep_parts.extend(b.shared.iter().map(|(_, v)| *v));
            }
            None => rep_parts.extend(&features),
        }
        if let Some(tab) = &self.tabular {
            let tb = batch.tabular.as_ref().ok_or_else(|| {
                Error::Contract("model has a tabular encoder but the batch carries no rows".into())
            })?;
            rep_parts.push(tab.forward(t, store, tb)?);
        }
        let rep = if rep_parts.len() == 1 { rep_parts[0] } else { t.concat_ax1(&rep_parts) };
        let logits = self.head.forward(t, store, rep, train, dropout_rng.as_deref_mut())?;
        Ok(ModelOutput { logits, features, bundle, activations })
    }

    /// Compose the training objective for a forward pass.
    pub fn losses(&self, t: &mut Tape, output: &ModelOutput, labels: &[usize]) -> Result<LossVars> {
        let (l_self, l_cross) = match (&self.drlm, &output.bundle) {
            (Some(_), Some(bundle)) => drlm_losses(
                t,
                bundle,
                &output.features,
                self.config.enable_self_loss,
                self.config.enable_cross_loss,
            )?,
            _ => (None, None),
        };
        total_loss(
            t,
            output.logits,
            labels,
            l_self,
            l_cross,
            self.config.loss_alpha,
            self.config.loss_beta,
        )
    }

    /// Grad-CAM layer ids available on this model.
    pub fn layer_ids(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.config.num_sequences {
            if self.encoders[i].samnet.is_some() {
                for k in 1..=4 {
                    out.push(format!("seq{i}.samnet.stage{k}"));
                }
            }
            if self.encoders[i].mamba.is_some() {
                for k in 1..=4 {
                    out.push(format!("seq{i}.mambaout.stage{k}"));
                }
            }
        }
        out
    }

    /// Default explanation layer: the last SAMNet stage of the first
    /// sequence, falling back to the MambaOut branch when the CNN encoder is
    /// disabled.
    pub fn default_layer(&self) -> String {
        if self.encoders[0].samnet.is_some() {
            "seq0.samnet.stage4".to_string()
        } else {
            "seq0.mambaout.stage4".to_string()
        }
    }
}

/// Exact parameter count and a documented MAC estimate at a stated input
/// shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    pub params: u64,
    pub macs: u64,
    pub input_shape: [usize; 3],
    pub batch: usize,
}

impl ComplexityReport {
    pub fn params_millions(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn macs_giga(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    pub fn render(&self) -> String {
        format!(
            "input {}x{}x{} (batch {}): {:.2}M params, {:.2}G MACs",
            self.input_shape[0],
            self.input_shape[1],
            self.input_shape[2],
            self.batch,
            self.params_millions(),
            self.macs_giga()
        )
    }
}

/// Walk the model structure: parameters counted exactly from the store,
/// MACs from per-layer formulas (convolutions and linear maps as output
/// elements times kernel volume, spectral transforms as 5 n log2 n per 1D
/// transform).
pub fn complexity(
    model: &DesambaModel,
    store: &ParamStore,
    batch: usize,
) -> ComplexityReport {
    let [d, h, w] = model.config.input_shape;
    let in_shape = [batch, 1usize, d, h, w];
    let mut macs = 0u64;
    for enc in &model.encoders {
        macs += enc.macs(&in_shape);
    }
    if let Some(drlm) = &model.drlm {
        macs += drlm.macs(batch);
    }
    if let Some(tab) = &model.tabular {
        macs += tab.macs(batch);
    }
    macs += model.head.macs(batch);
    ComplexityReport {
        params: store.scalar_count(),
        macs,
        input_shape: model.config.input_shape,
        batch,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AblationRegistry;
    use crate::data::{CategoricalColumn, NumericColumn};
    use crate::head::tabular_batch;
    use crate::rng::Rng;

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            num_sequences: 2,
            num_classes: 3,
            input_shape: [8, 8, 8],
            stage_depths: [1, 1, 1, 1],
            stage_widths: [4, 6, 8, 10],
            fused_dim: 16,
            decoupled_dim: 8,
            tabular_dim: 8,
            head_hidden: 16,
            head_dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn schema() -> TabularSchema {
        TabularSchema {
            numeric: vec![NumericColumn { name: "age".into() }],
            categorical: vec![CategoricalColumn { name: "scanner".into(), cardinality: 3 }],
        }
    }

    fn batch(cfg: &ModelConfig, with_tab: bool, seed: u64) -> Batch {
        let mut rng = Rng::new(seed);
        let [d, h, w] = cfg.input_shape;
        let volumes = (0..cfg.num_sequences)
            .map(|_| Array::randn(&[2, 1, d, h, w], 1.0, &mut rng))
            .collect();
        let tabular = with_tab.then(|| {
            let rows = vec![
                crate::data::TabularRow { numeric: vec![Some(0.3)], categorical: vec![Some(1)] },
                crate::data::TabularRow { numeric: vec![None], categorical: vec![None] },
            ];
            tabular_batch(&rows, &schema(), &[0.0])
        });
        Batch { volumes, labels: vec![0, 2], tabular }
    }

    #[test]
    fn every_ablation_variant_builds_and_runs() {
        let reg = AblationRegistry::new(micro_cfg()).unwrap();
        for (name, cfg) in reg.all().unwrap() {
            let (model, store) = DesambaModel::build(&cfg, Some(&schema())).unwrap();
            let mut t = Tape::new();
            let b = batch(&cfg, cfg.enable_tabular_encoder, 1);
            let out = model.forward(&mut t, &store, &b, false, None).unwrap();
            assert_eq!(t.shape(out.logits), [2, 3], "logits for {name}");
            let lv = model.losses(&mut t, &out, &b.labels).unwrap();
            assert!(t.value(lv.total).data()[0].is_finite(), "loss for {name}");
            // Flag-consistent products.
            assert_eq!(out.bundle.is_some(), cfg.enable_decouple, "{name}");
            if let Some(bundle) = &out.bundle {
                assert_eq!(bundle.self_rec.is_some(), cfg.enable_self_loss, "{name}");
                assert_eq!(bundle.cross_rec.is_some(), cfg.enable_cross_loss, "{name}");
            }
        }
    }

    #[test]
    fn head_consumes_decoupled_or_raw_features() {
        let mut cfg = micro_cfg();
        cfg.enable_tabular_encoder = false;
        let (model, _) = DesambaModel::build(&cfg, None).unwrap();
        // De on: 2 unique + 1 shared at dim 8.
        assert_eq!(model.head.in_dim, 3 * 8);
        cfg.enable_decouple = false;
        cfg.enable_self_loss = false;
        cfg.enable_cross_loss = false;
        let (model2, _) = DesambaModel::build(&cfg, None).unwrap();
        assert_eq!(model2.head.in_dim, 2 * 16);
    }

    #[test]
    fn logits_width_follows_num_classes() {
        for classes in [2usize, 6] {
            let mut cfg = micro_cfg();
            cfg.num_classes = classes;
            cfg.enable_tabular_encoder = false;
            let (model, store) = DesambaModel::build(&cfg, None).unwrap();
            let mut t = Tape::new();
            let mut b = batch(&cfg, false, 2);
            b.labels = vec![0, 1];
            let out = model.forward(&mut t, &store, &b, false, None).unwrap();
            assert_eq!(t.shape(out.logits), [2, classes]);
        }
    }

    #[test]
    fn identical_configs_initialize_bitwise_identically() {
        let cfg = micro_cfg();
        let (_, s1) = DesambaModel::build(&cfg, Some(&schema())).unwrap();
        let (_, s2) = DesambaModel::build(&cfg, Some(&schema())).unwrap();
        assert_eq!(s1.len(), s2.len());
        let mut b1 = Vec::new();
        let mut b2 = Vec::new();
        s1.save(&mut b1).unwrap();
        s2.save(&mut b2).unwrap();
        assert_eq!(b1, b2, "same config + seed must initialize identically");
        let mut cfg2 = cfg.clone();
        cfg2.seed = 43;
        let (_, s3) = DesambaModel::build(&cfg2, Some(&schema())).unwrap();
        let mut b3 = Vec::new();
        s3.save(&mut b3).unwrap();
        assert_ne!(b1, b3);
    }

    #[test]
    fn missing_schema_with_tabular_flag_is_config_error() {
        let cfg = micro_cfg();
        assert!(matches!(DesambaModel::build(&cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn complexity_counts_single_conv_exactly() {
        // An unbiased single-channel 3x3x3 conv has 27 parameters.
        let mut store = ParamStore::new(1);
        let conv = crate::nn::Conv3d::new(
            &mut store,
            "c",
            1,
            1,
            [3, 3, 3],
            [1, 1, 1],
            [1, 1, 1],
            1,
            crate::nn::Init::TruncNormal(0.02),
            false,
        );
        assert_eq!(store.scalar_count(), 27);
        // MACs: out elems (4*4*4) x kernel 27.
        assert_eq!(conv.macs(&[1, 1, 4, 4, 4]), 64 * 27);
    }

    #[test]
    fn doubling_widths_roughly_quadruples_params() {
        let mut cfg = micro_cfg();
        cfg.enable_tabular_encoder = false;
        cfg.enable_decouple = false;
        cfg.enable_self_loss = false;
        cfg.enable_cross_loss = false;
        cfg.enable_mamba_encoder = false;
        cfg.stage_widths = [8, 16, 32, 64];
        let (m1, s1) = DesambaModel::build(&cfg, None).unwrap();
        let base = complexity(&m1, &s1, 1);
        cfg.stage_widths = [16, 32, 64, 128];
        let (m2, s2) = DesambaModel::build(&cfg, None).unwrap();
        let big = complexity(&m2, &s2, 1);
        let ratio = big.params as f64 / base.params as f64;
        assert!(
            (3.0..5.0).contains(&ratio),
            "conv-dominated params should scale ~4x, got {ratio}"
        );
    }

    #[test]
    fn complexity_report_renders_both_units() {
        let cfg = micro_cfg();
        let (model, store) = DesambaModel::build(&cfg, Some(&schema())).unwrap();
        let rep = complexity(&model, &store, 1);
        let text = rep.render();
        assert!(text.contains("M params") && text.contains("G MACs"), "{text}");
        assert!(rep.params > 0 && rep.macs > 0);
    }
}
