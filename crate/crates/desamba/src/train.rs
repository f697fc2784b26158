//! Training loop, checkpointing, cohort evaluation, and the run manifest.
//!
//! Every stochastic component draws from a named stream derived from the
//! experiment seed (`shuffle/<epoch>`, `augment/<case>/<epoch>`,
//! `dropout/<step>`), so resuming from a checkpoint replays the exact
//! trajectory a longer run would have taken, and two runs with identical
//! (config, seed, data) produce identical manifests.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelConfig};
use crate::data::{Cohort, Dataset, MultiSequenceCase, TabularSchema};
use crate::error::{Error, Result};
use crate::head::tabular_batch;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Batch, DesambaModel};
use crate::nn::{param_grads, AdamW, ParamStore};
use crate::preprocess::{preprocess, PreparedCase};
use crate::rng::{derive_seed, Rng};
use crate::tape::Tape;
use crate::tensor::Array;

/// Per-numeric-column standardization stats computed on the train cohort.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct TabularStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TabularStats {
    pub fn from_train(cases: &[MultiSequenceCase], schema: &TabularSchema) -> TabularStats {
        let k = schema.numeric.len();
        let mut mean = vec![0.0; k];
        let mut std = vec![1.0; k];
        for col in 0..k {
            let values: Vec<f64> =
                cases.iter().filter_map(|c| c.tabular.numeric[col]).collect();
            if values.is_empty() {
                continue;
            }
            let m = values.iter().sum::<f64>() / values.len() as f64;
            let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / values.len() as f64;
            mean[col] = m;
            std[col] = v.sqrt().max(1e-6);
        }
        TabularStats { mean, std }
    }

    pub fn standardize(&self, row: &crate::data::TabularRow) -> crate::data::TabularRow {
        crate::data::TabularRow {
            numeric: row
                .numeric
                .iter()
                .enumerate()
                .map(|(k, v)| v.map(|x| (x - self.mean[k]) / self.std[k]))
                .collect(),
            categorical: row.categorical.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub l_self: f64,
    pub l_cross: f64,
    pub lr: f64,
    /// Top-1 percent on the internal cohort, when validated this epoch.
    pub val_top1: Option<f64>,
}

/// Everything needed to reproduce and inspect one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub data_dir: String,
    pub dataset_fingerprint: String,
    pub tabular_stats: TabularStats,
    pub checkpoint: String,
    pub resume_checkpoint: String,
    pub best_epoch: usize,
    pub best_val_top1: f64,
    pub epochs: Vec<EpochLog>,
    pub reports: BTreeMap<String, EvalReport>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Runtime(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Ingestion(format!("manifest parse: {e}")))
    }
}

/// Cosine schedule from `lr` down to `lr * lr_min_frac` over `total` steps,
/// with an optional linear warmup over the first `warmup` steps.
pub fn cosine_lr(step: usize, total: usize, lr: f64, lr_min_frac: f64, warmup: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    let lr_min = lr * lr_min_frac;
    let decay_total = total.saturating_sub(warmup);
    let decay_step = step.saturating_sub(warmup);
    if decay_total <= 1 {
        return lr;
    }
    let t = decay_step.min(decay_total - 1) as f64 / (decay_total - 1) as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Check that a config and a dataset agree before any side effects.
pub fn check_compat(cfg: &ModelConfig, dataset: &Dataset) -> Result<()> {
    if cfg.num_sequences != dataset.schema.sequences.len() {
        return Err(Error::Validation(format!(
            "config expects {} sequences, dataset declares {:?}",
            cfg.num_sequences, dataset.schema.sequences
        )));
    }
    if cfg.num_classes != dataset.schema.num_classes {
        return Err(Error::Validation(format!(
            "config expects {} classes, dataset declares {}",
            cfg.num_classes, dataset.schema.num_classes
        )));
    }
    if cfg.enable_tabular_encoder && dataset.schema.tabular.feature_count() == 0 {
        return Err(Error::Validation(
            "tabular encoder enabled but the dataset schema declares no tabular features".into(),
        ));
    }
    if dataset.cohort(Cohort::Train).is_empty() {
        return Err(Error::Validation("dataset has no train cohort".into()));
    }
    Ok(())
}

/// Assemble a model batch from prepared cases, optionally augmenting.
fn assemble_batch(
    cases: &[&PreparedCase],
    cfg: &ModelConfig,
    schema: &TabularSchema,
    stats: &TabularStats,
    augment_seeds: Option<&[u64]>,
) -> Batch {
    let [d, h, w] = cfg.input_shape;
    let b = cases.len();
    let mut volumes: Vec<Array> = (0..cfg.num_sequences)
        .map(|_| Array::zeros(&[b, 1, d, h, w]))
        .collect();
    let vol_len = d * h * w;
    for (bi, case) in cases.iter().enumerate() {
        let vols: Vec<Array> = match augment_seeds {
            Some(seeds) => crate::augment::augment(&case.volumes, seeds[bi]),
            None => case.volumes.clone(),
        };
        for (s, v) in vols.iter().enumerate() {
            volumes[s].data_mut()[bi * vol_len..(bi + 1) * vol_len].copy_from_slice(v.data());
        }
    }
    let labels = cases.iter().map(|c| c.label).collect();
    let tabular = cfg.enable_tabular_encoder.then(|| {
        let rows: Vec<crate::data::TabularRow> =
            cases.iter().map(|c| stats.standardize(&c.tabular)).collect();
        // Post-standardization the per-column means are zero.
        tabular_batch(&rows, schema, &vec![0.0; schema.numeric.len()])
    });
    Batch { volumes, labels, tabular }
}

/// Softmax probabilities for every prepared case, in batches.
pub fn score_cases(
    model: &DesambaModel,
    store: &ParamStore,
    cases: &[PreparedCase],
    schema: &TabularSchema,
    stats: &TabularStats,
    batch_size: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut scores = Vec::with_capacity(cases.len());
    let mut labels = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedCase> = chunk.iter().collect();
        let batch = assemble_batch(&refs, &model.config, schema, stats, None);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, &batch, false, None)?;
        let logits = tape.value(out.logits);
        let [bn, classes] = logits.dims2();
        for bi in 0..bn {
            let row = &logits.data()[bi * classes..(bi + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            scores.push(row.iter().map(|v| (v - m).exp() / z).collect());
            labels.push(batch.labels[bi]);
        }
    }
    Ok((scores, labels))
}

/// Evaluate one cohort into a full report. Top-k rows cover k = 1..=3
/// (clipped to the class count).
pub fn evaluate_cohort(
    model: &DesambaModel,
    store: &ParamStore,
    dataset: &Dataset,
    cohort: Cohort,
    stats: &TabularStats,
    batch_size: usize,
    bootstrap: Option<(usize, u64)>,
) -> Result<EvalReport> {
    let cases = dataset.cohort(cohort);
    if cases.is_empty() {
        return Err(Error::Validation(format!(
            "cohort {cohort} absent; available: {:?}",
            dataset
                .available_cohorts()
                .iter()
                .map(|c| c.dir_name())
                .collect::<Vec<_>>()
        )));
    }
    let prepared: Vec<PreparedCase> = cases
        .iter()
        .map(|c| preprocess(c, model.config.input_shape))
        .collect::<Result<_>>()?;
    let (scores, labels) = score_cases(model, store, &prepared, &dataset.schema.tabular, stats, batch_size)?;
    let classes = model.config.num_classes;
    let ks: Vec<usize> = (1..=3.min(classes)).collect();
    evaluate(&scores, &labels, classes, &ks, bootstrap)
}

fn checkpoint_save(path: &Path, store: &ParamStore, opt: &AdamW, next_epoch: usize) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(b"DSCK")?;
    w.write_all(&(next_epoch as u64).to_le_bytes())?;
    store.save(&mut w)?;
    opt.save(&mut w)?;
    Ok(())
}

fn checkpoint_load(path: &Path, store: &mut ParamStore, opt: &mut AdamW) -> Result<usize> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"DSCK" {
        return Err(Error::Ingestion(format!("{}: not a checkpoint", path.display())));
    }
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    let next_epoch = u64::from_le_bytes(buf) as usize;
    store.load(&mut r)?;
    opt.load(&mut r)?;
    Ok(next_epoch)
}

/// Train a model on the dataset's train cohort, validating on the internal
/// cohort, and write `best.params`, `last.ckpt` and `manifest.toml` under
/// `out_dir`. `stop_after` caps how many epochs this invocation runs while
/// keeping the configured schedule horizon, emulating an interrupted run
/// that a later `resume` continues.
pub fn train(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<RunManifest> {
    cfg.model.validate()?;
    check_compat(&cfg.model, dataset)?;
    std::fs::create_dir_all(out_dir)?;
    let seed = cfg.model.seed;
    let schema = &dataset.schema;
    let stats = TabularStats::from_train(dataset.cohort(Cohort::Train), &schema.tabular);

    let (model, mut store) = DesambaModel::build(
        &cfg.model,
        cfg.model.enable_tabular_encoder.then_some(&schema.tabular),
    )?;
    let mut opt = AdamW::new(&store, cfg.train.weight_decay);

    let train_prepared: Vec<PreparedCase> = dataset
        .cohort(Cohort::Train)
        .iter()
        .map(|c| preprocess(c, cfg.model.input_shape))
        .collect::<Result<_>>()?;
    let val_prepared: Vec<PreparedCase> = dataset
        .cohort(Cohort::InternalTest)
        .iter()
        .map(|c| preprocess(c, cfg.model.input_shape))
        .collect::<Result<_>>()?;

    let n = train_prepared.len();
    let batch_size = cfg.train.batch_size.max(1).min(n);
    let steps_per_epoch = n.div_ceil(batch_size);
    let total_steps = steps_per_epoch * cfg.train.epochs;

    let mut start_epoch = 0usize;
    let mut epoch_logs: Vec<EpochLog> = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<Vec<u8>> = None;
    if let Some(ckpt) = resume {
        start_epoch = checkpoint_load(ckpt, &mut store, &mut opt)?;
        // Recover log and best-so-far from the previous manifest when present.
        let prev_manifest = ckpt.parent().unwrap_or(Path::new(".")).join("manifest.toml");
        if prev_manifest.exists() {
            let prev = RunManifest::load(&prev_manifest)?;
            epoch_logs = prev.epochs.into_iter().filter(|e| e.epoch < start_epoch).collect();
            best_epoch = prev.best_epoch;
            best_val = if prev.best_val_top1.is_finite() { prev.best_val_top1 } else { f64::NEG_INFINITY };
            let prev_best = ckpt.parent().unwrap_or(Path::new(".")).join(&prev.checkpoint);
            if prev_best.exists() {
                best_params = Some(std::fs::read(prev_best)?);
            }
        }
    }

    let end_epoch = match stop_after {
        Some(k) => cfg.train.epochs.min(start_epoch + k),
        None => cfg.train.epochs,
    };
    let mut global_step = start_epoch * steps_per_epoch;
    for epoch in start_epoch..end_epoch {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = Rng::for_component(seed, &format!("shuffle/{epoch}"));
        shuffle_rng.shuffle(&mut order);
        let (mut sum_total, mut sum_ce, mut sum_self, mut sum_cross, mut seen) =
            (0.0, 0.0, 0.0, 0.0, 0usize);
        let mut lr_now = cfg.train.lr;
        for chunk in order.chunks(batch_size) {
            let cases: Vec<&PreparedCase> = chunk.iter().map(|&i| &train_prepared[i]).collect();
            let aug_seeds: Option<Vec<u64>> = cfg.train.augment.then(|| {
                cases
                    .iter()
                    .map(|c| derive_seed(seed, &format!("augment/{}/{epoch}", c.case_id)))
                    .collect()
            });
            let batch = assemble_batch(&cases, &cfg.model, &schema.tabular, &stats, aug_seeds.as_deref());
            let mut tape = Tape::new();
            let mut dropout_rng = Rng::for_component(seed, &format!("dropout/{global_step}"));
            let out = model.forward(&mut tape, &store, &batch, true, Some(&mut dropout_rng))?;
            let loss = model.losses(&mut tape, &out, &batch.labels)?;
            let grads = tape.backward(loss.total);
            let pgrads = param_grads(&tape, &grads);
            lr_now = cosine_lr(
                global_step,
                total_steps,
                cfg.train.lr,
                cfg.train.lr_min_frac,
                cfg.train.warmup_epochs * steps_per_epoch,
            );
            opt.step(&mut store, &pgrads, lr_now);
            let bd = loss.breakdown(&tape, cfg.model.loss_alpha, cfg.model.loss_beta);
            let bsz = batch.labels.len();
            sum_total += bd.total * bsz as f64;
            sum_ce += bd.l_ce * bsz as f64;
            sum_self += bd.l_self * bsz as f64;
            sum_cross += bd.l_cross * bsz as f64;
            seen += bsz;
            global_step += 1;
        }
        let validate = !val_prepared.is_empty()
            && (epoch % cfg.train.eval_every.max(1) == 0 || epoch + 1 == cfg.train.epochs);
        let val_top1 = if validate {
            let (scores, labels) =
                score_cases(&model, &store, &val_prepared, &schema.tabular, &stats, batch_size)?;
            Some(crate::metrics::topk_accuracy(&scores, &labels, 1)?)
        } else {
            None
        };
        if let Some(v) = val_top1 {
            if v > best_val {
                best_val = v;
                best_epoch = epoch;
                let mut buf = Vec::new();
                store.save(&mut buf)?;
                best_params = Some(buf);
            }
        }
        epoch_logs.push(EpochLog {
            epoch,
            total: sum_total / seen as f64,
            ce: sum_ce / seen as f64,
            l_self: sum_self / seen as f64,
            l_cross: sum_cross / seen as f64,
            lr: lr_now,
            val_top1,
        });
        checkpoint_save(&out_dir.join("last.ckpt"), &store, &opt, epoch + 1)?;
    }

    // Fall back to the final parameters when no validation ever ran.
    let best_bytes = match best_params {
        Some(b) => b,
        None => {
            let mut buf = Vec::new();
            store.save(&mut buf)?;
            best_epoch = cfg.train.epochs.saturating_sub(1);
            buf
        }
    };
    std::fs::write(out_dir.join("best.params"), &best_bytes)?;
    store.load(best_bytes.as_slice())?;

    let mut reports = BTreeMap::new();
    for cohort in [Cohort::InternalTest, Cohort::ExternalTest] {
        if !dataset.cohort(cohort).is_empty() {
            let report =
                evaluate_cohort(&model, &store, dataset, cohort, &stats, batch_size, None)?;
            reports.insert(cohort.dir_name().to_string(), report);
        }
    }

    let manifest = RunManifest {
        config: cfg.clone(),
        seed,
        data_dir: data_dir.to_string_lossy().into_owned(),
        dataset_fingerprint: dataset.fingerprint.clone(),
        tabular_stats: stats,
        checkpoint: "best.params".into(),
        resume_checkpoint: "last.ckpt".into(),
        best_epoch,
        best_val_top1: if best_val.is_finite() { best_val } else { 0.0 },
        epochs: epoch_logs,
        reports,
    };
    manifest.save(&out_dir.join("manifest.toml"))?;
    Ok(manifest)
}

/// Rebuild a trained model from a manifest directory.
pub fn load_trained(
    manifest_path: &Path,
) -> Result<(RunManifest, DesambaModel, ParamStore, Dataset)> {
    let manifest = RunManifest::load(manifest_path)?;
    let dataset = crate::data::load_dataset(Path::new(&manifest.data_dir))?;
    check_compat(&manifest.config.model, &dataset)?;
    let (model, mut store) = DesambaModel::build(
        &manifest.config.model,
        manifest
            .config
            .model
            .enable_tabular_encoder
            .then_some(&dataset.schema.tabular),
    )?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    store.load_path(&dir.join(&manifest.checkpoint))?;
    Ok((manifest, model, store, dataset))
}

/// Output paths of one run.
pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.toml")
}
