//! Command layer shared by the CLI and the test harnesses: synthetic data
//! generation, training, evaluation, the ablation sweep, Grad-CAM export,
//! and complexity reporting. Every command validates all inputs before any
//! side effect.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{load_experiment, AblationRegistry, ExperimentConfig, FLAG_NAMES};
use crate::data::{load_dataset, write_dataset, Cohort, Dataset, MultiSequenceCase};
use crate::error::{Error, Result};
use crate::explain::{gradcam3d, overlay_export, Explanation};
use crate::metrics::EvalReport;
use crate::model::{complexity, ComplexityReport, DesambaModel};
use crate::preprocess::preprocess;
use crate::synth::{synth_generate, SynthSpec};
use crate::train::{evaluate_cohort, load_trained, train, RunManifest};

/// Generate a synthetic dataset on disk; returns the content fingerprint.
pub fn cmd_synth(spec_path: &Path, out_dir: &Path, seed: u64) -> Result<String> {
    let spec = SynthSpec::load(spec_path)?;
    let (schema, cases) = synth_generate(&spec, seed)?;
    write_dataset(out_dir, &schema, &cases)?;
    crate::data::fingerprint_dir(out_dir)
}

/// Train one run from a config file.
pub fn cmd_train(
    config_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<RunManifest> {
    let cfg = load_experiment(config_path)?;
    let dataset = load_dataset(data_dir)?;
    train(&cfg, &dataset, data_dir, out_dir, resume, stop_after)
}

/// Evaluate a trained run on one cohort.
pub fn cmd_eval(
    manifest_path: &Path,
    cohort: &str,
    bootstrap: Option<usize>,
) -> Result<(EvalReport, String)> {
    let cohort = Cohort::parse(cohort)?;
    let (manifest, model, store, dataset) = load_trained(manifest_path)?;
    let report = evaluate_cohort(
        &model,
        &store,
        &dataset,
        cohort,
        &manifest.tabular_stats,
        manifest.config.train.batch_size,
        bootstrap.map(|b| (b, manifest.seed)),
    )?;
    let rendered = report.render(cohort.dir_name());
    Ok((report, rendered))
}

/// One row of the ablation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub name: String,
    pub flags: [bool; 7],
    pub internal: EvalReport,
    pub external: EvalReport,
}

/// Filesystem-safe directory name for an ablation variant.
pub fn variant_dir_name(name: &str) -> String {
    let mut out: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    while out.contains("__") {
        out = out.replace("__", "_");
    }
    out.trim_matches('_').to_string()
}

/// Render the ablation table: flag columns plus ACC/F1/Top3Acc/AUC for both
/// cohorts.
pub fn render_ablation_table(rows: &[AblationOutcome]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10}{}  {:>7}{:>7}{:>9}{:>7}  |{:>7}{:>7}{:>9}{:>7}\n",
        "Model",
        FLAG_NAMES.map(|f| format!("{f:>4}")).join(""),
        "ACC",
        "F1",
        "Top3Acc",
        "AUC",
        "ACC",
        "F1",
        "Top3Acc",
        "AUC"
    ));
    for row in rows {
        let flags: String = row
            .flags
            .iter()
            .map(|&b| format!("{:>4}", if b { "v" } else { "x" }))
            .collect();
        let cohort_cells = |r: &EvalReport| -> String {
            let top3 = r.topk.get(&3).or_else(|| r.topk.get(&2)).copied().unwrap_or(100.0);
            format!(
                "{:>7.2}{:>7.2}{:>9.2}{:>7.2}",
                r.macro_avg.accuracy, r.macro_avg.f1, top3, r.macro_avg.auc
            )
        };
        out.push_str(&format!(
            "{:<10}{}  {}  |{}\n",
            row.name,
            flags,
            cohort_cells(&row.internal),
            cohort_cells(&row.external)
        ));
    }
    out
}

/// Run all ten ablation variants end to end with shared seeds. Every
/// variant is validated and built before any training starts (fail-fast).
pub fn cmd_ablate(config_path: &Path, data_dir: &Path, out_dir: &Path) -> Result<Vec<AblationOutcome>> {
    let base = load_experiment(config_path)?;
    let dataset = load_dataset(data_dir)?;
    let registry = AblationRegistry::new(base.model.clone())?;
    let variants = registry.all()?;

    // Validation pass over all ten before touching the filesystem.
    for (name, cfg) in &variants {
        cfg.validate()
            .map_err(|e| Error::Validation(format!("variant {name}: {e}")))?;
        crate::train::check_compat(cfg, &dataset)
            .map_err(|e| Error::Validation(format!("variant {name}: {e}")))?;
        DesambaModel::build(
            cfg,
            cfg.enable_tabular_encoder.then_some(&dataset.schema.tabular),
        )
        .map_err(|e| Error::Validation(format!("variant {name}: {e}")))?;
    }

    std::fs::create_dir_all(out_dir)?;
    let mut outcomes = Vec::with_capacity(variants.len());
    for (name, cfg) in &variants {
        let run_cfg = ExperimentConfig { model: cfg.clone(), train: base.train.clone() };
        let run_dir = out_dir.join(variant_dir_name(name));
        let manifest = train(&run_cfg, &dataset, data_dir, &run_dir, None, None)?;
        let internal = manifest
            .reports
            .get("internal_test")
            .cloned()
            .ok_or_else(|| Error::Runtime(format!("variant {name}: no internal report")))?;
        let external = manifest
            .reports
            .get("external_test")
            .cloned()
            .ok_or_else(|| Error::Runtime(format!("variant {name}: no external report")))?;
        outcomes.push(AblationOutcome { name: name.clone(), flags: cfg.flags(), internal, external });
    }
    let table = render_ablation_table(&outcomes);
    std::fs::write(out_dir.join("ablation_table.txt"), &table)?;
    let toml_text = toml::to_string_pretty(&outcomes_wrapper(&outcomes))
        .map_err(|e| Error::Runtime(format!("ablation serialization: {e}")))?;
    std::fs::write(out_dir.join("ablation.toml"), toml_text)?;
    Ok(outcomes)
}

#[derive(Serialize, Deserialize)]
struct OutcomeList {
    rows: Vec<AblationOutcome>,
}

fn outcomes_wrapper(rows: &[AblationOutcome]) -> OutcomeList {
    OutcomeList { rows: rows.to_vec() }
}

/// Locate a case by id across cohorts.
fn find_case<'d>(dataset: &'d Dataset, case_id: &str) -> Result<&'d MultiSequenceCase> {
    for cohort in Cohort::ALL {
        if let Some(case) = dataset.cohort(cohort).iter().find(|c| c.case_id == case_id) {
            return Ok(case);
        }
    }
    let mut known: Vec<&str> = Vec::new();
    for cohort in Cohort::ALL {
        known.extend(dataset.cohort(cohort).iter().take(3).map(|c| c.case_id.as_str()));
    }
    Err(Error::Validation(format!(
        "case {case_id:?} not found; examples of known ids: {}",
        known.join(", ")
    )))
}

/// Grad-CAM export for one case: writes per-slice overlays for the chosen
/// sequence and returns the explanation plus written paths.
#[allow(clippy::too_many_arguments)]
pub fn cmd_explain(
    manifest_path: &Path,
    case_id: &str,
    sequence: Option<&str>,
    layer: Option<&str>,
    target_class: Option<usize>,
    out_dir: &Path,
) -> Result<(Explanation, Vec<PathBuf>)> {
    let (manifest, model, store, dataset) = load_trained(manifest_path)?;
    let case = find_case(&dataset, case_id)?;
    let seq_index = match sequence {
        Some(name) => dataset
            .schema
            .sequences
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "sequence {name:?} not in {:?}",
                    dataset.schema.sequences
                ))
            })?,
        None => 0,
    };
    let layer_id = layer.map(str::to_string).unwrap_or_else(|| model.default_layer());
    let prepared = preprocess(case, model.config.input_shape)?;
    let explanation = gradcam3d(
        &model,
        &store,
        &prepared,
        &dataset.schema.tabular,
        &manifest.tabular_stats,
        target_class,
        &layer_id,
    )?;
    let prefix = format!(
        "{case_id}_{}_{}",
        dataset.schema.sequences[seq_index],
        variant_dir_name(&layer_id)
    );
    let paths = overlay_export(
        &prepared.volumes[seq_index],
        &explanation.heatmap,
        Some(&prepared.mask),
        out_dir,
        &prefix,
    )?;
    Ok((explanation, paths))
}

/// Parameter/MAC report for a config. When the config enables the tabular
/// encoder, the schema comes from `data_dir` or falls back to the synthetic
/// generator's default schema.
pub fn cmd_complexity(config_path: &Path, data_dir: Option<&Path>) -> Result<(ComplexityReport, String)> {
    let cfg = crate::config::load_config(config_path)?;
    let schema_holder;
    let schema = if cfg.enable_tabular_encoder {
        schema_holder = match data_dir {
            Some(dir) => load_dataset(dir)?.schema,
            None => SynthSpec::six_class([16, 64, 64], 1).schema(),
        };
        Some(&schema_holder.tabular)
    } else {
        None
    };
    let (model, store) = DesambaModel::build(&cfg, schema)?;
    let report = complexity(&model, &store, 1);
    let rendered = report.render();
    Ok((report, rendered))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_dir_names_are_filesystem_safe() {
        assert_eq!(variant_dir_name("w/De(C)"), "w_De_C");
        assert_eq!(variant_dir_name("DeSamba"), "DeSamba");
        assert_eq!(variant_dir_name("w/TF"), "w_TF");
    }

    #[test]
    fn synth_command_round_trips_with_fingerprint() {
        let root = std::env::temp_dir().join("desamba_cmd_synth");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let spec = SynthSpec::binary([12, 20, 20], 1);
        let spec_path = root.join("spec.toml");
        std::fs::write(&spec_path, toml::to_string_pretty(&spec).unwrap()).unwrap();
        let fp1 = cmd_synth(&spec_path, &root.join("d1"), 9).unwrap();
        let fp2 = cmd_synth(&spec_path, &root.join("d2"), 9).unwrap();
        assert_eq!(fp1, fp2, "same spec + seed must give identical content hashes");
        let fp3 = cmd_synth(&spec_path, &root.join("d3"), 10).unwrap();
        assert_ne!(fp1, fp3);
        // Cohort subdirectories exist.
        for cohort in ["train", "internal_test", "external_test"] {
            assert!(root.join("d1").join(cohort).is_dir());
        }
    }

    #[test]
    fn invalid_spec_is_a_config_error() {
        let root = std::env::temp_dir().join("desamba_cmd_synth_bad");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let mut spec = SynthSpec::binary([12, 20, 20], 1);
        spec.classes[1].center = spec.classes[0].center;
        let spec_path = root.join("spec.toml");
        std::fs::write(&spec_path, toml::to_string_pretty(&spec).unwrap()).unwrap();
        let err = cmd_synth(&spec_path, &root.join("out"), 1).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn ablation_table_renders_ten_rows_with_flags() {
        let report = EvalReport {
            topk: [(1, 50.0), (3, 90.0)].into_iter().collect(),
            ..Default::default()
        };
        let rows: Vec<AblationOutcome> = crate::config::ABLATION_ROWS
            .iter()
            .map(|(name, flags)| AblationOutcome {
                name: name.to_string(),
                flags: *flags,
                internal: report.clone(),
                external: report.clone(),
            })
            .collect();
        let table = render_ablation_table(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 11, "header + 10 rows");
        assert!(lines[0].contains("TE") && lines[0].contains("Top3Acc"));
        // CNV2 row: only CE checked.
        let cnv2 = lines[1];
        assert!(cnv2.starts_with("CNV2"));
        assert_eq!(cnv2.matches(" v").count(), 1, "{cnv2}");
    }
}
