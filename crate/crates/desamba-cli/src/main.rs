//! `desamba` command-line interface.
//!
//! Exit codes: 0 success, 1 usage, 2 validation/configuration, 3 runtime.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use desamba::commands;
use desamba::error::Error;

#[derive(Parser)]
#[command(
    name = "desamba",
    version,
    about = "Decoupled multi-sequence representation learning with spectral adaptive modulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-sequence dataset from a spec file.
    Synth {
        /// Synthesis spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator seed.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train a model; writes checkpoints and a run manifest.
    Train {
        /// Experiment config (TOML, [model] + [train]).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Run output directory.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a `last.ckpt` checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs (the schedule keeps the configured
        /// horizon; resume later to continue).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a trained run on one cohort.
    Eval {
        /// Run manifest produced by `train`.
        #[arg(long)]
        manifest: PathBuf,
        /// Cohort: train, internal_test or external_test.
        #[arg(long)]
        cohort: String,
        /// Bootstrap resamples for 95% confidence intervals.
        #[arg(long)]
        bootstrap: Option<usize>,
    },
    /// Train and evaluate all ten ablation variants.
    Ablate {
        /// Base experiment config shared by every variant.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export Grad-CAM overlays for one case.
    Explain {
        #[arg(long)]
        manifest: PathBuf,
        /// Case id as generated/ingested (e.g. train_c0_0000).
        #[arg(long)]
        case_id: String,
        /// Sequence name to render under the heatmap (default: first).
        #[arg(long)]
        sequence: Option<String>,
        /// Activation layer id (default: last SAMNet stage of sequence 0).
        #[arg(long)]
        layer: Option<String>,
        /// Class to explain (default: the predicted class).
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report exact parameter count and estimated MACs for a config.
    Complexity {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory for the tabular schema (optional).
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { spec, out, seed } => {
            let fingerprint = commands::cmd_synth(&spec, &out, seed)?;
            println!("dataset written to {} (fingerprint {fingerprint})", out.display());
        }
        Command::Train { config, data, out, resume, stop_after } => {
            let manifest =
                commands::cmd_train(&config, &data, &out, resume.as_deref(), stop_after)?;
            println!(
                "trained {} epochs (best internal top-1 {:.2}% at epoch {})",
                manifest.epochs.len(),
                manifest.best_val_top1,
                manifest.best_epoch
            );
            for (cohort, report) in &manifest.reports {
                print!("{}", report.render(cohort));
            }
            println!("manifest: {}", out.join("manifest.toml").display());
        }
        Command::Eval { manifest, cohort, bootstrap } => {
            let (report, rendered) = commands::cmd_eval(&manifest, &cohort, bootstrap)?;
            print!("{rendered}");
            for (metric, (lo, hi)) in &report.ci {
                println!("  {metric} 95% CI: [{lo:.2}, {hi:.2}]");
            }
        }
        Command::Ablate { config, data, out } => {
            let outcomes = commands::cmd_ablate(&config, &data, &out)?;
            print!("{}", commands::render_ablation_table(&outcomes));
            println!("reports under {}", out.display());
        }
        Command::Explain { manifest, case_id, sequence, layer, class, out } => {
            let (explanation, paths) = commands::cmd_explain(
                &manifest,
                &case_id,
                sequence.as_deref(),
                layer.as_deref(),
                class,
                &out,
            )?;
            println!(
                "explained class {} (predicted {}, p = {:.4}) from {}",
                explanation.heatmap.target_class,
                explanation.predicted,
                explanation.probabilities[explanation.predicted],
                explanation.heatmap.source_layer
            );
            println!("{} slice overlays written to {}", paths.len(), out.display());
        }
        Command::Complexity { config, data } => {
            let (_, rendered) = commands::cmd_complexity(&config, data.as_deref())?;
            println!("{rendered}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success; anything else is a usage
            // error (exit 1 per the documented contract).
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
