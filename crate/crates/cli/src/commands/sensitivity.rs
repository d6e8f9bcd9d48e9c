//! `gls sensitivity`: score every caption of a perturbed corpus as a supplied
//! report and report each group's relative drop against control.

use std::path::PathBuf;

use anyhow::anyhow;
use clap::Args;
use rayon::prelude::*;

use gls_core::experiments::{run_sensitivity, CorpusCase};
use gls_core::manifest::{load_corpus, load_rgb};

use super::{
    check_case_id, write_errors, write_json, CliError, CliResult, CommonArgs, ConfigContext, Context, ErrorRecord,
    EXIT_OK, EXIT_PARTIAL,
};

#[derive(Debug, Clone, Args)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSON Lines perturbed corpus: {"case_id", "image", "control",
    /// "visual_hallucination"?, "logic_error"?, "provenance"?}.
    #[arg(long)]
    pub manifest: PathBuf,
}

pub fn run(args: &SensitivityArgs) -> CliResult<u8> {
    let ctx = Context::load(&args.common)?;
    let corpus = load_corpus(&args.manifest).config_err("loading corpus")?;
    for e in &corpus {
        check_case_id(&e.case_id)?;
    }
    ctx.ensure_out_dir()?;
    let hash = ctx.config_hash();

    let loaded: Vec<Result<CorpusCase, ErrorRecord>> = ctx.pool.install(|| {
        corpus
            .par_iter()
            .map(|e| {
                Ok(CorpusCase {
                    case_id: e.case_id.clone(),
                    image: load_rgb(&e.image).map_err(|err| ErrorRecord::new(&e.case_id, "input", err, hash))?,
                    triple: e.triple(),
                })
            })
            .collect()
    });
    let mut cases = Vec::new();
    let mut errors = Vec::new();
    for r in loaded {
        match r {
            Ok(c) => cases.push(c),
            Err(e) => errors.push(e),
        }
    }

    let report = if cases.is_empty() {
        None
    } else {
        match ctx.pool.install(|| run_sensitivity(&cases, &ctx.evaluator)) {
            Ok(r) => Some(r),
            Err(e) => {
                errors.push(ErrorRecord::new("*", "sensitivity", &e, hash));
                None
            }
        }
    };
    ctx.flush_transcript()?;
    write_errors(&ctx.out_dir.join("errors.jsonl"), &errors)?;
    let Some(report) = report else {
        return Err(CliError::Io(anyhow!(
            "no sensitivity report produced; see {}",
            ctx.out_dir.join("errors.jsonl").display()
        )));
    };
    for row in &report.rows {
        eprintln!(
            "{:<4} {:<22} control {:.4}  perturbed {:.4}  Δ {:>6.1}%",
            row.metric,
            format!("{:?}", row.group),
            row.control_mean,
            row.perturbed_mean,
            row.delta_percent
        );
    }
    write_json(&ctx.out_dir.join("sensitivity.json"), hash, &report)?;
    Ok(if errors.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}
