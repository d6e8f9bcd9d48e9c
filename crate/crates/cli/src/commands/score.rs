//! `gls score`: one bundle per case, a CSV summary, an errors file and
//! per-cohort aggregates.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use gls_core::fusion::{fuse_available, Weights, TOOL_VERSION};
use gls_core::manifest::{load_rgb, CaseManifest, ManifestEntry};
use gls_core::stain::perturb_stains;
use gls_core::{CaseInput, Evaluator, ScoreBundle};

use super::{
    check_case_id, write_errors, write_json, write_text, CliResult, CommonArgs, ConfigContext, Context, ErrorRecord,
    EXIT_OK, EXIT_PARTIAL,
};

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSON Lines case manifest: {"case_id", "image", "report"?, "cohort"?}.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Also write the stain-perturbed views as PNG under `<out>/perturbed/`.
    #[arg(long)]
    pub dump_perturbed: bool,
}

/// One row of `summary.csv`.
#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    case_id: &'a str,
    s_g: f64,
    s_l: f64,
    s_s: Option<f64>,
    s_total: f64,
    routing: &'static str,
    config_hash: &'a str,
    tool_version: &'static str,
}

/// Axis means for one cohort, fused both ways: the mean of per-case totals and
/// the fusion of the axis means.
#[derive(Debug, Serialize)]
pub struct CohortSummary {
    pub cohort: String,
    pub cases: usize,
    pub mean_s_g: f64,
    pub mean_s_l: f64,
    pub mean_s_s: Option<f64>,
    pub mean_s_total: f64,
    pub fused_axis_means: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Aggregate {
    scored: usize,
    failed: usize,
    cohorts: Vec<CohortSummary>,
}

pub struct Scored {
    pub bundles: Vec<(ScoreBundle, Option<String>)>,
    pub errors: Vec<ErrorRecord>,
}

/// Loads each entry's image and scores it on the context's worker pool.
/// Failures are isolated per case. Results come back sorted by case id.
pub fn score_entries(ctx: &Context, entries: &[ManifestEntry], dump_dir: Option<&Path>) -> Scored {
    let hash = ctx.config_hash();
    let results: Vec<Result<(ScoreBundle, Option<String>), ErrorRecord>> = ctx.pool.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let image = load_rgb(&e.image).map_err(|err| ErrorRecord::new(&e.case_id, "input", err, hash))?;
                let bundle = ctx
                    .evaluator
                    .evaluate(&CaseInput {
                        case_id: &e.case_id,
                        image: &image,
                        report: e.report.as_deref(),
                    })
                    .map_err(|err| ErrorRecord::new(&e.case_id, err.stage.to_string(), &err.source, hash))?;
                if let Some(dir) = dump_dir {
                    dump_perturbed(dir, &ctx.evaluator, &bundle, &image)
                        .map_err(|err| ErrorRecord::new(&e.case_id, "dump", err, hash))?;
                }
                Ok((bundle, e.cohort.clone()))
            })
            .collect()
    });
    let mut bundles = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(b) => bundles.push(b),
            Err(e) => errors.push(e),
        }
    }
    bundles.sort_by(|a, b| a.0.case_id.cmp(&b.0.case_id));
    errors.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Scored { bundles, errors }
}

/// Re-derives the stain-perturbed view(s) from the recorded spec and saves them.
fn dump_perturbed(dir: &Path, ev: &Evaluator, bundle: &ScoreBundle, image: &image::RgbImage) -> anyhow::Result<()> {
    let Some(st) = &bundle.evidence.stability else {
        return Ok(());
    };
    let macenko = &ev.config.stability_options.macenko;
    let views = 1 + st.ensemble_augmented.len() as u64;
    for k in 0..views {
        let mut spec = st.perturbation;
        spec.seed = spec.seed.wrapping_add(k);
        let img = perturb_stains::<f64>(image, &spec, macenko)?;
        let name = if k == 0 {
            format!("{}.png", bundle.case_id)
        } else {
            format!("{}-{k}.png", bundle.case_id)
        };
        img.save(dir.join(name))?;
    }
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn cohort_summary(cohort: &str, bundles: &[&ScoreBundle], weights: &Weights<f64>) -> CohortSummary {
    let g = mean(bundles.iter().map(|b| b.s_g)).unwrap_or(0.0);
    let l = mean(bundles.iter().map(|b| b.s_l)).unwrap_or(0.0);
    let s = mean(bundles.iter().filter_map(|b| b.s_s));
    CohortSummary {
        cohort: cohort.to_owned(),
        cases: bundles.len(),
        mean_s_g: g,
        mean_s_l: l,
        mean_s_s: s,
        mean_s_total: mean(bundles.iter().map(|b| b.s_total)).unwrap_or(0.0),
        fused_axis_means: fuse_available([Some(g), Some(l), s], weights).ok(),
    }
}

pub fn summary_csv(bundles: &[&ScoreBundle], config_hash: &str) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for b in bundles {
        w.serialize(SummaryRow {
            case_id: &b.case_id,
            s_g: b.s_g,
            s_l: b.s_l,
            s_s: b.s_s,
            s_total: b.s_total,
            routing: b.routing.as_str(),
            config_hash,
            tool_version: TOOL_VERSION,
        })
        .io_err("writing summary row")?;
    }
    if bundles.is_empty() {
        w.write_record([
            "case_id",
            "s_g",
            "s_l",
            "s_s",
            "s_total",
            "routing",
            "config_hash",
            "tool_version",
        ])
        .io_err("writing summary header")?;
    }
    w.into_inner().io_err("flushing summary")
}

pub fn run(args: &ScoreArgs) -> CliResult<u8> {
    let ctx = Context::load(&args.common)?;
    let manifest = CaseManifest::load(&args.manifest).config_err("loading manifest")?;
    for e in &manifest.entries {
        check_case_id(&e.case_id)?;
    }
    ctx.ensure_out_dir()?;
    let dump_dir = args.dump_perturbed.then(|| ctx.out_dir.join("perturbed"));
    if let Some(d) = &dump_dir {
        fs::create_dir_all(d).io_err("creating perturbed dump directory")?;
    }

    let scored = score_entries(&ctx, &manifest.entries, dump_dir.as_deref());
    ctx.flush_transcript()?;
    let hash = ctx.config_hash();

    for (b, _) in &scored.bundles {
        let mut text = b.to_json_pretty();
        text.push('\n');
        write_text(&ctx.out_dir.join(format!("{}.json", b.case_id)), text.as_bytes())?;
    }
    let refs: Vec<&ScoreBundle> = scored.bundles.iter().map(|(b, _)| b).collect();
    write_text(&ctx.out_dir.join("summary.csv"), &summary_csv(&refs, hash)?)?;
    write_errors(&ctx.out_dir.join("errors.jsonl"), &scored.errors)?;

    let weights = &ctx.config.eval.weights;
    let mut by_cohort: BTreeMap<&str, Vec<&ScoreBundle>> = BTreeMap::new();
    for (b, c) in &scored.bundles {
        if let Some(c) = c {
            by_cohort.entry(c.as_str()).or_default().push(b);
        }
    }
    let mut cohorts = vec![cohort_summary("all", &refs, weights)];
    cohorts.extend(by_cohort.iter().map(|(c, bs)| cohort_summary(c, bs, weights)));
    write_json(
        &ctx.out_dir.join("aggregate.json"),
        hash,
        Aggregate {
            scored: scored.bundles.len(),
            failed: scored.errors.len(),
            cohorts,
        },
    )?;

    for e in &scored.errors {
        eprintln!("case {} failed at {}: {}", e.case_id, e.stage, e.error);
    }
    eprintln!(
        "scored {} of {} cases into {}",
        scored.bundles.len(),
        manifest.entries.len(),
        ctx.out_dir.display()
    );
    Ok(if scored.errors.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    })
}
