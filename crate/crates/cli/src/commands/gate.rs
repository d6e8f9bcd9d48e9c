//! `gls gate`: re-apply the configured routing thresholds to bundles from an
//! earlier `score` run without rescoring.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use gls_core::fusion::{route, Routing, TOOL_VERSION};

use super::ablate::read_bundle;
use super::{
    write_errors, write_text, CliResult, CommonArgs, ConfigContext, Context, ErrorRecord, EXIT_OK, EXIT_PARTIAL,
};

#[derive(Debug, Clone, Args)]
pub struct GateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory of `<case_id>.json` bundles (default: the output directory).
    #[arg(long)]
    pub bundles: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct GateRow<'a> {
    case_id: &'a str,
    s_total: f64,
    routing: &'static str,
    scored_routing: &'static str,
    config_hash: &'a str,
    tool_version: &'static str,
}

pub fn run(args: &GateArgs) -> CliResult<u8> {
    let ctx = Context::load(&args.common)?;
    let dir = args.bundles.clone().unwrap_or_else(|| ctx.out_dir.clone());
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .config_err("reading bundle directory")?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let thresholds = &ctx.config.eval.thresholds;
    let hash = ctx.config_hash();

    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for p in &paths {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        // run-level artifacts share the directory with the bundles
        if is_artifact(&stem) {
            continue;
        }
        match read_bundle(p) {
            Ok(b) => rows.push((b.case_id.clone(), b.s_total, route(b.s_total, thresholds), b.routing)),
            Err(e) => errors.push(ErrorRecord::new(&stem, "input", e, hash)),
        }
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut counts: BTreeMap<Routing, usize> = BTreeMap::new();
    for (id, total, routing, scored) in &rows {
        *counts.entry(*routing).or_default() += 1;
        w.serialize(GateRow {
            case_id: id,
            s_total: *total,
            routing: routing.as_str(),
            scored_routing: scored.as_str(),
            config_hash: hash,
            tool_version: TOOL_VERSION,
        })
        .io_err("writing gate row")?;
    }
    ctx.ensure_out_dir()?;
    write_text(
        &ctx.out_dir.join("gate.csv"),
        &w.into_inner().io_err("flushing gate table")?,
    )?;
    write_errors(&ctx.out_dir.join("gate_errors.jsonl"), &errors)?;
    let summary: Vec<String> = counts.iter().map(|(r, n)| format!("{r}: {n}")).collect();
    eprintln!(
        "gated {} bundles (deploy ≥ {}, reject ≤ {}): {}",
        rows.len(),
        thresholds.deploy_min,
        thresholds.reject_max,
        summary.join(", ")
    );
    Ok(if errors.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}

fn is_artifact(stem: &str) -> bool {
    matches!(stem, "aggregate" | "sensitivity" | "ablation")
}
