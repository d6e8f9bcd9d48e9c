//! `gls ablate` and `gls sweep`: rank agreement between fused scores and a
//! user-supplied error-severity ranking, with one axis removed at a time or
//! over a grid of fusion weights.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::Args;
use serde::{Deserialize, Serialize};

use gls_core::experiments::{ablate, spearman_rho, AxisScores, ExperimentError};
use gls_core::fusion::{fuse_available, Weights, TOOL_VERSION};
use gls_core::manifest::CaseManifest;
use gls_core::ScoreBundle;

use super::score::score_entries;
use super::{
    check_case_id, write_errors, write_json, write_text, CliError, CliResult, CommonArgs, ConfigContext, Context,
    ErrorRecord, EXIT_OK, EXIT_PARTIAL,
};

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSON Lines case manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// CSV `case_id,severity_rank`; rank 1 is the most severe error.
    #[arg(long)]
    pub severity: PathBuf,
    /// Reuse `<case_id>.json` bundles from this directory instead of rescoring.
    #[arg(long)]
    pub bundles: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub ablate: AblateArgs,
    /// Grid spacing of the weight simplex.
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
}

#[derive(Debug, Deserialize)]
struct SeverityRow {
    case_id: String,
    severity_rank: f64,
}

pub fn load_severity(path: &Path) -> CliResult<BTreeMap<String, f64>> {
    let mut r = csv::Reader::from_path(path).config_err("opening severity file")?;
    let mut out = BTreeMap::new();
    for row in r.deserialize() {
        let row: SeverityRow = row.config_err("parsing severity file")?;
        if !row.severity_rank.is_finite() {
            return Err(CliError::Config(anyhow!(
                "severity rank for {} is not finite",
                row.case_id
            )));
        }
        if out.insert(row.case_id.clone(), row.severity_rank).is_some() {
            return Err(CliError::Config(anyhow!(
                "duplicate severity rank for case {}",
                row.case_id
            )));
        }
    }
    Ok(out)
}

/// Axis scores of the cases that scored, the severity ranking and the failures.
type Collected = (Vec<AxisScores>, BTreeMap<String, f64>, Vec<ErrorRecord>);

/// Scores the manifest (or reads existing bundles), checking up front that
/// every case has a severity rank.
fn collect(ctx: &Context, args: &AblateArgs) -> CliResult<Collected> {
    let manifest = CaseManifest::load(&args.manifest).config_err("loading manifest")?;
    let severity = load_severity(&args.severity)?;
    for e in &manifest.entries {
        check_case_id(&e.case_id)?;
        if !severity.contains_key(&e.case_id) {
            return Err(CliError::Config(
                ExperimentError::MissingSeverity(e.case_id.clone()).into(),
            ));
        }
    }
    let hash = ctx.config_hash();
    let (bundles, errors) = match &args.bundles {
        Some(dir) => {
            let mut bundles = Vec::new();
            let mut errors = Vec::new();
            for e in &manifest.entries {
                let path = dir.join(format!("{}.json", e.case_id));
                match read_bundle(&path) {
                    Ok(b) => bundles.push(b),
                    Err(err) => errors.push(ErrorRecord::new(&e.case_id, "input", err, hash)),
                }
            }
            (bundles, errors)
        }
        None => {
            let scored = score_entries(ctx, &manifest.entries, None);
            ctx.flush_transcript()?;
            (scored.bundles.into_iter().map(|(b, _)| b).collect(), scored.errors)
        }
    };
    let cases = bundles.iter().map(AxisScores::from).collect();
    Ok((cases, severity, errors))
}

pub fn read_bundle(path: &Path) -> anyhow::Result<ScoreBundle> {
    let text = fs::read_to_string(path).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

pub fn run_ablate(args: &AblateArgs) -> CliResult<u8> {
    let ctx = Context::load(&args.common)?;
    let (cases, severity, errors) = collect(&ctx, args)?;
    ctx.ensure_out_dir()?;
    write_errors(&ctx.out_dir.join("errors.jsonl"), &errors)?;
    let table = ablate(&cases, &severity, &ctx.config.eval.weights).io_err("computing ablation")?;
    eprintln!("ρ(full) = {:.4} over {} cases", table.rho_full, table.cases);
    for row in &table.rows {
        let drop = row
            .drop_percent
            .map(|d| format!("{d:.1}%"))
            .unwrap_or_else(|| "n/a".into());
        eprintln!("ρ(−{}) = {:.4}  drop {drop}", row.removed, row.rho);
    }
    write_json(&ctx.out_dir.join("ablation.json"), ctx.config_hash(), &table)?;
    Ok(if errors.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}

#[derive(Debug, Serialize)]
struct SweepRow<'a> {
    w_g: f64,
    w_l: f64,
    w_s: f64,
    rho: Option<f64>,
    config_hash: &'a str,
    tool_version: &'static str,
}

/// Every weight vector on the simplex grid with spacing `1/n`; the stability
/// weight is pinned to 0 when no case has a stability score.
pub fn simplex_grid(n: u32, with_stability: bool) -> Vec<Weights<f64>> {
    let nf = f64::from(n);
    let mut out = Vec::new();
    for i in 0..=n {
        for j in 0..=n - i {
            let k = n - i - j;
            if !with_stability && k != 0 {
                continue;
            }
            if let Ok(w) = Weights::new(f64::from(i) / nf, f64::from(j) / nf, f64::from(k) / nf) {
                out.push(w);
            }
        }
    }
    out
}

pub fn run_sweep(args: &SweepArgs) -> CliResult<u8> {
    if !(args.step > 0.0 && args.step <= 1.0) {
        return Err(CliError::Config(anyhow!("--step must be in (0, 1]")));
    }
    let n = (1.0 / args.step).round().max(1.0) as u32;
    let ctx = Context::load(&args.ablate.common)?;
    let (mut cases, severity, errors) = collect(&ctx, &args.ablate)?;
    ctx.ensure_out_dir()?;
    write_errors(&ctx.out_dir.join("errors.jsonl"), &errors)?;
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let ranks: Vec<f64> = cases.iter().map(|c| severity[&c.case_id]).collect();
    let with_stability = cases.iter().any(|c| c.s_s.is_some());

    let mut rows: Vec<(Weights<f64>, Option<f64>)> = simplex_grid(n, with_stability)
        .into_iter()
        .map(|w| {
            let fused: Result<Vec<f64>, _> = cases
                .iter()
                .map(|c| fuse_available([Some(c.s_g), Some(c.s_l), c.s_s], &w))
                .collect();
            let rho = fused.ok().and_then(|f| spearman_rho(&f, &ranks).ok());
            (w, rho)
        })
        .collect();
    // best first; undefined correlations last; ties in grid order
    rows.sort_by(|a, b| match (a.1, b.1) {
        (Some(x), Some(y)) => y.partial_cmp(&x).unwrap_or(Ordering::Equal),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    });

    let hash = ctx.config_hash();
    let mut w = csv::Writer::from_writer(Vec::new());
    for (weights, rho) in &rows {
        w.serialize(SweepRow {
            w_g: weights.w_g,
            w_l: weights.w_l,
            w_s: weights.w_s,
            rho: *rho,
            config_hash: hash,
            tool_version: TOOL_VERSION,
        })
        .io_err("writing sweep row")?;
    }
    write_text(
        &ctx.out_dir.join("sweep.csv"),
        &w.into_inner().io_err("flushing sweep")?,
    )?;
    match rows.first() {
        Some((best, Some(rho))) => eprintln!(
            "best of {} weightings: (w_g, w_l, w_s) = ({:.2}, {:.2}, {:.2}), ρ = {rho:.4}",
            rows.len(),
            best.w_g,
            best.w_l,
            best.w_s
        ),
        _ => eprintln!("rank correlation undefined for every weighting"),
    }
    Ok(if errors.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}
