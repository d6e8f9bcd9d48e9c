//! `gls synth`: write a synthetic case manifest and perturbed corpus (PNG
//! tissue images plus JSON Lines) for smoke tests and demonstrations.

use std::fs;
use std::path::PathBuf;

use clap::Args;

use gls_core::experiments::synthetic::synthetic_corpus;
use gls_core::manifest::{CaseManifest, CorpusEntry, ManifestEntry};

use super::{write_text, CliResult, CommonArgs, ConfigContext, Context, EXIT_OK};

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of cases.
    #[arg(long, default_value_t = 50)]
    pub cases: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: u32,
    /// Seed for the tissue images and caption edits. Keep the provider
    /// settings (`--config`, `--seed`) equal to those used for scoring: captions
    /// are chosen by how well those providers ground them.
    #[arg(long, default_value_t = 0)]
    pub corpus_seed: u64,
    /// Also put each control caption into the case manifest as a supplied report.
    #[arg(long)]
    pub with_reports: bool,
}

pub fn run(args: &SynthArgs) -> CliResult<u8> {
    let ctx = Context::load(&args.common)?;
    let seed = args.corpus_seed;
    let cases = ctx
        .pool
        .install(|| synthetic_corpus(args.cases, args.size, seed, &ctx.evaluator))
        .config_err("generating synthetic corpus")?;
    let images = ctx.out_dir.join("images");
    fs::create_dir_all(&images).io_err("creating image directory")?;

    let mut manifest = CaseManifest::default();
    let mut corpus = String::new();
    for c in &cases {
        let rel = PathBuf::from("images").join(format!("{}.png", c.case_id));
        c.image.save(ctx.out_dir.join(&rel)).io_err("writing synthetic image")?;
        manifest.entries.push(ManifestEntry {
            case_id: c.case_id.clone(),
            image: rel.clone(),
            report: args.with_reports.then(|| c.triple.control.clone()),
            cohort: Some("synthetic".into()),
        });
        let line = serde_json::to_string(&CorpusEntry::from_triple(&c.case_id, rel, &c.triple))
            .io_err("serializing corpus entry")?;
        corpus.push_str(&line);
        corpus.push('\n');
    }
    write_text(&ctx.out_dir.join("manifest.jsonl"), manifest.to_jsonl().as_bytes())?;
    write_text(&ctx.out_dir.join("corpus.jsonl"), corpus.as_bytes())?;
    eprintln!("wrote {} synthetic cases to {}", cases.len(), ctx.out_dir.display());
    Ok(EXIT_OK)
}
