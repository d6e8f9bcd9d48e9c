//! `gls`: batch scoring, experiments and a scoring server for generated
//! pathology reports.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::ablate::{AblateArgs, SweepArgs};
use commands::gate::GateArgs;
use commands::score::ScoreArgs;
use commands::sensitivity::SensitivityArgs;
use commands::serve::ServeArgs;
use commands::synth::SynthArgs;

#[derive(Debug, Parser)]
#[command(
    name = "gls",
    version,
    about = "Reference-free grounding, logic and stability scores for pathology reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every case of a manifest: `<case_id>.json`, summary.csv, errors.jsonl, aggregate.json.
    Score(ScoreArgs),
    /// Relative score drop of the perturbed groups of a caption corpus.
    Sensitivity(SensitivityArgs),
    /// Spearman ρ against a severity ranking with each axis removed.
    Ablate(AblateArgs),
    /// Re-route existing bundles under the configured thresholds.
    Gate(GateArgs),
    /// Serve the provider wire protocol and `/v1/score` over HTTP.
    Serve(ServeArgs),
    /// Spearman ρ against a severity ranking over a grid of fusion weights.
    Sweep(SweepArgs),
    /// Write a synthetic manifest and perturbed corpus.
    Synth(SynthArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Score(a) => commands::score::run(a),
        Command::Sensitivity(a) => commands::sensitivity::run(a),
        Command::Ablate(a) => commands::ablate::run_ablate(a),
        Command::Gate(a) => commands::gate::run(a),
        Command::Serve(a) => commands::serve::run(a),
        Command::Sweep(a) => commands::ablate::run_sweep(a),
        Command::Synth(a) => commands::synth::run(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("gls: {e}");
            e.exit_code()
        }
    }
}
