//! `segguide`: dataset generation, training, evaluation, backprop guiding and serving.
//!
//! Every subcommand takes an optional `--config file.json` whose keys mirror
//! its flags; flags win over the file. The fully resolved configuration is
//! written next to the outputs so any run can be repeated.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "segguide", version, about = "Guided semantic segmentation on a synthetic shapes world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData(config::GenDataArgs),
    /// Pre-train the segmentation backbone on the backbone half.
    TrainBackbone(config::TrainBackboneArgs),
    /// Train a language guide against a frozen backbone.
    TrainGuide(config::TrainGuideArgs),
    /// Ablation sweep over trained guides.
    Eval(config::EvalArgs),
    /// Question protocol with guiding by back-propagation.
    GuideBp(config::GuideBpArgs),
    /// Export per-class gamma vectors of a trained guide.
    ExportGamma(config::ExportGammaArgs),
    /// Run the HTTP session service.
    Serve(config::ServeArgs),
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let (name, result) = match cli.command {
        Command::GenData(a) => ("gen-data", commands::gen_data(a)),
        Command::TrainBackbone(a) => ("train-backbone", commands::train_backbone(a)),
        Command::TrainGuide(a) => ("train-guide", commands::train_guide(a)),
        Command::Eval(a) => ("eval", commands::eval(a)),
        Command::GuideBp(a) => ("guide-bp", commands::guide_bp(a)),
        Command::ExportGamma(a) => ("export-gamma", commands::export_gamma(a)),
        Command::Serve(a) => ("serve", commands::serve(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let body = serde_json::json!({
                "error": { "command": name, "message": f.message, "hint": f.hint }
            });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
