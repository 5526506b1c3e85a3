use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use divrec::config::ExperimentConfig;
use divrec::error::{CliError, Result};
use divrec::report::{aggregate, render_table};
use divrec::stages::{Runner, Stage};
use divrec_core::synth::generate;

#[derive(Parser)]
#[command(
    name = "divrec",
    about = "Diversity-constrained adversarial prompt training and sequential \
             recommendation experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StageArgs {
    /// Experiment configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Re-run even when artifacts are up to date
    #[arg(long)]
    force: bool,
    /// Run seed; defaults to the first entry of the config's seed list
    #[arg(long)]
    seed: Option<u64>,
    /// Subdirectory under the output root (used for ablation runs)
    #[arg(long)]
    out_sub: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter, split and persist the interaction data
    Ingest(StageArgs),
    /// Build vocabulary, predict attributes and select the top-k set
    Attrs(StageArgs),
    /// Train the diversity encoder adversarially
    #[command(name = "train-gan")]
    TrainGan(StageArgs),
    /// Reconstruct every catalog title through the trained encoder
    Reconstruct(StageArgs),
    /// Pre-train the collaborative matrix-factorization model
    #[command(name = "train-collab")]
    TrainCollab(StageArgs),
    /// Stage A: adapter fine-tuning on text prompts
    #[command(name = "finetune-a")]
    FinetuneA(StageArgs),
    /// Stage B: mapper fine-tuning with injected collaborative vectors
    #[command(name = "finetune-b")]
    FinetuneB(StageArgs),
    /// Rank the held-out candidates and write the metrics report
    Eval(StageArgs),
    /// Export the 2D PCA projection of the augmented-corpus embeddings
    #[command(name = "export-proj")]
    ExportProj(StageArgs),
    /// Run every stage in dependency order
    #[command(name = "run-all")]
    RunAll(StageArgs),
    /// Aggregate metrics across seeds (and ablation runs)
    Report {
        #[arg(long)]
        config: PathBuf,
        /// Include rec-* ablation rows from out_dir/rec-ablation/<variant>/
        #[arg(long)]
        rec_ablation: bool,
        /// Include div-* ablation rows from out_dir/div-ablation/<variant>/
        #[arg(long)]
        div_ablation: bool,
    },
    /// Write the config's synthetic dataset as a JSONL interaction log
    #[command(name = "gen-data")]
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn stage_main(stage: Stage, args: &StageArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    let runner = Runner::new(cfg, seed, args.out_sub.as_deref(), args.force);
    let ran = runner.run(stage)?;
    if ran {
        println!("{}: done (seed {seed})", stage.name());
    } else {
        println!("{}: up-to-date, skipped (seed {seed})", stage.name());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => stage_main(Stage::Ingest, &a),
        Command::Attrs(a) => stage_main(Stage::Attrs, &a),
        Command::TrainGan(a) => stage_main(Stage::TrainGan, &a),
        Command::Reconstruct(a) => stage_main(Stage::Reconstruct, &a),
        Command::TrainCollab(a) => stage_main(Stage::TrainCollab, &a),
        Command::FinetuneA(a) => stage_main(Stage::FinetuneA, &a),
        Command::FinetuneB(a) => stage_main(Stage::FinetuneB, &a),
        Command::Eval(a) => stage_main(Stage::Eval, &a),
        Command::ExportProj(a) => stage_main(Stage::ExportProj, &a),
        Command::RunAll(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let seed = a.seed.unwrap_or(cfg.seeds[0]);
            let runner = Runner::new(cfg, seed, a.out_sub.as_deref(), a.force);
            for stage in Stage::pipeline() {
                let ran = runner.run(stage)?;
                println!(
                    "{}: {} (seed {seed})",
                    stage.name(),
                    if ran { "done" } else { "up-to-date, skipped" }
                );
            }
            Ok(())
        }
        Command::Report {
            config,
            rec_ablation,
            div_ablation,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = aggregate(&cfg, rec_ablation, div_ablation)?;
            let out = cfg.out_root(None).join("report.json");
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(
                &out,
                serde_json::to_string_pretty(&report)
                    .map_err(|e| CliError::Report(e.to_string()))?,
            )?;
            print!("{}", render_table(&report));
            println!("written: {}", out.display());
            Ok(())
        }
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let synth = cfg
                .data
                .synth
                .as_ref()
                .ok_or_else(|| CliError::Config("config has no [data.synth] section".into()))?;
            let records = generate(synth);
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let mut text = String::new();
            for r in &records {
                text.push_str(
                    &serde_json::to_string(r).map_err(|e| CliError::Stage(e.to_string()))?,
                );
                text.push('\n');
            }
            std::fs::write(&out, text)?;
            println!("wrote {} interactions to {}", records.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
