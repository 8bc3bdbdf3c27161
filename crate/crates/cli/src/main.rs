use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vpr_cli::commands;
use vpr_cli::{exit_code, Preset, RunConfig};
use vpr_core::analysis::comparison_markdown;
use vpr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "vpr", version, about = "Distilled place-recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration overriding the preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model and hyper-parameter preset.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Images per batch at extraction time.
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    encoder: Option<Switch>,
    #[arg(long, global = true)]
    pca_dim: Option<usize>,
    /// Checkpoint for `extract`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic images and the manifest.
    GenData,
    /// Distil the teacher into a fresh student.
    TrainDistill,
    /// Metric fine-tuning from the distilled checkpoint.
    TrainFinetune,
    /// Write one descriptor file per database and query image.
    Extract,
    /// Fit PCA on database descriptors.
    PcaFit,
    /// Reduce all descriptors with the fitted PCA.
    PcaApply,
    /// Build the database index.
    IndexBuild,
    /// Recall@N of the queries against the index.
    Eval,
    /// Parameter and FLOPs comparison table.
    Analyze,
    /// Every stage from data generation to evaluation.
    Pipeline,
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path, self.preset)?,
            None => RunConfig::preset(self.preset.unwrap_or(Preset::Toy)),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        if let Some(d) = &self.work_dir {
            cfg.work_dir = d.clone();
        }
        if let Some(b) = self.batch {
            cfg.eval_batch = b;
        }
        if let Some(e) = self.encoder {
            cfg.model.encoder.enabled = matches!(e, Switch::On);
        }
        if let Some(k) = self.pca_dim {
            cfg.pca_dim = Some(k);
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    match cli.command {
        Command::GenData => print_json(&commands::gen_data(&cfg)?),
        Command::TrainDistill => print_json(&commands::train_distill(&cfg)?),
        Command::TrainFinetune => print_json(&commands::train_finetune(&cfg)?),
        Command::Extract => print_json(&commands::extract(&cfg)?),
        Command::PcaFit => print_json(&commands::pca_fit(&cfg)?),
        Command::PcaApply => print_json(&commands::pca_apply(&cfg)?),
        Command::IndexBuild => print_json(&commands::index_build(&cfg)?),
        Command::Eval => {
            let report = commands::eval(&cfg)?;
            for (n, r) in report.ns.iter().zip(&report.recall) {
                println!("R@{n}: {r:.2}");
            }
            println!(
                "queries evaluated: {}, excluded: {}",
                report.evaluated,
                report.excluded.len()
            );
            Ok(())
        }
        Command::Analyze => {
            let report = commands::analyze(&cfg)?;
            print!("{}", comparison_markdown(&report.rows));
            Ok(())
        }
        Command::Pipeline => {
            let summary = commands::run_pipeline(&cfg)?;
            for (n, r) in summary.recall.ns.iter().zip(&summary.recall.recall) {
                println!("R@{n}: {r:.2}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
