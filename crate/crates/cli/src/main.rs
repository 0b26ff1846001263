use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hierverb::config::{Preset, RunConfig, SEED_ENV};
use hierverb::pipeline;

#[derive(Parser)]
#[command(name = "hierverb", version, about = "Few-shot hierarchical text classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key-value config file; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,

    /// Overrides the config seed and the HIERVERB_SEED variable.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Shots per label path.
    #[arg(long, global = true)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hierarchy and dataset.
    Synth,
    /// Draw the K-shot support set plus dev and test splits.
    Sample,
    /// Train on the support set with dev-set early stopping.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval,
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Wos,
    Dbpedia,
    Rcv1,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Wos => Preset::Wos,
            PresetArg::Dbpedia => Preset::Dbpedia,
            PresetArg::Rcv1 => Preset::Rcv1,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let text = cli
        .config
        .as_ref()
        .map(|p| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut cfg = RunConfig::resolve(
        text.as_deref(),
        cli.preset.map(Preset::from),
        env_seed.as_deref(),
        cli.seed,
        cli.k,
    )?;
    if let Some(dir) = cli.config.as_ref().and_then(|p| p.parent()) {
        cfg.rebase(dir);
    }
    Ok(cfg)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("summaries serialize")
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Synth => {
            let s = pipeline::cmd_synth(&cfg)?;
            println!("{}", json(&s));
        }
        Command::Sample => {
            let s = pipeline::cmd_sample(&cfg)?;
            print!("{}", pipeline::format_counts(&s.manifest.path_counts));
            println!(
                "support {} dev {} test {}",
                s.manifest.documents, s.dev_documents, s.test_documents
            );
        }
        Command::Train => {
            let log = pipeline::cmd_train(&cfg)?;
            println!(
                "kept epoch {} of {}{}",
                log.best_epoch,
                log.epochs.len(),
                if log.stopped_early { " (early stop)" } else { "" }
            );
        }
        Command::Eval => {
            let report = pipeline::cmd_eval(&cfg)?;
            println!("{}", json(&report));
        }
        Command::Gradcheck => {
            let report = pipeline::cmd_gradcheck(&cfg)?;
            print!("{}", report.table());
            println!(
                "max relative error {:.3e} (tolerance {:.0e}): {}",
                report.max_rel_error(),
                report.tolerance,
                if report.passed() { "pass" } else { "FAIL" }
            );
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
