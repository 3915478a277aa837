use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use comsl::run::{self, ConfigError, RunConfig, RunError};

#[derive(Parser)]
#[command(name = "comsl", version, about = "Toy-scale composite speech-language training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Plain-text `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Sets data.seed for gen-data and train.seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint to start from (train) or to read (eval, export-sim).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory; data.dir for gen-data, train.out_dir otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Example ids for export-sim.
    #[arg(long, value_delimiter = ',', global = true)]
    examples: Vec<usize>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the synthetic corpus and unlabeled pool.
    GenData,
    /// Pre-finetune the text blocks on MT and save the frozen teacher.
    PretrainMt,
    /// Composite training with periodic validation.
    Train,
    /// Decode the validation split and report ST/MT BLEU and ASR WER.
    Eval,
    /// Run the training-strategy ablation ladder.
    Ablate,
    /// Export speech/text similarity matrices for given examples.
    ExportSim,
}

fn resolve(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut overrides = cli.overrides.clone();
    let gen = cli.command == Command::GenData;
    if let Some(seed) = cli.seed {
        overrides.push(format!("{}={seed}", if gen { "data.seed" } else { "train.seed" }));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("{}={}", if gen { "data.dir" } else { "train.out_dir" }, out.display()));
    }
    run::parse_config(cli.config.as_deref(), &overrides)
}

fn checkpoint(cli: &Cli) -> Result<&PathBuf> {
    match &cli.checkpoint {
        Some(p) => Ok(p),
        None => bail!("--checkpoint is required"),
    }
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<(), RunError> {
    let need_ckpt = || {
        cli.checkpoint
            .as_deref()
            .ok_or_else(|| RunError::Usage("--checkpoint is required".into()))
    };
    match cli.command {
        Command::GenData => {
            for p in run::gen_data(cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::PretrainMt => println!("wrote {}", run::pretrain_mt(cfg)?.display()),
        Command::Train => {
            let outcome = run::train(cfg, cli.checkpoint.as_deref())?;
            println!("best_bleu={:.4}", outcome.best_bleu);
            println!("checkpoint={}", outcome.best_checkpoint.display());
        }
        Command::Eval => {
            let r = run::eval(cfg, need_ckpt()?)?;
            println!("st_bleu={:.4}", r.st_bleu);
            println!("mt_bleu={:.4}", r.mt_bleu);
            println!("asr_wer={:.4}", r.asr_wer);
        }
        Command::Ablate => {
            let summary = run::ablate(cfg)?;
            print!("{}", summary.table_text());
        }
        Command::ExportSim => {
            for p in run::export_sim(cfg, need_ckpt()?, &cli.examples)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if matches!(cli.command, Command::Eval | Command::ExportSim) {
        if let Err(e) = checkpoint(&cli) {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    eprintln!("# resolved config");
    eprint!("{}", cfg.to_text());
    match dispatch(&cli, &cfg).context("command failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<RunError>().is_some_and(|r| matches!(r, RunError::Usage(_))) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
