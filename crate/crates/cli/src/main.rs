use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtkd::pipeline::{Command, Pipeline, RunConfig};

/// Multi-task knowledge distillation: train a teacher, distill it into a
/// small student, fine-tune, evaluate and benchmark.
#[derive(Parser)]
#[command(name = "mtkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Validate inputs and prerequisites without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Build the vocabulary over every task's training sentences.
    BuildVocab,
    /// Write mask-augmented copies of every training split.
    Augment,
    /// Refine the multi-task teacher on the labeled training splits.
    TrainTeacher,
    /// Distill the teacher's logits into the student.
    Distill,
    /// Fine-tune the distilled student on `finetune.task`.
    Finetune,
    /// Evaluate teacher and students on the dev splits.
    Eval,
    /// Time student and teacher inference.
    Bench,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::BuildVocab => Command::BuildVocab,
            Cmd::Augment => Command::Augment,
            Cmd::TrainTeacher => Command::TrainTeacher,
            Cmd::Distill => Command::Distill,
            Cmd::Finetune => Command::Finetune,
            Cmd::Eval => Command::Eval,
            Cmd::Bench => Command::Bench,
        }
    }
}

fn run(cli: &Cli) -> mtkd::Result<Vec<String>> {
    let Some(path) = &cli.config else {
        return Err(mtkd::Error::Config("--config <file> is required".into()));
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Pipeline::new(cfg, &cli.out, cli.dry_run).run(cli.command.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("ERROR {}: {msg}", e.module());
            ExitCode::FAILURE
        }
    }
}
