//! `kgqa` — drive the knowledge-grounded QA lab: generate synthetic worlds,
//! train the retrievers and the reasoner, evaluate both answer branches,
//! run the ablation grid, and render prompts.
//!
//! Exit codes: 0 success, 2 usage error, 3 missing artifact, 4 runtime or
//! numerical failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kgqa_core::config::RunConfig;
use kgqa_core::error::Error;
use kgqa_core::eval::{grid_table, qtype_table, split_table, ReportFormat};
use kgqa_core::knowledge::Source;
use kgqa_core::pipeline::{
    self, ablate_cmd, eval_cmd, eval_retriever_cmd, gen_data, prompt_cmd, train_reasoner_cmd,
    train_retriever_cmd, Branch,
};
use kgqa_core::reasoner::{InputModes, SourceMode};

#[derive(Parser)]
#[command(
    name = "kgqa",
    version,
    about = "Knowledge-grounded QA lab: supervised triplet retrieval, cross-attention reasoning, and few-shot prompting over synthetic symbolic worlds",
    after_help = "Configuration lives in a TOML file (see --config); every flag has a \
config-file equivalent and every value has a default. Training defaults: 200 epochs, \
batch size 256, learning rate 1e-4, 4 reasoner layers, 32 prompt shots, encoder dims \
256/256/128. Artifacts are content-addressed under build/ by config hash."
)]
struct Cli {
    /// Path to a TOML run configuration (defaults apply when omitted)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the run seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override any config key, TOML syntax (repeatable), e.g.
    /// --set retriever.epochs=50 --set world.n_images=100
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Kb,
    Sg,
}

impl From<SourceArg> for Source {
    fn from(s: SourceArg) -> Source {
        match s {
            SourceArg::Kb => Source::Kb,
            SourceArg::Sg => Source::Sg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ret,
    Gt,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Reasoner,
    #[value(name = "llm-mock")]
    LlmMock,
    #[value(name = "llm-live")]
    LlmLive,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Branch {
        match b {
            BranchArg::Reasoner => Branch::Reasoner,
            BranchArg::LlmMock => Branch::LlmMock,
            BranchArg::LlmLive => Branch::LlmLive,
        }
    }
}

/// Shared mode flags: `--mode` picks retrieved or ground-truth knowledge,
/// `--kb/--sg` toggle each source (both off = the no-knowledge baseline).
#[derive(Args, Clone, Copy)]
struct ModeFlags {
    /// Knowledge mode for enabled sources
    #[arg(long, value_enum, default_value = "ret")]
    mode: ModeArg,

    /// Feed external-KB knowledge
    #[arg(long, value_enum, default_value = "on")]
    kb: Toggle,

    /// Feed scene-graph knowledge
    #[arg(long, value_enum, default_value = "on")]
    sg: Toggle,
}

impl ModeFlags {
    fn modes(&self) -> InputModes {
        let mode = match self.mode {
            ModeArg::Ret => SourceMode::Retrieved,
            ModeArg::Gt => SourceMode::GroundTruth,
        };
        InputModes {
            kb: match self.kb {
                Toggle::On => mode,
                Toggle::Off => SourceMode::None,
            },
            sg: match self.sg {
                Toggle::On => mode,
                Toggle::Off => SourceMode::None,
            },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world, questions, and splits
    GenData,

    /// Train the contrastive retriever for one source
    TrainRetriever {
        #[arg(long, value_enum)]
        source: SourceArg,
    },

    /// Report any-hit@k / all-hit@k for one retriever (plus the untrained
    /// baseline) on the test split
    EvalRetriever {
        #[arg(long, value_enum)]
        source: SourceArg,
        /// Comma-separated k values
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,100")]
        k: Vec<usize>,
    },

    /// Train the reasoner under one knowledge configuration
    TrainReasoner {
        #[command(flatten)]
        modes: ModeFlags,
    },

    /// Evaluate one branch on the test split (per-type and per-split tables)
    Eval {
        #[arg(long, value_enum)]
        branch: BranchArg,
        #[command(flatten)]
        modes: ModeFlags,
    },

    /// Evaluate all seven knowledge configurations for one branch
    Ablate {
        #[arg(long, value_enum)]
        branch: BranchArg,
        /// Train any missing reasoner checkpoint instead of skipping it
        #[arg(long)]
        train_missing: bool,
    },

    /// Render the few-shot prompt for one record, byte-exact, to stdout
    Prompt {
        #[arg(long)]
        record_id: String,
        #[command(flatten)]
        modes: ModeFlags,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.world.seed = seed;
    }
    for assignment in &cli.overrides {
        cfg.apply_override(assignment)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData => {
            let dir = gen_data(&cfg)?;
            let data = pipeline::load_data(&cfg)?;
            println!(
                "generated {} (train {} / val {} / test {} records, {} KB triplets, {} scenes)",
                dir.display(),
                data.train.len(),
                data.val.len(),
                data.test.len(),
                data.kb.len(),
                data.scenes.len()
            );
        }
        Command::TrainRetriever { source } => {
            let source = source.into();
            let (path, trained) = train_retriever_cmd(&cfg, source)?;
            println!(
                "trained {source} retriever: {} epochs, final loss {:.6}, checkpoint {}",
                trained.loss_curve.len(),
                trained.loss_curve.last().copied().unwrap_or(0.0),
                path.display()
            );
        }
        Command::EvalRetriever { source, k } => {
            let source = source.into();
            let eval = eval_retriever_cmd(&cfg, source, &k)?;
            println!("source,k,any_hit,all_hit,n");
            for row in &eval.trained {
                println!(
                    "{},{},{:.4},{:.4},{}",
                    row.source, row.k, row.any_hit, row.all_hit, row.n
                );
            }
            println!("baseline (untrained):");
            for row in &eval.baseline {
                println!(
                    "{},{},{:.4},{:.4},{}",
                    row.source, row.k, row.any_hit, row.all_hit, row.n
                );
            }
        }
        Command::TrainReasoner { modes } => {
            let modes = modes.modes();
            let (path, trained) = train_reasoner_cmd(&cfg, modes)?;
            println!(
                "trained reasoner [{}]: {} epochs, final loss {:.6}, skipped {} out-of-vocab, checkpoint {}",
                modes.label(),
                trained.loss_curve.len(),
                trained.loss_curve.last().copied().unwrap_or(0.0),
                trained.skipped_records,
                path.display()
            );
        }
        Command::Eval { branch, modes } => {
            let modes = modes.modes();
            let report = eval_cmd(&cfg, branch.into(), modes)?;
            println!(
                "overall top-1 accuracy: {:.4} (n = {})",
                report.overall.accuracy(),
                report.overall.n
            );
            print!("{}", qtype_table(&report, ReportFormat::Csv));
            print!("{}", split_table(&report, ReportFormat::Csv));
            println!("reports written to {}", cfg.report_dir().display());
        }
        Command::Ablate {
            branch,
            train_missing,
        } => {
            let grid = ablate_cmd(&cfg, branch.into(), train_missing)?;
            print!("{}", grid_table(&grid, ReportFormat::Csv));
            println!("reports written to {}", cfg.report_dir().display());
        }
        Command::Prompt { record_id, modes } => {
            let prompt = prompt_cmd(&cfg, &record_id, modes.modes())?;
            print!("{prompt}");
            std::io::stdout().flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Config(_) | Error::Contract(_) => 2,
                Error::MissingArtifact(_) => 3,
                _ => 4,
            };
            ExitCode::from(code)
        }
    }
}
