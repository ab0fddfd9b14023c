use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod bench;
mod commands;

/// Inference, cost accounting and verification for iFormer-family models.
#[derive(Debug, Parser)]
#[command(name = "iformer", version)]
struct Cli {
    /// Worker threads for tensor kernels (bench defaults to 1).
    #[arg(long, global = true, env = "IFORMER_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// A preset name or a path to a JSON config.
#[derive(Debug, Args)]
struct ModelArg {
    /// Preset name (see `describe --list`) or path to a `.json` config.
    model: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stage table, parameter count and MACs.
    Describe {
        /// Preset name or config path; omit with --list.
        model: Option<String>,
        /// Emit a JSON report whose `config` member is a loadable config.
        #[arg(long)]
        json: bool,
        /// List preset names.
        #[arg(long)]
        list: bool,
    },
    /// Run the invariant suites on a freshly built model.
    Verify {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fuzz cases for the modulation bound check.
        #[arg(long, default_value_t = 200)]
        fuzz_cases: usize,
        /// Fault injection: make the first BN epsilon negative.
        #[arg(long, hide = true)]
        inject_negative_eps: bool,
    },
    /// Batch-1 forward timing with structural counters.
    Bench {
        #[command(flatten)]
        model: ModelArg,
        /// Input resolution; defaults to the configured one.
        #[arg(long)]
        resolution: Option<usize>,
        /// Measured runs per entry (at least 5).
        #[arg(long, default_value_t = 10)]
        runs: usize,
        /// Warmup runs per entry (at least 3).
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Also time every block.
        #[arg(long)]
        blocks: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify a PPM image.
    Infer {
        #[command(flatten)]
        model: ModelArg,
        /// IFW1 weights; random weights from --seed when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Binary PPM (P6) at the model resolution.
        #[arg(long, required_unless_present = "random_input")]
        image: Option<PathBuf>,
        /// Use a seeded random input instead of an image.
        #[arg(long, conflicts_with = "image")]
        random_input: bool,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Mean cosine similarity between attention heads, per layer.
    Similarity {
        /// A model with multi-head attention blocks.
        #[arg(default_value = "mha-baseline")]
        model: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, required_unless_present = "random_input")]
        image: Option<PathBuf>,
        #[arg(long, conflicts_with = "image")]
        random_input: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Fold every BN into its conv/linear and write the fused weights.
    Fuse {
        #[command(flatten)]
        model: ModelArg,
        /// IFW1 weights; random weights from --seed when omitted.
        #[arg(long = "weights-in")]
        weights_in: Option<PathBuf>,
        #[arg(long = "weights-out")]
        weights_out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure classes, one per exit code.
#[derive(Debug)]
pub enum CliError {
    /// A check or tolerance did not hold (exit 1).
    Failed(String),
    /// Bad arguments or configuration (exit 2).
    Usage(String),
    /// File access or file contents (exit 3).
    Io(String),
}

impl From<iformer_core::Error> for CliError {
    fn from(e: iformer_core::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

fn set_threads(n: usize) -> CliResult {
    if n == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult {
    let threads = match (&cli.command, cli.threads) {
        (Command::Bench { .. }, t) => Some(t.unwrap_or(1)),
        (_, t) => t,
    };
    if let Some(n) = threads {
        set_threads(n)?;
    }
    match cli.command {
        Command::Describe { model, json, list } => match (model, list) {
            (_, true) => {
                for name in iformer_core::model::PRESET_NAMES {
                    println!("{name}");
                }
                Ok(())
            }
            (Some(m), false) => commands::describe(&m, json),
            (None, false) => Err(CliError::Usage("describe needs a model or --list".into())),
        },
        Command::Verify { model, seed, fuzz_cases, inject_negative_eps } => {
            commands::verify(&model.model, seed, fuzz_cases, inject_negative_eps)
        }
        Command::Bench { model, resolution, runs, warmup, blocks, seed, out } => {
            let opts = bench::BenchOptions {
                resolution,
                runs,
                warmup,
                blocks,
                seed,
                threads: rayon::current_num_threads(),
            };
            let report = bench::run(&commands::load_config(&model.model)?, &opts)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            match out {
                Some(path) => {
                    std::fs::write(&path, text)?;
                    eprintln!("wrote {} entries to {}", report.entries.len(), path.display());
                }
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Infer { model, weights, image, random_input: _, topk, seed, json } => {
            commands::infer(&model.model, weights.as_deref(), image.as_deref(), topk, seed, json)
        }
        Command::Similarity { model, weights, image, random_input: _, seed, json } => {
            commands::similarity(&model, weights.as_deref(), image.as_deref(), seed, json)
        }
        Command::Fuse { model, weights_in, weights_out, seed } => {
            commands::fuse(&model.model, weights_in.as_deref(), &weights_out, seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, msg) = match e {
                CliError::Failed(m) => (1, m),
                CliError::Usage(m) => (2, m),
                CliError::Io(m) => (3, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
