use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use compact_hccr::pipeline::{self, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "hccr", version, about = "Train, prune, quantize and pack compact handwriting recognizers")]
struct Cli {
    /// Pipeline config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data generation and rendering.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train and test ink files.
    GenData,
    /// Render signature feature maps for both splits.
    Render,
    /// Train the dense model.
    Train {
        /// Continue from the saved training state.
        #[arg(long)]
        resume: bool,
    },
    /// DropWeight pruning with retraining.
    Prune,
    /// Codebook quantization and fine-tuning.
    Quantize,
    /// Write the packed model.
    Pack,
    /// Test accuracy of a model (DNSE or DWPK).
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Per-layer storage of a model.
    SizeReport {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Every stage in order.
    Run,
    /// Print the effective config.
    ShowConfig,
}

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string(v).expect("summary serializes"));
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(PipelineError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::GenData => print_json(&pipeline::cmd_gen_data(&cfg)?),
        Command::Render => print_json(&pipeline::cmd_render(&cfg)?),
        Command::Train { resume } => print_json(&pipeline::cmd_train(&cfg, resume)?),
        Command::Prune => print_json(&pipeline::cmd_prune(&cfg)?),
        Command::Quantize => print_json(&pipeline::cmd_quantize(&cfg)?),
        Command::Pack => print!("{}", pipeline::cmd_pack(&cfg)?.to_table()),
        Command::Eval { model } => print_json(&pipeline::cmd_eval(&cfg, model.as_deref())?),
        Command::SizeReport { model, json } => {
            let r = pipeline::cmd_size_report(&cfg, model.as_deref())?;
            if json {
                print_json(&serde_json::json!({
                    "layers": r.layers.iter().map(|l| serde_json::json!({
                        "name": l.name, "kind": l.kind.name(), "params": l.params,
                        "bytes": l.bytes, "dense_bytes": l.dense_bytes,
                    })).collect::<Vec<_>>(),
                    "header_bytes": r.header_bytes,
                    "total_bytes": r.total_bytes,
                    "dense_equivalent": r.dense_equivalent,
                    "ratio": r.ratio(),
                }));
            } else {
                print!("{}", r.to_table());
            }
        }
        Command::Run => print_json(&pipeline::cmd_run(&cfg)?),
        Command::ShowConfig => println!("{}", cfg.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hccr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
