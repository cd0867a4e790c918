use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use diffspeaker::cli::{
    cmd_ablate, cmd_bench, cmd_eval, cmd_gen_data, cmd_sample, cmd_train, exit_code, RunConfig,
};

#[derive(Parser)]
#[command(name = "diffspk", about = "Speech-driven 3D facial animation via a diffusion transformer")]
struct Args {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed for the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic audio-4D dataset and its manifest.
    GenData,
    /// Train a denoiser on the dataset's train split.
    Train,
    /// Sample a motion file from audio features.
    Sample {
        /// Audio feature file (.dsau).
        audio: PathBuf,
        /// Subject style index.
        #[arg(long, default_value_t = 0)]
        style: usize,
        /// Guidance scale w.
        #[arg(long, default_value_t = 0.0)]
        guidance: f64,
        /// Output motion file (.dsmo).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the variant x guidance ablation table.
    Ablate,
    /// Benchmark diffusion vs autoregressive decoding latency.
    Bench,
}

fn main() -> ExitCode {
    let args = Args::parse();

    if let Ok(threads) = std::env::var("DIFFSPK_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            #[cfg(feature = "parallel")]
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }

    let cfg = match &args.config {
        Some(path) => match RunConfig::from_file(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(exit_code(&e) as u8);
            }
        },
        None => RunConfig::default(),
    };

    let result = match args.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Train => cmd_train(&cfg, args.seed),
        Command::Sample {
            audio,
            style,
            guidance,
            out,
        } => cmd_sample(&cfg, &audio, style, args.seed, guidance, &out),
        Command::Eval { checkpoint, split } => cmd_eval(&cfg, &checkpoint, &split, args.seed),
        Command::Ablate => cmd_ablate(&cfg),
        Command::Bench => cmd_bench(&cfg, args.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
