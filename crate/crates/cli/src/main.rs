use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pixelbridge::checks;
use pixelbridge::dataset::{build_dataset, DatasetOptions, DEFAULT_HEIGHT, DEFAULT_WIDTH};
use pixelbridge::sampler::{run_sampling, SampleConfig};
use pixelbridge::training::{eval_nll, train, Checkpoint, TrainConfig};
use pixelbridge::Error;

#[derive(Parser)]
#[command(name = "pixelbridge", version, about = "Bridge facade PixelCNN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic bridge dataset as PGM files plus manifest.json.
    Dataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1200)]
        per_subtype: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_WIDTH)]
        width: usize,
        #[arg(long, default_value_t = DEFAULT_HEIGHT)]
        height: usize,
    },
    /// Train from a JSON config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate images pixel by pixel from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// PGM image whose top rows seed the canvas.
        #[arg(long, requires = "seed_rows")]
        seed_image: Option<PathBuf>,
        #[arg(long, requires = "seed_image")]
        seed_rows: Option<usize>,
        /// Incremental per-pixel recomputation instead of full passes.
        #[arg(long)]
        fast: bool,
        /// Dataset directory for the nearest-training-image distance.
        #[arg(long)]
        train_data: Option<PathBuf>,
    },
    /// Bits/dim of a dataset, overall and per subtype.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Print CSV instead of a table.
        #[arg(long)]
        csv: bool,
    },
    /// Run the built-in invariant suite.
    Check,
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Dataset {
            out,
            per_subtype,
            seed,
            width,
            height,
        } => {
            let opts = DatasetOptions {
                per_subtype,
                master_seed: seed,
                width,
                height,
            };
            let manifest = build_dataset(&out, &opts)?;
            for (subtype, count) in manifest.counts() {
                println!("{subtype:<28} {count}");
            }
            println!("{} images written to {}", manifest.len(), out.display());
        }
        Command::Train { config } => {
            let cfg = TrainConfig::from_json_file(&config)?;
            let outcome = train(&cfg)?;
            let losses = outcome.step_losses();
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!("steps {}: bits/dim {first:.4} -> {last:.4}", losses.len());
            }
            println!(
                "final eval bits/dim {:.4} at step {}",
                outcome.final_eval.bits_per_dim, outcome.checkpoint.step
            );
        }
        Command::Sample {
            ckpt,
            n,
            temperature,
            seed,
            out,
            seed_image,
            seed_rows,
            fast,
            train_data,
        } => {
            let manifest = run_sampling(&SampleConfig {
                checkpoint: ckpt,
                count: n,
                temperature,
                rng_seed: seed,
                seed_image,
                seed_rows: seed_rows.unwrap_or(0),
                out_dir: out,
                fast,
                train_data,
            })?;
            println!(
                "{}",
                serde_json::to_string_pretty(&manifest).expect("manifest serializes")
            );
        }
        Command::Eval { ckpt, data, csv } => {
            let report = eval_nll(&Checkpoint::load(&ckpt)?, &data)?;
            if csv {
                print!("{}", report.csv());
            } else {
                print!("{}", report.table());
            }
        }
        Command::Check => {
            let outcomes = checks::run_all();
            for o in &outcomes {
                println!("{}", o.line());
            }
            return Ok(outcomes.iter().all(|o| o.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io_or_format() { 2 } else { 1 })
        }
    }
}
