use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lbpnn::commands::{self, CommandError};

#[derive(Parser)]
#[command(name = "lbpnn", version, about = "Train and apply unrolled dual forward-backward denoisers")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a TOML run configuration.
    Train { config: PathBuf },
    /// Denoise one image with a trained checkpoint.
    Denoise {
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Report PSNR/SSIM on noisy copies of a directory of clean images.
    Eval {
        checkpoint: PathBuf,
        dir: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-image CSV (default: eval.csv next to the checkpoint).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train every variant of a sweep specification.
    Sweep { config: PathBuf, spec: PathBuf },
    /// Write seeded synthetic piecewise-smooth images.
    Synth {
        dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::Train { config } => {
            let s = commands::cmd_train(&config)?;
            if let Some(last) = s.log.last() {
                println!("epoch {}: loss_l2 {:.6e}", last.epoch, last.loss_l2);
            }
            println!("outputs in {}", s.output_dir.display());
        }
        Command::Denoise {
            checkpoint,
            input,
            output,
        } => {
            commands::cmd_denoise(&checkpoint, &input, &output)?;
        }
        Command::Eval {
            checkpoint,
            dir,
            sigma,
            seed,
            csv,
        } => {
            let csv = csv.unwrap_or_else(|| checkpoint.with_file_name("eval.csv"));
            let report = commands::cmd_eval(&checkpoint, &dir, sigma, seed, Some(&csv))?;
            print!("{}", report.summary());
        }
        Command::Sweep { config, spec } => {
            let outcomes = commands::cmd_sweep(&config, &spec)?;
            let failed: Vec<_> = outcomes.iter().filter(|o| o.result.is_err()).collect();
            for o in &outcomes {
                println!("{}: {}", o.name, if o.result.is_ok() { "ok" } else { "failed" });
            }
            if !failed.is_empty() {
                return Err(CommandError::Runtime(lbpnn::Error::Data(format!(
                    "{} of {} variants failed",
                    failed.len(),
                    outcomes.len()
                ))));
            }
        }
        Command::Synth { dir, count, size, seed } => {
            let paths = commands::cmd_synth(&dir, count, (size, size), seed)?;
            println!("wrote {} images to {}", paths.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("lbpnn: error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("lbpnn: error: cannot size thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => ExitCode::from(commands::report_error(&e) as u8),
    }
}
