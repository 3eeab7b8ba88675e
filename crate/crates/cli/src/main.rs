//! `liverseg`: phantom generation, training, cascaded prediction and
//! evaluation from the command line.

mod commands;
mod manifest;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use liverseg::preprocess::Target;
use liverseg::Error;

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "LIVERSEG_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "liverseg",
    version,
    about = "Cascaded liver and lesion segmentation of CT volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic CT volumes with labels and a train/val/test split.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 13)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Volume extent as Z,Y,X.
        #[arg(long, default_value = "32,64,64", value_parser = parse_shape)]
        shape: [usize; 3],
        #[arg(long, default_value_t = 2)]
        tumors: usize,
    },
    /// Train the liver or the lesion model.
    Train {
        /// Flat `key = value` config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        target: Target,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the cascade on CT volumes and write label volumes.
    Predict {
        #[arg(long)]
        liver_ckpt: PathBuf,
        #[arg(long)]
        tumor_ckpt: PathBuf,
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write one PNG per axial slice with liver in red and lesions
        /// in green.
        #[arg(long)]
        overlay: bool,
    },
    /// Score predicted label volumes against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [z, y, x] = parts[..] else {
        return Err(format!("expected Z,Y,X, got {s:?}"));
    };
    let n = |v: &str| v.parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok([n(z)?, n(y)?, n(x)?])
}

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn exit_code(err: &Error) -> u8 {
    match err {
        e if e.is_numeric() => EXIT_NUMERIC,
        Error::InvalidCount(_) | Error::Config { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err(format!("{THREADS_ENV} must be a positive integer, got 0"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = match cli.command {
        Command::Phantom {
            out,
            count,
            seed,
            shape,
            tumors,
        } => commands::phantom(&out, count, seed, shape, tumors),
        Command::Train {
            config,
            target,
            data,
            out,
            resume,
        } => commands::train(config.as_deref(), target, &data, &out, resume.as_deref()),
        Command::Predict {
            liver_ckpt,
            tumor_ckpt,
            inputs,
            out,
            overlay,
        } => commands::predict(&liver_ckpt, &tumor_ckpt, &inputs, &out, overlay),
        Command::Evaluate { pred, gt, out } => commands::evaluate(&pred, &gt, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_parsing() {
        assert_eq!(parse_shape("16, 32,64").unwrap(), [16, 32, 64]);
        assert!(parse_shape("1,2").is_err());
        assert!(parse_shape("a,b,c").is_err());
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::InvalidCount(0)), 2);
        assert_eq!(exit_code(&Error::UnmatchedCases(vec!["7".into()])), 3);
        let numeric = Error::NonfiniteLoss {
            epoch: 1,
            step: 2,
            detail: String::new(),
        };
        assert_eq!(exit_code(&numeric), 4);
    }
}
