use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sanet_core::bench::{bench, BENCH_SIZES};
use sanet_core::controls::{spatial_control, style_interpolate, tradeoff, MaskSet};
use sanet_core::image_io::{read_ppm_file, write_ppm_file, Image};
use sanet_core::network::checkpoint::load_checkpoint;
use sanet_core::training::{train, TrainConfig};
use sanet_core::verify::{
    attention_oracle_check, run_gradcheck, run_property_suite, write_reports_csv, OracleReport,
};
use sanet_core::TransformNet;

#[derive(Parser)]
#[command(
    name = "sanet",
    version,
    about = "Style-attentional transfer at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Stylize a content image, optionally blending back towards the content.
    Stylize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
    },
    /// Convex combination of several styles.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        styles: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        weights: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One style per masked region; the masks must partition the image.
    Mask {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        styles: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        masks: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks; CSV report on stdout.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Attention oracle and property checks; CSV report on stdout.
    OracleCheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Single-level against multi-level stylization time.
    Bench {
        /// Input extent in pixels; repeat for several sizes.
        #[arg(long)]
        size: Vec<usize>,
        #[arg(long, default_value_t = 7)]
        repeats: usize,
        /// Checkpoint to time; a fresh network otherwise.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn load_net(path: &Path) -> Result<TransformNet> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_checkpoint(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn read(path: &Path) -> Result<Image> {
    read_ppm_file(path).with_context(|| format!("reading {}", path.display()))
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<Image>> {
    paths.iter().map(|p| read(p)).collect()
}

fn write(path: &Path, image: &Image) -> Result<()> {
    write_ppm_file(path, &image.clamped()).with_context(|| format!("writing {}", path.display()))
}

fn report(reports: &[OracleReport]) -> Result<ExitCode> {
    write_reports_csv(reports, std::io::stdout().lock())?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config } => {
            let config = TrainConfig::from_file(&config)?;
            let outcome = train(&config)?;
            if let Some(last) = outcome.reports.last() {
                eprintln!(
                    "trained {} steps, final loss {:.6}",
                    outcome.reports.len(),
                    last.total
                );
            }
        }
        Command::Stylize {
            ckpt,
            content,
            style,
            out,
            alpha,
        } => {
            let net = load_net(&ckpt)?;
            write(
                &out,
                &tradeoff(&net, &read(&content)?, &read(&style)?, alpha)?,
            )?;
        }
        Command::Interpolate {
            ckpt,
            content,
            styles,
            weights,
            out,
        } => {
            let net = load_net(&ckpt)?;
            write(
                &out,
                &style_interpolate(&net, &read(&content)?, &read_all(&styles)?, &weights)?,
            )?;
        }
        Command::Mask {
            ckpt,
            content,
            styles,
            masks,
            out,
        } => {
            let net = load_net(&ckpt)?;
            let content = read(&content)?;
            let masks =
                MaskSet::from_images(&read_all(&masks)?, content.width(), content.height())?;
            write(
                &out,
                &spatial_control(&net, &content, &read_all(&styles)?, &masks)?,
            )?;
        }
        Command::Gradcheck { seed } => return report(&run_gradcheck(seed)?),
        Command::OracleCheck { seed } => {
            let mut reports = vec![attention_oracle_check(seed, 100)];
            reports.extend(run_property_suite(seed));
            return report(&reports);
        }
        Command::Bench {
            size,
            repeats,
            ckpt,
        } => {
            let net = match ckpt {
                Some(p) => load_net(&p)?,
                None => TransformNet::new(Default::default(), 0),
            };
            let sizes = if size.is_empty() {
                BENCH_SIZES.to_vec()
            } else {
                size
            };
            println!("size,single_s,multi_s,ratio");
            for s in sizes {
                if s == 0 {
                    bail!("size must be positive");
                }
                let r = bench(&net, s, repeats)?;
                println!(
                    "{},{:.6},{:.6},{:.3}",
                    s,
                    r.single.as_secs_f64(),
                    r.multi.as_secs_f64(),
                    r.ratio()
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
