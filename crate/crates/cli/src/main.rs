use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chestwave::commands::{cmd_compare, cmd_dwt, cmd_eval, cmd_split, cmd_synth, cmd_train};
use chestwave::config::RunConfig;
use chestwave::dataset::class_index;
use chestwave::wavelet::WaveletFilter;

/// Wavelet preprocessing, training and ROC comparison for grayscale scans.
#[derive(Debug, Parser)]
#[command(name = "chestwave", version)]
struct Cli {
    /// Run configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory for the command.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the vertical and horizontal detail images of a scan.
    Dwt {
        input: PathBuf,
        /// Wavelet filter (haar or db2); defaults to the configured one.
        #[arg(long)]
        filter: Option<String>,
        /// Pyramid level to take the detail images from.
        #[arg(long)]
        depth: Option<usize>,
        /// Also write every subband of every level.
        #[arg(long)]
        all_subbands: bool,
    },
    /// Split a labels CSV into train, validation and test sets.
    Split {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated train,validation,test fractions.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Train a model on the configured split.
    Train,
    /// Score the test split with a checkpoint and write ROC data.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split_dir: Option<PathBuf>,
    },
    /// Compare raw and wavelet evaluations; writes a report and ROC overlays.
    Compare {
        raw_dir: PathBuf,
        wavelet_dir: PathBuf,
        /// Comma-separated class names to plot (all when omitted).
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
    },
    /// Generate the synthetic corpus and manifest.
    Synth {
        #[arg(long)]
        n: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Box<dyn std::error::Error>> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default().resolved(Path::new("")),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let mut config = load_config(&cli)?;
    let quiet = cli.quiet;
    let say = move |msg: &str| {
        if !quiet {
            println!("{msg}");
        }
    };
    let written = match cli.command {
        Command::Dwt {
            ref input,
            ref filter,
            depth,
            all_subbands,
        } => {
            let filter = match filter {
                Some(name) => WaveletFilter::by_name(name)?,
                None => config.wavelet_filter()?,
            };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("dwt"));
            cmd_dwt(input, &filter, depth.unwrap_or(config.depth), &out, all_subbands)?
        }
        Command::Split {
            ref manifest,
            ref ratios,
        } => {
            let manifest = manifest.clone().unwrap_or_else(|| config.manifest.clone());
            let ratios = match ratios {
                Some(r) => <[f64; 3]>::try_from(r.as_slice())
                    .map_err(|_| format!("--ratios needs exactly 3 values, got {}", r.len()))?,
                None => config.ratios(),
            };
            let out = cli.out.clone().unwrap_or_else(|| config.split_dir.clone());
            let (parts, written) = cmd_split(&manifest, ratios, config.seed, config.split_mode, &out)?;
            say(&format!(
                "split {} entries: train {}, validation {}, test {}",
                parts.len(),
                parts.train.len(),
                parts.validation.len(),
                parts.test.len()
            ));
            written
        }
        Command::Train => {
            if let Some(out) = &cli.out {
                config.out_dir = out.clone();
            }
            cmd_train(&config, &say)?.2
        }
        Command::Eval {
            ref checkpoint,
            ref split_dir,
        } => {
            let checkpoint = checkpoint.clone().unwrap_or_else(|| config.checkpoint_path());
            let split_dir = split_dir.clone().unwrap_or_else(|| config.split_dir.clone());
            let out = cli.out.clone().unwrap_or_else(|| config.eval_dir());
            let (run, written) = cmd_eval(&checkpoint, &split_dir, &config, &out)?;
            for c in &run.classes {
                match c.auc() {
                    Some(auc) => say(&format!("{:<20} AUC {auc:.4}", c.name())),
                    None => say(&format!("{:<20} undefined", c.name())),
                }
            }
            written
        }
        Command::Compare {
            ref raw_dir,
            ref wavelet_dir,
            ref classes,
        } => {
            let classes = classes
                .iter()
                .map(|name| class_index(name.trim()).ok_or_else(|| format!("unknown class `{name}`")))
                .collect::<Result<Vec<_>, _>>()?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("run/compare"));
            let (report, written) = cmd_compare(raw_dir, wavelet_dir, &out, &classes)?;
            for row in &report.rows {
                let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"));
                say(&format!(
                    "{:<20} raw {}  wavelet {}  delta {}",
                    chestwave::CLASS_NAMES[row.class],
                    fmt(row.auc_raw),
                    fmt(row.auc_wavelet),
                    fmt(row.delta)
                ));
            }
            written
        }
        Command::Synth { n } => {
            let mut synth = config.synth();
            if let Some(n) = n {
                synth.n = n;
            }
            let out = cli.out.clone().unwrap_or_else(|| config.image_dir.clone());
            cmd_synth(&synth, &out)?
        }
    };
    if let Some(last) = written.last() {
        say(&format!("wrote {} file(s), last {}", written.len(), last.display()));
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = err.source();
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::FAILURE
        }
    }
}
