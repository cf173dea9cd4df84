//! `wsss`: synthetic data, superpixels, pseudo-masks, training, evaluation and result tables.
//!
//! Exit codes: 0 success, 2 bad arguments, 3 data error, 4 numerical failure.

mod report;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use wsss_core::ablation::{check_ordering, parse_runs, run_ablation, AblationSpec, RUNS_HEADER};
use wsss_core::annotation::{propagate_scribbles, SceneSpec};
use wsss_core::dataset::{synth_dataset, write_dataset, Dataset, SynthSpec};
use wsss_core::io::{load_image, load_mask, load_superpixels, save_mask, save_superpixels};
use wsss_core::superpixels::oversegment;
use wsss_core::trainer::{evaluate_checkpoint, train_to_dir, TrainConfig, METRICS_NAME};

#[derive(Parser, Debug)]
#[command(name = "wsss", version, about = "Scribble-supervised segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of image / scribble / full-mask triples plus a manifest
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Scribble width in pixels (2, 5, 10 or 20)
        #[arg(long, default_value_t = 20)]
        width: usize,
        /// Image side length in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        shapes_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Oversegment an image into superpixels (16-bit id PNG)
    Superpixels {
        #[arg(long)]
        image: PathBuf,
        /// Requested number of superpixels
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Propagate scribbles over superpixels into a pseudo-mask
    Pseudomask {
        #[arg(long)]
        scribbles: PathBuf,
        #[arg(long)]
        superpixels: PathBuf,
        /// Number of classes; scribble values must be below it
        #[arg(long, default_value_t = 255)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write checkpoint, log and summary into the run directory
    Train {
        /// TOML file whose keys mirror the training configuration
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory or manifest file
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured experiment label
        #[arg(long)]
        label: Option<String>,
        /// Overrides the configured number of epochs
        #[arg(long)]
        epochs: Option<usize>,
        /// Validation dataset; fills the miou_val log column
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes metrics.json next to the checkpoint unless --out is given
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss-group ablation on the synthetic benchmark; appends `label,seed,miou_seg` rows and resumes
    Ablation {
        /// Runs file; existing rows are kept and skipped
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 200)]
        train_count: usize,
        #[arg(long, default_value_t = 60)]
        test_count: usize,
    },
    /// CSV table (one row per run, sorted by label) from run directories holding metrics.json
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            classes,
            count,
            width,
            size,
            shapes_per_class,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                scene: SceneSpec {
                    shapes_per_class,
                    ..SceneSpec::new(size, size, classes)
                },
                count,
                scribble_width: width,
                seed,
            };
            let data = synth_dataset(&spec)?;
            let manifest = write_dataset(&data, &out)?;
            info!("wrote {} samples to {}", manifest.entries.len(), out.display());
        }
        Command::Superpixels { image, count, seed, out } => {
            let img = load_image(&image)?;
            let map = oversegment(&img, count, seed)?;
            save_superpixels(&out, &map)?;
            info!("{} superpixels written to {}", map.segment_count(), out.display());
        }
        Command::Pseudomask {
            scribbles,
            superpixels,
            classes,
            out,
        } => {
            let scr = load_mask(&scribbles, classes)?;
            let map = load_superpixels(&superpixels)?;
            let pm = propagate_scribbles(&scr, &map)?;
            save_mask(&out, &pm)?;
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            label,
            epochs,
            val,
        } => {
            let mut cfg = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| {
                        wsss_core::Error::Config(format!("cannot read {}: {e}", path.display()))
                    })?;
                    TrainConfig::from_toml(&text)?
                }
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = label {
                cfg.experiment_label = l;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.resolve()?;
            let dataset = Dataset::load(&data)?;
            let val = val.map(|v| Dataset::load(&v)).transpose()?;
            train_to_dir(&dataset, &cfg, val.as_ref(), &out, |r| {
                info!("{}", r.csv_row());
            })?;
            info!("run written to {}", out.display());
        }
        Command::Eval { ckpt, data, out } => {
            let dataset = Dataset::load(&data)?;
            let eval = evaluate_checkpoint(&ckpt, &dataset)?;
            let json = serde_json::to_string_pretty(&eval)?;
            let target = out.unwrap_or_else(|| ckpt.with_file_name(METRICS_NAME));
            write_text(&target, &json)?;
            println!("{json}");
        }
        Command::Ablation {
            out,
            seeds,
            epochs,
            train_count,
            test_count,
        } => {
            let spec = AblationSpec {
                seeds: (0..seeds).collect(),
                epochs,
                train_count,
                test_count,
                ..AblationSpec::default()
            };
            let done = match std::fs::read_to_string(&out) {
                Ok(text) => parse_runs(&text)?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    write_text(&out, &format!("{RUNS_HEADER}\n"))?;
                    Vec::new()
                }
                Err(e) => return Err(e).with_context(|| format!("reading {}", out.display())),
            };
            let runs = run_ablation(&spec, &done, |run| {
                info!("{}", run.csv_row());
                let mut f = std::fs::OpenOptions::new()
                    .append(true)
                    .open(&out)
                    .map_err(|e| wsss_core::Error::io(&out, e))?;
                writeln!(f, "{}", run.csv_row()).map_err(|e| wsss_core::Error::io(&out, e))
            })?;
            let ord = check_ordering(&spec, &runs)?;
            println!(
                "median miou: G1 {:.4}  G2 {:.4}  G3 {:.4}  FULL {:.4}  ordering {}",
                ord.g1,
                ord.g2,
                ord.g3,
                ord.full,
                if ord.holds() { "holds" } else { "violated" }
            );
        }
        Command::Report { runs, out } => {
            let csv = report::render(&runs)?;
            match out {
                Some(path) => write_text(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<wsss_core::Error>() {
        Some(e) if e.is_numerical() => 4,
        Some(e) if e.is_argument() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
