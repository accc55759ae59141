use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tmamba::bench::{bench, BenchConfig};
use tmamba::config::RunConfig;
use tmamba::eval::evaluate;
use tmamba::inspect::{filter, write_filter_output, FilterBand};
use tmamba::manifest::load_dataset;
use tmamba::tensorfile::{read_tensorfile, TensorData};
use tmamba::trainer::{format_sweep, load_checkpoint, threshold_sweep, train};
use tmamba::{gradcheck, synth, Error};
use tmamba_core::data::SegSample;

#[derive(Parser)]
#[command(name = "tmamba", version, about = "Dense-convolution segmentation with Tim blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the dataset named by `data.manifest`, or run the threshold sweep.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Only records with this split tag.
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Finite-difference gradient checks of every module.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Selective scan against naive self-attention timing.
    Bench {
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 16)]
        channels: usize,
    },
    /// Band-filter every channel of a tensor and dump the spectra.
    Filter {
        #[arg(long = "in")]
        input: PathBuf,
        /// low, band, high, or all for the identity filter.
        #[arg(long)]
        band: String,
        #[arg(long, default_value_t = 0.1)]
        slow: f64,
        #[arg(long, default_value_t = 0.9)]
        shigh: f64,
        /// Entry to read; defaults to the first f64 entry.
        #[arg(long)]
        entry: Option<String>,
        #[arg(long, default_value = "filter-out")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `train.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env_seed()?;
    Ok(cfg)
}

fn split_dataset(manifest: &Path) -> Result<(Vec<SegSample>, Vec<SegSample>), Error> {
    let all = load_dataset(manifest)?;
    let has_val = all.iter().any(|(s, _)| s == "val");
    let held_out = if has_val { "val" } else { "test" };
    let mut train_set = Vec::new();
    let mut val = Vec::new();
    for (split, s) in all {
        if split == "train" {
            train_set.push(s);
        } else if split == held_out {
            val.push(s);
        }
    }
    Ok((train_set, val))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let manifest = cfg.manifest.clone().ok_or_else(|| {
                Error::Config(tmamba::ConfigError::Value {
                    key: "data.manifest".into(),
                    reason: "train needs a dataset manifest".into(),
                })
            })?;
            let (train_set, val) = split_dataset(&manifest)?;
            if cfg.sweep_thresholds.is_empty() {
                let out = train(&cfg, &train_set, &val, Some(&cfg.out_dir))?;
                match out.log.last() {
                    Some(r) => println!(
                        "epoch {} train_loss {:.6} val_dsc {}",
                        r.epoch,
                        r.train_loss,
                        r.val_dsc.map_or("-".into(), |d| format!("{d:.4}"))
                    ),
                    None => println!("no epochs run; initial checkpoint written"),
                }
                println!("checkpoint: {}", cfg.out_dir.join(tmamba::trainer::CHECKPOINT_FILE).display());
            } else {
                if val.is_empty() {
                    return Err(Error::Data("the threshold sweep needs a val or test split".into()));
                }
                let rows = threshold_sweep(&cfg, &train_set, &val, Some(&cfg.out_dir))?;
                print!("{}", format_sweep(&rows));
            }
        }
        Command::Eval {
            ckpt,
            manifest,
            split,
            batch,
        } => {
            let (_, model) = load_checkpoint(&ckpt)?;
            let samples: Vec<SegSample> = load_dataset(&manifest)?
                .into_iter()
                .filter(|(s, _)| split.as_ref().is_none_or(|want| s == want))
                .map(|(_, s)| s)
                .collect();
            let report = evaluate(&model, &samples, batch)?;
            print!("{}", report.to_jsonl());
        }
        Command::Gradcheck { config } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => RunConfig::default(),
            };
            let rows = gradcheck::check_all(cfg.gradcheck_eps, cfg.seed)?;
            print!("{}", gradcheck::format_table(&rows));
            if let Some(bad) = rows.iter().find(|r| !r.passed) {
                return Err(Error::CheckFailed(format!(
                    "{} relative error {:e} is not below {:e}",
                    bad.module,
                    bad.max_rel_err,
                    gradcheck::PASS_THRESHOLD
                )));
            }
        }
        Command::Bench { lengths, runs, channels } => {
            let cfg = BenchConfig {
                runs,
                channels,
                ..BenchConfig::default()
            };
            let rows = bench(&lengths, &cfg)?;
            print!("{}", tmamba::bench::format_table(&rows));
        }
        Command::Filter {
            input,
            band,
            slow,
            shigh,
            entry,
            out,
        } => {
            let band: FilterBand = band.parse()?;
            let file = read_tensorfile(&input)?;
            let name = match entry {
                Some(n) => n,
                None => file
                    .entries
                    .iter()
                    .find(|(_, e)| matches!(e.data, TensorData::F64(_)))
                    .map(|(n, _)| n.clone())
                    .ok_or_else(|| Error::Data(format!("{} holds no f64 entry", input.display())))?,
            };
            let signal = file.tensor(&name)?;
            let result = filter(&signal, band, slow, shigh)?;
            write_filter_output(&out, &result)?;
            println!(
                "kept {} of {} bins; wrote {}",
                result.kept_bins.len(),
                result.pre_mask.shape()[1],
                out.display()
            );
        }
        Command::Synth { config, out } => {
            let cfg = load_config(&config)?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let manifest = synth::write_dataset(&cfg, &dir)?;
            println!("manifest: {}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
