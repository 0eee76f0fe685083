//! `attrmix` command line.
//!
//! Every subcommand that reads an experiment config also accepts
//! `--set section.key=value` (repeatable) applied after the file.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::warn;
use rand::Rng;

use super::config::{apply_override, ExperimentConfig, LabelLevel};
use super::evaluate::evaluate;
use super::pseudo::{compute_pseudo_labels, write_pseudo_labels};
use super::sweep::{parse_tau, sweep, Axis};
use super::train::{load_masks, mine_to_store, train};
use crate::attributes::expand_label;
use crate::attrnet::AttrNet;
use crate::dataset::{load_labeled, Split};
use crate::error::{Error, Result};
use crate::mixer::{attribute_mix_masks, gate, sample_lambda, Decay, MixConfig, MixInput};
use crate::rng;
use crate::synthbench::{generate, GeneratorConfig};

#[derive(Parser, Debug)]
#[command(name = "attrmix", version, about = "Attribute-level data augmentation for fine-grained recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set mix.alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set data.manifest=PATH`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(m) = &self.manifest {
            overrides.push(format!("data.manifest={}", toml_string(m)));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.to_string_lossy().into_owned()).to_string()
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic benchmark (manifest, PNGs, ground truth).
    Generate {
        /// Generator config (TOML, flat keys).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one generator key, e.g. `--set train_per_class=8`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from `checkpoints/last.ckpt` if present.
        #[arg(long)]
        resume: bool,
    },
    /// Mine attribute masks for the training split into a mask store.
    Mine {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write Attribute Mix samples as PNGs plus a JSON-lines index.
    Augment {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Mask store directory.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mixed samples to write.
        #[arg(long, default_value_t = 32)]
        count: usize,
        /// Epoch at which the time-decay gate is evaluated.
        #[arg(long, default_value_t = 0)]
        epoch: usize,
    },
    /// Pseudo-label the unlabeled split with a trained model.
    PseudoLabel {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest whose `unlabeled` split is the pool.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// `p0.5` keeps the lowest-entropy half; a number is an absolute τ in bits.
        #[arg(long, default_value = "p0.5")]
        tau: String,
        #[arg(long, value_enum, default_value = "attribute")]
        level: LevelArg,
    },
    /// Score a checkpoint on a manifest split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0.875)]
        eval_crop: f64,
        /// Expected attributes per class.
        #[arg(long)]
        k: Option<usize>,
        /// Directory for accuracy.json, per_class.csv and logits.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate over one parameter axis.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `1,2,3,4` or `none,cosine`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum LevelArg {
    Attribute,
    Image,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum SplitArg {
    Train,
    Test,
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).unwrap_or_default());
}

fn generator_config(config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<GeneratorConfig> {
    let mut table = match config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .parse::<toml::Table>()
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    let cfg: GeneratorConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn augment(config: &ExperimentConfig, masks_dir: &Path, out: &Path, count: usize, epoch: usize) -> Result<serde_json::Value> {
    let train = load_labeled(&config.data.manifest, Split::Train)?;
    if train.len() < 2 {
        return Err(Error::InvalidArgument("augment needs at least two training images".into()));
    }
    let c = config
        .data
        .num_classes
        .unwrap_or_else(|| super::train::infer_num_classes(&[&train]));
    let k = config.model.attributes_per_class;
    let masks = load_masks(masks_dir, &train, k)?;
    let labels: Vec<Vec<f64>> = train
        .iter()
        .map(|s| Ok(expand_label(s.class, c, k)?.into_vec()))
        .collect::<Result<_>>()?;
    let mix = MixConfig { total_epochs: config.total_epochs(), ..config.mix_config() };
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut lines = Vec::new();
    let (mut written, mut gated, mut fallback) = (0usize, 0usize, 0usize);
    // draws that gate out or lack a mask are retried, up to a bound
    let max_draws = count.saturating_mul(50);
    for n in 0..max_draws {
        if written == count {
            break;
        }
        let mut r = rng::stream(config.seed, "augment", n as u64);
        let i = r.gen_range(0..train.len());
        let mut j = r.gen_range(0..train.len() - 1);
        if j >= i {
            j += 1;
        }
        let lambda = match config.mix.force_lambda {
            Some(l) => l,
            None => sample_lambda(mix.alpha, &mut r)?,
        };
        if mix.decay != Decay::None && !gate(lambda, epoch as f64, &mix.schedule()) {
            gated += 1;
            continue;
        }
        let attr = r.gen_range(0..k);
        let attr_b = if mix.shared_attribute { attr } else { r.gen_range(0..k) };
        let a = MixInput { id: &train[i].id, image: &train[i].image, label: &labels[i] };
        let b = MixInput { id: &train[j].id, image: &train[j].image, label: &labels[j] };
        let mixed = match (&masks[i][attr], &masks[j][attr_b]) {
            (Some(ma), Some(mb)) => attribute_mix_masks(a, b, ma, mb, lambda, mix.transfer)?,
            _ => None,
        };
        let Some(m) = mixed else {
            fallback += 1;
            continue;
        };
        let name = format!("mix_{written:05}.png");
        m.image.save_png(&images.join(&name))?;
        lines.push(serde_json::to_string(&serde_json::json!({
            "path": format!("images/{name}"),
            "label": m.label,
            "lambda": m.lambda,
            "provenance": m.provenance,
        }))?);
        written += 1;
    }
    let mut body = lines.join("\n");
    body.push('\n');
    write_file(&out.join("augment.jsonl"), body)?;
    if written < count {
        warn!("augment: only {written} of {count} mixes after {max_draws} draws");
    }
    Ok(serde_json::json!({ "written": written, "gated": gated, "fallback": fallback }))
}

pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
            print!("{e}");
            return Error::InvalidArgument(String::new());
        }
        Error::InvalidArgument(e.to_string())
    })?;
    match cli.command {
        Command::Generate { config, overrides, seed, out } => {
            let cfg = generator_config(config.as_deref(), &overrides, seed)?;
            let data = generate(&cfg, &out)?;
            print_json(&serde_json::json!({
                "manifest": out.join("manifest.jsonl"),
                "train": data.train.len(),
                "test": data.test.len(),
                "unlabeled": data.unlabeled.len(),
            }));
        }
        Command::Train { cfg, run_dir, resume } => {
            let config = cfg.load()?;
            let s = train(&config, &run_dir, resume)?;
            print_json(&serde_json::json!({
                "run_dir": s.run_dir,
                "epochs": config.total_epochs(),
                "final_accuracy": s.final_accuracy,
                "best_accuracy": s.best_accuracy,
                "best_epoch": s.best_epoch,
            }));
        }
        Command::Mine { cfg, out } => {
            let config = cfg.load()?;
            let train = load_labeled(&config.data.manifest, Split::Train)?;
            let c = config
                .data
                .num_classes
                .unwrap_or_else(|| super::train::infer_num_classes(&[&train]));
            let masks = mine_to_store(&config, &train, c, &out)?;
            let found: usize = masks.iter().flatten().filter(|m| m.is_some()).count();
            print_json(&serde_json::json!({
                "mask_store": out,
                "images": train.len(),
                "masks": found,
                "empty": masks.len() * config.model.attributes_per_class - found,
            }));
        }
        Command::Augment { cfg, masks, out, count, epoch } => {
            let config = cfg.load()?;
            print_json(&augment(&config, &masks, &out, count, epoch)?);
        }
        Command::PseudoLabel { checkpoint, manifest, out, temperature, tau, level } => {
            let teacher = AttrNet::load(&checkpoint)?;
            let transfer = super::config::TransferSection {
                temperature,
                tau: parse_tau(&tau)?,
                level: match level {
                    LevelArg::Attribute => LabelLevel::Attribute,
                    LevelArg::Image => LabelLevel::Image,
                },
                ..Default::default()
            };
            transfer.tau.validate()?;
            let (records, summary) = compute_pseudo_labels(&teacher, &manifest, &transfer)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_pseudo_labels(&out.join("pseudo_labels.jsonl"), &records)?;
            write_file(&out.join("entropy_histogram.csv"), summary.histogram_csv())?;
            write_file(&out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
            print_json(&serde_json::json!({
                "pool": summary.pool_size,
                "kept": summary.kept,
                "tau": summary.tau,
                "noise_removed": summary.noise_removed(),
            }));
        }
        Command::Evaluate { checkpoint, manifest, split, eval_crop, k, out } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let report = evaluate(&checkpoint, &manifest, split, eval_crop, k)?;
            if let Some(dir) = out {
                report.write(&dir)?;
            }
            print_json(&serde_json::json!({
                "accuracy": report.accuracy,
                "count": report.predictions.len(),
                "per_class": report.per_class,
            }));
        }
        Command::Sweep { cfg, axis, values, seeds, out } => {
            let config = cfg.load()?;
            let axis: Axis = axis.parse()?;
            let (_, summary) = sweep(&config, axis, &values, &seeds, &out)?;
            print_json(&serde_json::json!({ "axis": axis.name(), "summary": summary }));
        }
    }
    Ok(())
}

/// Runs the CLI on the process arguments; errors become one JSON object
/// on stderr and a nonzero exit code.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match run(std::env::args_os()) {
        Ok(()) => 0,
        Err(Error::InvalidArgument(m)) if m.is_empty() => 0,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            let _ = writeln!(std::io::stderr(), "{body}");
            if matches!(e, Error::InvalidArgument(_) | Error::Config(_)) {
                2
            } else {
                1
            }
        }
    }
}

