//! The training loop shared by every mode.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use super::evaluate::{evaluate_model, EvalReport};
use super::pseudo::{compute_pseudo_labels, read_pseudo_labels, LoadedPseudo};
use crate::attributes::{expand_label, mine_attributes, AttributeMask, MaskStore};
use crate::attrnet::{AttrNet, AttrNetConfig};
use crate::dataset::{load_labeled, LabeledImage, Split};
use crate::engine::{checkpoint, Sgd, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mixer::{self, attribute_mix_masks, gate, sample_lambda, MixInput, MixStats};
use crate::rng;
use crate::transfer::{AugmentedStream, StreamItem};

/// Random-resized crop: area fraction `U(min_scale, 1)`, aspect ratio
/// log-uniform in [3/4, 4/3], resized back to `side`. Falls back to the
/// whole image after ten misses.
pub fn random_crop<R: Rng + ?Sized>(img: &Image, side: usize, min_scale: f64, rng: &mut R) -> Image {
    let (h, w) = (img.height(), img.width());
    let area = (h * w) as f64;
    for _ in 0..10 {
        let s = rng.gen_range(min_scale..=1.0);
        let r = rng.gen_range((0.75f64).ln()..=(4.0f64 / 3.0).ln()).exp();
        let cw = (s * area * r).sqrt().round() as usize;
        let ch = (s * area / r).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return img.crop_resize(top, left, ch, cw, side, side);
        }
    }
    img.crop_resize(0, 0, h, w, side, side)
}

/// Central square of `fraction` of each side, resized to `side`.
pub fn center_crop(img: &Image, side: usize, fraction: f64) -> Image {
    let (h, w) = (img.height(), img.width());
    let ch = ((h as f64 * fraction).round() as usize).clamp(1, h);
    let cw = ((w as f64 * fraction).round() as usize).clamp(1, w);
    img.crop_resize((h - ch) / 2, (w - cw) / 2, ch, cw, side, side)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub learning_rate: f64,
    pub mix: MixStats,
    /// Seconds spent in the epoch; written to `timing.csv`, not to the
    /// (byte-reproducible) metrics file.
    pub wall_time: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,train_loss,test_accuracy,learning_rate,mix_attempted,mix_accepted,mix_gated,mix_fallback,mix_acceptance";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10},{:.6},{:.8},{},{},{},{},{:.6}",
            self.epoch,
            self.train_loss,
            self.test_accuracy,
            self.learning_rate,
            self.mix.attempted,
            self.mix.accepted,
            self.mix.gated,
            self.mix.fallback,
            self.mix.acceptance_rate()
        )
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub metrics: Vec<MetricsRecord>,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub model_config: AttrNetConfig,
}

/// Everything a run trains and evaluates on, loaded once.
pub struct RunData {
    pub num_classes: usize,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    /// Per training image, one optional mask per attribute.
    pub masks: Option<Vec<Vec<Option<AttributeMask>>>>,
    pub pseudo: Vec<LoadedPseudo>,
}

pub fn infer_num_classes(sets: &[&[LabeledImage]]) -> usize {
    sets.iter().flat_map(|s| s.iter()).map(|s| s.class + 1).max().unwrap_or(0)
}

/// Mines masks for the training split and writes them to `dir`.
pub fn mine_to_store(config: &ExperimentConfig, train: &[LabeledImage], num_classes: usize, dir: &Path) -> Result<Vec<Vec<Option<AttributeMask>>>> {
    let model_config = config.model.to_config(num_classes);
    let outcome = mine_attributes(train, &model_config, &config.mining_schedule())?;
    MaskStore::new(dir).save(model_config.attributes_per_class, train, &outcome.masks)?;
    outcome.model.save(&dir.join("mining.ckpt"))?;
    Ok(outcome.masks)
}

pub fn load_masks(dir: &Path, train: &[LabeledImage], k: usize) -> Result<Vec<Vec<Option<AttributeMask>>>> {
    let store = MaskStore::new(dir);
    let index = store.index()?;
    if index.attributes_per_class != k {
        return Err(Error::Config(format!(
            "mask store {} holds k = {}, model has k = {k}",
            dir.display(),
            index.attributes_per_class
        )));
    }
    train
        .iter()
        .map(|s| match index.images.contains_key(&s.id) {
            true => store.load_image_masks(&index, &s.id),
            false => Ok(vec![None; k]),
        })
        .collect()
}

impl RunData {
    pub fn load(config: &ExperimentConfig, run_dir: &Path) -> Result<Self> {
        let train = load_labeled(&config.data.manifest, Split::Train)?;
        let test = load_labeled(&config.data.manifest, Split::Test)?;
        let inferred = infer_num_classes(&[&train, &test]);
        let num_classes = config.data.num_classes.unwrap_or(inferred);
        if inferred > num_classes {
            return Err(Error::Config(format!(
                "manifest has class {} but num_classes = {num_classes}",
                inferred - 1
            )));
        }
        let k = config.model.attributes_per_class;
        let masks = if config.mode.needs_masks() {
            Some(match &config.data.masks {
                Some(dir) => load_masks(dir, &train, k)?,
                None => mine_to_store(config, &train, num_classes, &run_dir.join("masks"))?,
            })
        } else {
            None
        };
        let pseudo = if config.mode.uses_pseudo() {
            match &config.data.pseudo_labels {
                Some(p) => read_pseudo_labels(p)?,
                None => {
                    let teacher = AttrNet::load(config.transfer.teacher.as_ref().expect("validated"))?;
                    let pool = config.data.pool_manifest.as_ref().unwrap_or(&config.data.manifest);
                    let (records, _) = compute_pseudo_labels(&teacher, pool, &config.transfer)?;
                    records
                }
            }
        } else {
            Vec::new()
        };
        Ok(RunData { num_classes, train, test, masks, pseudo })
    }
}

fn hard_labels(train: &[LabeledImage], c: usize, k: usize) -> Result<Vec<Vec<f64>>> {
    train
        .iter()
        .map(|s| Ok(expand_label(s.class, c, k)?.into_vec()))
        .collect()
}

fn sample_index(epoch: usize, position: usize) -> u64 {
    ((epoch as u64) << 32) | position as u64
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    data: &'a RunData,
    labels: Vec<Vec<f64>>,
    side: usize,
}

impl Context<'_> {
    /// Mixing step for a labeled sample; returns the image, the label and
    /// this sample's contribution to the mix counters.
    fn mix(&self, i: usize, epoch: usize, rng: &mut ChaCha8Rng) -> Result<(Image, Vec<f64>, MixStats)> {
        let train = &self.data.train;
        let a = MixInput { id: &train[i].id, image: &train[i].image, label: &self.labels[i] };
        let mut stats = MixStats::default();
        let mode = self.config.mode;
        if !mode.mixes() || train.len() < 2 {
            return Ok((a.image.clone(), a.label.to_vec(), stats));
        }
        stats.attempted = 1;
        let lambda = match self.config.mix.force_lambda {
            Some(l) => l,
            None => sample_lambda(self.config.mix.alpha, rng)?,
        };
        let mut j = rng.gen_range(0..train.len() - 1);
        if j >= i {
            j += 1;
        }
        let b = MixInput { id: &train[j].id, image: &train[j].image, label: &self.labels[j] };
        let mixed = match mode {
            Mode::Mixup => Some(mixer::mixup(a, b, lambda)?),
            Mode::Cutmix => Some(mixer::cutmix(a, b, lambda, rng)?),
            _ => {
                if !gate(lambda, epoch as f64, &self.config.mix_config().schedule()) {
                    stats.gated = 1;
                    return Ok((a.image.clone(), a.label.to_vec(), stats));
                }
                let k = self.config.model.attributes_per_class;
                let attr_a = rng.gen_range(0..k);
                let attr_b = if self.config.mix.shared_attribute { attr_a } else { rng.gen_range(0..k) };
                let masks = self.data.masks.as_ref().expect("masks loaded for attribute modes");
                match (&masks[i][attr_a], &masks[j][attr_b]) {
                    (Some(ma), Some(mb)) => attribute_mix_masks(a, b, ma, mb, lambda, self.config.mix.transfer)?,
                    _ => None,
                }
            }
        };
        match mixed {
            Some(m) => {
                stats.accepted = 1;
                Ok((m.image, m.label, stats))
            }
            None => {
                stats.fallback = 1;
                Ok((a.image.clone(), a.label.to_vec(), stats))
            }
        }
    }

    fn prepare(&self, item: StreamItem, epoch: usize, position: usize) -> Result<(Image, Vec<f64>, MixStats)> {
        let idx = sample_index(epoch, position);
        let seed = self.config.seed;
        let (image, label, stats) = match item {
            StreamItem::Labeled(i) => self.mix(i, epoch, &mut rng::stream(seed, "mix", idx))?,
            StreamItem::Pseudo(p) => (
                self.data.pseudo[p].image.clone(),
                self.data.pseudo[p].record.label.clone(),
                MixStats::default(),
            ),
        };
        let mut crop_rng = rng::stream(seed, "crop", idx);
        let mut image = random_crop(&image, self.side, self.config.train.crop_min_scale, &mut crop_rng);
        if self.config.train.flip && crop_rng.gen_bool(0.5) {
            image = image.flip_horizontal();
        }
        Ok((image, label, stats))
    }
}

fn state_tensor(v: f64) -> Tensor {
    Tensor::scalar(v)
}

fn save_state(path: &Path, net: &AttrNet, opt: &Sgd, epoch: usize, best: (f64, usize)) -> Result<()> {
    let mut tensors = net.named_params();
    for ((name, p), v) in net.param_names().iter().zip(net.params()).zip(opt.velocity()) {
        if !v.is_empty() {
            tensors.push((format!("optim.{name}"), Tensor::new(p.shape(), v.clone())?));
        }
    }
    tensors.push(("state.epoch".into(), state_tensor(epoch as f64)));
    tensors.push(("state.best_accuracy".into(), state_tensor(best.0)));
    tensors.push(("state.best_epoch".into(), state_tensor(best.1 as f64)));
    checkpoint::save(path, &tensors)?;
    let card = crate::attrnet::card_path(path);
    std::fs::write(&card, serde_json::to_vec_pretty(net.config())?).map_err(|e| Error::io(&card, e))
}

struct Resumed {
    next_epoch: usize,
    best: (f64, usize),
}

fn restore_state(path: &Path, net: &mut AttrNet, opt: &mut Sgd) -> Result<Resumed> {
    let tensors = checkpoint::load(path)?;
    let get = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.item())
            .ok_or_else(|| Error::Checkpoint { path: path.to_path_buf(), message: format!("missing {name}") })
    };
    let epoch = get("state.epoch")? as usize;
    let best = (get("state.best_accuracy")?, get("state.best_epoch")? as usize);
    let weights: Vec<_> = tensors
        .iter()
        .filter(|(n, _)| !n.starts_with("optim.") && !n.starts_with("state."))
        .cloned()
        .collect();
    net.set_params(weights)?;
    let velocity = net
        .param_names()
        .iter()
        .map(|name| {
            let key = format!("optim.{name}");
            tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.data().to_vec())
                .unwrap_or_default()
        })
        .collect();
    opt.restore_velocity(velocity);
    Ok(Resumed { next_epoch: epoch + 1, best })
}

fn read_metrics_prefix(path: &Path, upto: usize) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < upto))
        .map(str::to_string)
        .collect())
}

fn write_lines(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Directory layout of a run.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn last(&self) -> PathBuf {
        self.checkpoints().join("last.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.checkpoints().join("best.ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Trains with the data already in memory.
pub fn train_with(config: &ExperimentConfig, data: &RunData, run_dir: &Path, resume: bool) -> Result<RunSummary> {
    let dirs = RunDir::new(run_dir);
    for d in [dirs.checkpoints(), dirs.plots()] {
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let echo = run_dir.join("config.echo");
    std::fs::write(&echo, config.echo()?).map_err(|e| Error::io(&echo, e))?;

    let k = config.model.attributes_per_class;
    let model_config = config.model.to_config(data.num_classes);
    let mut net = AttrNet::new(model_config.clone(), rng::derive_seed(config.seed, "init", 0))?;
    let sgd = config.sgd_config();
    let mut opt = Sgd::new(sgd.clone())?;
    let total = config.total_epochs();

    let mut start = 0;
    let mut best = (-1.0, 0);
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    if resume && dirs.last().exists() {
        let r = restore_state(&dirs.last(), &mut net, &mut opt)?;
        start = r.next_epoch;
        best = r.best;
        rows = read_metrics_prefix(&dirs.metrics(), start)?;
        let t = run_dir.join("timing.csv");
        if t.exists() {
            timing = read_metrics_prefix(&t, start)?;
        }
        info!("resuming {} at epoch {start}", run_dir.display());
    }

    for p in &data.pseudo {
        if p.record.label.len() != model_config.head_channels() {
            return Err(Error::shape(
                "train",
                "pseudo label length",
                model_config.head_channels(),
                format!("{} ({})", p.record.label.len(), p.record.id),
            ));
        }
    }
    let ctx = Context {
        config,
        data,
        labels: hard_labels(&data.train, data.num_classes, k)?,
        side: model_config.input_side,
    };
    let stream = AugmentedStream {
        labeled: data.train.len(),
        pseudo: data.pseudo.len(),
        pseudo_ratio: if config.mode.uses_pseudo() { config.transfer.pseudo_ratio } else { 0.0 },
        seed: config.seed,
    };

    let mut metrics = Vec::new();
    let mut last_report: Option<EvalReport> = None;
    for epoch in start..total {
        let t0 = Instant::now();
        let items = if config.mode.uses_pseudo() {
            stream.epoch(epoch)
        } else {
            let mut order: Vec<StreamItem> = (0..data.train.len()).map(StreamItem::Labeled).collect();
            order.shuffle(&mut rng::stream(config.seed, "order", epoch as u64));
            order
        };
        let mut stats = MixStats::default();
        let mut loss_sum = 0.0;
        for (b, chunk) in items.chunks(config.train.batch_size).enumerate() {
            let base = b * config.train.batch_size;
            let prepared: Vec<(Image, Vec<f64>, MixStats)> = chunk
                .par_iter()
                .enumerate()
                .map(|(o, &item)| ctx.prepare(item, epoch, base + o))
                .collect::<Result<_>>()?;
            let mut batch = Vec::with_capacity(prepared.len());
            for (img, label, s) in prepared {
                stats.merge(&s);
                batch.push((img, label));
            }
            loss_sum += net.accumulate_batch(&batch)? * batch.len() as f64;
            opt.step(net.params_mut(), epoch)?;
        }
        let report = evaluate_model(&net, &data.test, config.train.eval_crop)?;
        let record = MetricsRecord {
            epoch,
            train_loss: loss_sum / items.len().max(1) as f64,
            test_accuracy: report.accuracy,
            learning_rate: sgd.effective_lr(epoch),
            mix: stats,
            wall_time: t0.elapsed().as_secs_f64(),
        };
        info!(
            "{} epoch {epoch}: loss {:.4} acc {:.4} mix {}/{}",
            config.mode.name(),
            record.train_loss,
            record.test_accuracy,
            stats.accepted,
            stats.attempted
        );
        if record.test_accuracy > best.0 {
            best = (record.test_accuracy, epoch);
            net.save(&dirs.best())?;
        }
        rows.push(record.csv_row());
        timing.push(format!("{epoch},{:.3}", record.wall_time));
        write_lines(&dirs.metrics(), METRICS_HEADER, &rows)?;
        write_lines(&run_dir.join("timing.csv"), "epoch,wall_seconds", &timing)?;
        save_state(&dirs.last(), &net, &opt, epoch, best)?;
        metrics.push(record);
        last_report = Some(report);
    }

    let gamma: Vec<String> = (0..total)
        .map(|e| format!("{e},{:.6}", config.mix_config().schedule().gamma(e as f64)))
        .collect();
    write_lines(&dirs.plots().join("gate.csv"), "epoch,gamma", &gamma)?;
    let curve: Vec<String> = rows
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.split(',').collect();
            format!("{},{},{}", f[0], f[1], f[2])
        })
        .collect();
    write_lines(&dirs.plots().join("curves.csv"), "epoch,train_loss,test_accuracy", &curve)?;

    let final_accuracy = match last_report {
        Some(r) => r.accuracy,
        None => evaluate_model(&net, &data.test, config.train.eval_crop)?.accuracy,
    };
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        metrics,
        final_accuracy,
        best_accuracy: best.0.max(0.0),
        best_epoch: best.1,
        model_config,
    })
}

/// Loads the data named in `config` and trains; see [`train_with`].
pub fn train(config: &ExperimentConfig, run_dir: &Path, resume: bool) -> Result<RunSummary> {
    config.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let data = RunData::load(config, run_dir)?;
    train_with(config, &data, run_dir, resume)
}
