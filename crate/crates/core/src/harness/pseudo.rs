//! Pseudo-label files: one JSON object per kept pool image.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{LabelLevel, TransferSection};
use crate::attrnet::{AttrNet, AttributeProbabilities};
use crate::dataset::{load_pool, read_manifest, resolve, Provenance, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::transfer::{
    entropy, expand_class_distribution, image_level_pseudo_label, max_entropy, score_pool,
    select, PseudoSample, UnlabeledPool,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoRecord {
    pub id: String,
    pub path: String,
    /// `kC` soft label.
    pub label: Vec<f64>,
    pub entropy: f64,
    pub provenance: Provenance,
    pub level: LabelLevel,
}

/// A record together with its decoded image.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedPseudo {
    pub record: PseudoRecord,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoSummary {
    pub level: LabelLevel,
    pub pool_size: usize,
    pub pool_noise: usize,
    pub kept: usize,
    pub kept_noise: usize,
    pub tau: f64,
    pub max_entropy: f64,
    /// `(bin_lo, bin_hi, pool, kept)`.
    pub histogram: Vec<(f64, f64, usize, usize)>,
}

impl PseudoSummary {
    /// Share of noise images removed by the filter.
    pub fn noise_removed(&self) -> f64 {
        if self.pool_noise == 0 {
            1.0
        } else {
            1.0 - self.kept_noise as f64 / self.pool_noise as f64
        }
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,pool,kept\n");
        for (lo, hi, p, k) in &self.histogram {
            out.push_str(&format!("{lo:.6},{hi:.6},{p},{k}\n"));
        }
        out
    }
}

const BINS: usize = 20;

fn histogram(all: &[f64], kept: &[f64], top: f64) -> Vec<(f64, f64, usize, usize)> {
    let width = top.max(1e-12) / BINS as f64;
    let bin = |h: f64| ((h / width) as usize).min(BINS - 1);
    let mut hist: Vec<(f64, f64, usize, usize)> =
        (0..BINS).map(|i| (i as f64 * width, (i + 1) as f64 * width, 0, 0)).collect();
    all.iter().for_each(|&h| hist[bin(h)].2 += 1);
    kept.iter().for_each(|&h| hist[bin(h)].3 += 1);
    hist
}

/// Scores the `unlabeled` split of `pool_manifest` with `teacher` and keeps
/// the low-entropy images.
pub fn compute_pseudo_labels(
    teacher: &AttrNet,
    pool_manifest: &Path,
    transfer: &TransferSection,
) -> Result<(Vec<LoadedPseudo>, PseudoSummary)> {
    let pool = UnlabeledPool::new(load_pool(pool_manifest, Split::Unlabeled)?);
    let paths: std::collections::HashMap<String, PathBuf> = read_manifest(pool_manifest)?
        .iter()
        .map(|e| (e.id.clone(), resolve(pool_manifest, e)))
        .collect();
    let cfg = teacher.config();
    let (k, c) = (cfg.attributes_per_class, cfg.num_classes);
    let scored: Vec<PseudoSample> = match transfer.level {
        LabelLevel::Attribute => score_pool(&pool, teacher, transfer.temperature)?,
        LabelLevel::Image => image_level_pseudo_label(&pool, teacher, transfer.temperature)?
            .into_iter()
            .map(|s| {
                let h = entropy(&AttributeProbabilities::new(1, c, s.label.clone())?)?;
                Ok(PseudoSample {
                    id: s.id,
                    image: s.image,
                    label: expand_class_distribution(&s.label, k),
                    entropy: h,
                    provenance: s.provenance,
                })
            })
            .collect::<Result<_>>()?,
    };
    let top = match transfer.level {
        LabelLevel::Attribute => max_entropy(k, c),
        LabelLevel::Image => max_entropy(1, c),
    };
    let all: Vec<f64> = scored.iter().map(|s| s.entropy).collect();
    let tau = transfer.tau.resolve(&all);
    let pool_noise = scored.iter().filter(|s| s.provenance == Provenance::Noise).count();
    let kept = select(scored, transfer.tau)?;
    let kept_h: Vec<f64> = kept.iter().map(|s| s.entropy).collect();
    let summary = PseudoSummary {
        level: transfer.level,
        pool_size: all.len(),
        pool_noise,
        kept: kept.len(),
        kept_noise: kept.iter().filter(|s| s.provenance == Provenance::Noise).count(),
        tau,
        max_entropy: top,
        histogram: histogram(&all, &kept_h, top),
    };
    let records = kept
        .into_iter()
        .map(|s| LoadedPseudo {
            record: PseudoRecord {
                path: paths.get(&s.id).map(|p| p.to_string_lossy().into_owned()).unwrap_or_default(),
                id: s.id,
                label: s.label,
                entropy: s.entropy,
                provenance: s.provenance,
                level: transfer.level,
            },
            image: s.image,
        })
        .collect();
    Ok((records, summary))
}

pub fn write_pseudo_labels(path: &Path, records: &[LoadedPseudo]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &r.record)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads records and their images; relative image paths are taken from the
/// file's directory.
pub fn read_pseudo_labels(path: &Path) -> Result<Vec<LoadedPseudo>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PseudoRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let p = Path::new(&r.path);
        let p = if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        out.push(LoadedPseudo { image: Image::load_png(&p)?, record: r });
    }
    Ok(out)
}
