//! Attribute-level pseudo labels for images without fine-grained classes.
//!
//! Each pool image is pushed through a trained [`AttrNet`]; every attribute
//! row of the logit matrix becomes a temperature softmax over classes, and
//! the image is ranked by the total entropy of those rows (bits). Low-entropy
//! images are kept as soft-labeled training samples.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attrnet::{combine_scores_with, predict_attribute_probs, AttrNet, AttributeProbabilities};
use crate::dataset::{PoolImage, Provenance};
use crate::engine::softmax_in_place;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

const ROW_TOLERANCE: f64 = 1e-9;

/// Images known only to belong to the generic domain.
#[derive(Clone, Debug, Default)]
pub struct UnlabeledPool {
    pub images: Vec<PoolImage>,
}

impl UnlabeledPool {
    pub fn new(images: Vec<PoolImage>) -> Self {
        UnlabeledPool { images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Largest possible entropy of a k×C probability matrix, in bits.
pub fn max_entropy(k: usize, c: usize) -> f64 {
    k as f64 * (c as f64).log2()
}

/// Σ over rows of −Σ p·log2 p, with 0·log 0 = 0.
pub fn entropy(p: &AttributeProbabilities) -> Result<f64> {
    let mut h = 0.0;
    for i in 0..p.k {
        let row = p.row(i);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if !(0.0..=1.0 + ROW_TOLERANCE).contains(&v) {
                return Err(Error::InvalidArgument(format!("probability [{i}][{j}] = {v} outside [0,1]")));
            }
            sum += v;
            if v > 0.0 {
                h -= v * v.log2();
            }
        }
        if (sum - 1.0).abs() > ROW_TOLERANCE {
            return Err(Error::InvalidArgument(format!("row {i} sums to {sum}, not 1")));
        }
    }
    Ok(h.max(0.0))
}

/// How the entropy cut-off τ is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum Threshold {
    /// Keep images with H ≤ τ bits.
    Absolute(f64),
    /// Keep the lowest-entropy fraction of the pool (ties at the cut are kept).
    Percentile(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Percentile(0.5)
    }
}

impl Threshold {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Threshold::Absolute(t) if t.is_nan() || t < 0.0 => {
                Err(Error::Config(format!("tau must be nonnegative, got {t}")))
            }
            Threshold::Percentile(q) if !(q > 0.0 && q <= 1.0) => {
                Err(Error::Config(format!("tau percentile must lie in (0,1], got {q}")))
            }
            _ => Ok(()),
        }
    }

    /// Absolute cut-off for a pool with the given entropies.
    pub fn resolve(&self, entropies: &[f64]) -> f64 {
        match *self {
            Threshold::Absolute(t) => t,
            Threshold::Percentile(q) => {
                if entropies.is_empty() {
                    return 0.0;
                }
                let mut sorted = entropies.to_vec();
                sorted.sort_by(f64::total_cmp);
                let keep = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
                sorted[keep - 1]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSample {
    pub id: String,
    pub image: Image,
    /// Soft label in the `kC` class-major layout; each attribute row sums to 1.
    pub label: Vec<f64>,
    pub entropy: f64,
    pub provenance: Provenance,
}

/// Pseudo labels for every pool image, in pool order.
pub fn score_pool(pool: &UnlabeledPool, model: &AttrNet, temperature: f64) -> Result<Vec<PseudoSample>> {
    pool.images
        .par_iter()
        .map(|img| {
            let (z, _) = model.forward_one(&img.image)?;
            let p = predict_attribute_probs(&z, temperature)?;
            Ok(PseudoSample {
                id: img.id.clone(),
                image: img.image.clone(),
                entropy: entropy(&p)?,
                label: p.to_label(),
                provenance: img.provenance,
            })
        })
        .collect()
}

/// Keeps samples with H ≤ τ, sorted by ascending entropy (pool order on ties).
pub fn select(mut scored: Vec<PseudoSample>, threshold: Threshold) -> Result<Vec<PseudoSample>> {
    threshold.validate()?;
    let entropies: Vec<f64> = scored.iter().map(|s| s.entropy).collect();
    let tau = threshold.resolve(&entropies);
    scored.retain(|s| s.entropy <= tau);
    scored.sort_by(|a, b| a.entropy.total_cmp(&b.entropy));
    Ok(scored)
}

pub fn filter_pool(
    pool: &UnlabeledPool,
    model: &AttrNet,
    temperature: f64,
    threshold: Threshold,
) -> Result<Vec<PseudoSample>> {
    select(score_pool(pool, model, temperature)?, threshold)
}

/// Image-level comparator: a softmax over combined class scores, with no
/// attribute structure.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePseudoSample {
    pub id: String,
    pub image: Image,
    pub label: Vec<f64>,
    pub provenance: Provenance,
}

impl ImagePseudoSample {
    /// Repeats the class distribution on every attribute, giving a `kC`
    /// target the multi-hot head can train on.
    pub fn to_attribute_label(&self, k: usize) -> Vec<f64> {
        expand_class_distribution(&self.label, k)
    }
}

pub fn expand_class_distribution(q: &[f64], k: usize) -> Vec<f64> {
    q.iter().flat_map(|&v| std::iter::repeat(v).take(k)).collect()
}

pub fn class_distribution(scores: &[f64], temperature: f64) -> Vec<f64> {
    let mut q: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    softmax_in_place(&mut q);
    q
}

pub fn image_level_pseudo_label(
    pool: &UnlabeledPool,
    model: &AttrNet,
    temperature: f64,
) -> Result<Vec<ImagePseudoSample>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let mode = model.config().score_mode;
    pool.images
        .par_iter()
        .map(|img| {
            let (z, _) = model.forward_one(&img.image)?;
            Ok(ImagePseudoSample {
                id: img.id.clone(),
                image: img.image.clone(),
                label: class_distribution(&combine_scores_with(&z, mode), temperature),
                provenance: img.provenance,
            })
        })
        .collect()
}

/// One element of an epoch of the enlarged training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamItem {
    Labeled(usize),
    Pseudo(usize),
}

/// Epoch plan mixing every labeled sample with a rotating share of the
/// pseudo-labeled samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentedStream {
    pub labeled: usize,
    pub pseudo: usize,
    /// Pseudo samples drawn per labeled sample each epoch.
    pub pseudo_ratio: f64,
    pub seed: u64,
}

impl AugmentedStream {
    pub fn pseudo_per_epoch(&self) -> usize {
        ((self.pseudo_ratio * self.labeled as f64).round() as usize).min(self.pseudo)
    }

    /// Shuffled items of `epoch`. Pseudo samples are visited in a fixed
    /// per-cycle permutation so that every kept sample is used before any
    /// repeats.
    pub fn epoch(&self, epoch: usize) -> Vec<StreamItem> {
        let mut items: Vec<StreamItem> = (0..self.labeled).map(StreamItem::Labeled).collect();
        let per = self.pseudo_per_epoch();
        if per > 0 {
            let start = epoch * per;
            let mut cycle = usize::MAX;
            let mut perm: Vec<usize> = Vec::new();
            for n in start..start + per {
                let c = n / self.pseudo;
                if c != cycle {
                    cycle = c;
                    perm = (0..self.pseudo).collect();
                    perm.shuffle(&mut rng::stream(self.seed, "pseudo-cycle", c as u64));
                }
                items.push(StreamItem::Pseudo(perm[n % self.pseudo]));
            }
        }
        items.shuffle(&mut rng::stream(self.seed, "stream-shuffle", epoch as u64));
        items
    }
}

/// The enlarged training set: hard-labeled samples plus kept pseudo samples.
pub fn build_augmented_trainset(labeled: usize, pseudo: &[PseudoSample], pseudo_ratio: f64, seed: u64) -> Result<AugmentedStream> {
    for s in pseudo {
        let total: f64 = s.label.iter().sum();
        if !total.is_finite() || s.label.iter().any(|&v| !(0.0..=1.0 + ROW_TOLERANCE).contains(&v)) {
            return Err(Error::InvalidArgument(format!("pseudo label of {} is not stochastic", s.id)));
        }
    }
    if !(pseudo_ratio >= 0.0) {
        return Err(Error::Config(format!("pseudo ratio must be nonnegative, got {pseudo_ratio}")));
    }
    Ok(AugmentedStream {
        labeled,
        pseudo: pseudo.len(),
        pseudo_ratio,
        seed,
    })
}
