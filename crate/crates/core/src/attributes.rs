//! Multi-hot attribute labels and iterative attribute mining.
//!
//! Mining alternates between training the attribute classifier and, for
//! every image of class `c`, turning attribute channel `c·k + r` into a
//! binary region, erasing that region and clearing the matching label bit.
//! After `k` rounds each image has up to `k` masks covering different parts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attrnet::{fit, AttrNet, AttrNetConfig, AttributeFeatureMaps};
use crate::dataset::LabeledImage;
use crate::engine::{Sgd, SgdConfig};
use crate::error::{Error, Result};
use crate::image::{bilinear_resize, BBox, Image, Mask};

/// Length-`kC` label; bits `c·k ..= c·k + k − 1` belong to class `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHotLabel {
    k: usize,
    c: usize,
    bits: Vec<f64>,
}

impl MultiHotLabel {
    pub fn from_values(k: usize, c: usize, bits: Vec<f64>) -> Result<Self> {
        if bits.len() != k * c {
            return Err(Error::shape("MultiHotLabel", "length", k * c, bits.len()));
        }
        if let Some(i) = bits.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!("label entry {i} outside [0,1]")));
        }
        Ok(MultiHotLabel { k, c, bits })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }

    pub fn bits(&self) -> &[f64] {
        &self.bits
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.bits
    }

    pub fn sum(&self) -> f64 {
        self.bits.iter().sum()
    }

    pub fn index(&self, class: usize, attribute: usize) -> usize {
        class * self.k + attribute
    }

    pub fn is_set(&self, class: usize, attribute: usize) -> bool {
        self.bits[self.index(class, attribute)] != 0.0
    }

    /// Clears the bit of `attribute` in `class`'s block.
    pub fn clear(&mut self, class: usize, attribute: usize) -> Result<()> {
        if class >= self.c {
            return Err(Error::OutOfRange {
                what: "class",
                value: class,
                limit: self.c,
            });
        }
        if attribute >= self.k {
            return Err(Error::OutOfRange {
                what: "attribute",
                value: attribute,
                limit: self.k,
            });
        }
        let i = self.index(class, attribute);
        self.bits[i] = 0.0;
        Ok(())
    }

    pub fn set_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0.0).count()
    }
}

/// One-hot class `class` expanded to `k` active bits in its block.
pub fn expand_label(class: usize, num_classes: usize, k: usize) -> Result<MultiHotLabel> {
    if class >= num_classes {
        return Err(Error::OutOfRange {
            what: "class",
            value: class,
            limit: num_classes,
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let mut bits = vec![0.0; k * num_classes];
    bits[class * k..(class + 1) * k].fill(1.0);
    Ok(MultiHotLabel {
        k,
        c: num_classes,
        bits,
    })
}

/// A mined attribute region of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeMask {
    pub mask: Mask,
    pub class_index: usize,
    pub attribute_index: usize,
    pub bbox: BBox,
}

impl AttributeMask {
    pub fn new(mask: Mask, class_index: usize, attribute_index: usize) -> Result<Self> {
        let bbox = mask.bbox().ok_or(Error::EmptyMask)?;
        Ok(AttributeMask {
            mask,
            class_index,
            attribute_index,
            bbox,
        })
    }
}

/// Upsamples attribute channel `channel` to `height × width` (bilinear) and
/// keeps pixels at or above `threshold_fraction` of the upsampled maximum.
pub fn extract_mask(
    maps: &AttributeFeatureMaps,
    channel: usize,
    threshold_fraction: f64,
    height: usize,
    width: usize,
) -> Result<AttributeMask> {
    if channel >= maps.channels {
        return Err(Error::OutOfRange {
            what: "channel",
            value: channel,
            limit: maps.channels,
        });
    }
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold fraction must lie in (0,1), got {threshold_fraction}"
        )));
    }
    let plane = maps.plane(channel);
    if !plane.iter().any(|&v| v > 0.0) {
        return Err(Error::EmptyAttention { channel });
    }
    let up = bilinear_resize(plane, maps.height, maps.width, height, width);
    let max = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::EmptyAttention { channel });
    }
    let cut = threshold_fraction * max;
    let mask = Mask::from_bits(height, width, up.iter().map(|&v| v >= cut).collect())?;
    let k = maps.attributes_per_class.max(1);
    AttributeMask::new(mask, channel / k, channel % k)
}

/// Replaces masked pixels with `fill` (one value per channel).
pub fn erase(image: &Image, mask: &Mask, fill: &[f64]) -> Result<Image> {
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(Error::shape(
            "erase",
            "mask size",
            format!("{}x{}", image.height(), image.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    if fill.len() != image.channels() {
        return Err(Error::shape("erase", "fill channels", image.channels(), fill.len()));
    }
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(y, x) {
                for (c, &v) in fill.iter().enumerate() {
                    out.set(c, y, x, v);
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel mean over a set of images.
pub fn dataset_mean(images: &[&Image]) -> Vec<f64> {
    let Some(first) = images.first() else {
        return vec![0.5; 3];
    };
    let mut sums = vec![0.0; first.channels()];
    for img in images {
        for (s, m) in sums.iter_mut().zip(img.channel_means()) {
            *s += m;
        }
    }
    sums.into_iter().map(|s| s / images.len() as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EraseFill {
    DatasetMean,
    Constant(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSelection {
    /// Round `r` uses channel `c·k + r`.
    Sequential,
    /// Round `r` uses the still-labeled attribute channel of class `c` with
    /// the largest logit.
    MaxActivation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningSchedule {
    /// Epochs of the first round, trained from scratch.
    pub first_round_epochs: usize,
    /// Fine-tuning epochs of every later round.
    pub round_epochs: usize,
    pub batch_size: usize,
    pub threshold_fraction: f64,
    pub fill: EraseFill,
    pub channel_selection: ChannelSelection,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for MiningSchedule {
    fn default() -> Self {
        MiningSchedule {
            first_round_epochs: 20,
            round_epochs: 10,
            batch_size: 16,
            threshold_fraction: 0.5,
            fill: EraseFill::DatasetMean,
            channel_selection: ChannelSelection::Sequential,
            sgd: SgdConfig {
                learning_rate: 0.02,
                step_decay_interval: 1000,
                ..SgdConfig::default()
            },
            seed: 0,
        }
    }
}

/// Per-image mining progress.
#[derive(Clone, Debug)]
pub struct MiningState {
    pub round: usize,
    pub image: Image,
    pub label: MultiHotLabel,
    pub masks: Vec<Option<AttributeMask>>,
}

pub struct MiningOutcome {
    /// `masks[n][r]`: round-`r` mask of image `n`, `None` when skipped.
    pub masks: Vec<Vec<Option<AttributeMask>>>,
    pub states: Vec<MiningState>,
    pub model: AttrNet,
    pub skipped: usize,
    pub round_losses: Vec<Vec<f64>>,
}

/// Runs the k-round train / extract / erase / clear loop.
pub fn mine_attributes(
    train_set: &[LabeledImage],
    config: &AttrNetConfig,
    schedule: &MiningSchedule,
) -> Result<MiningOutcome> {
    let k = config.attributes_per_class;
    let c = config.num_classes;
    let fill = match &schedule.fill {
        EraseFill::DatasetMean => dataset_mean(&train_set.iter().map(|s| &s.image).collect::<Vec<_>>()),
        EraseFill::Constant(v) => v.clone(),
    };
    let mut states: Vec<MiningState> = train_set
        .iter()
        .map(|s| {
            Ok(MiningState {
                round: 0,
                image: s.image.clone(),
                label: expand_label(s.class, c, k)?,
                masks: Vec::with_capacity(k),
            })
        })
        .collect::<Result<_>>()?;
    let mut model = AttrNet::new(config.clone(), schedule.seed)?;
    let mut opt = Sgd::new(schedule.sgd.clone())?;
    let mut skipped = 0;
    let mut round_losses = Vec::new();
    let mut epoch = 0;
    for round in 0..k {
        let epochs = if round == 0 {
            schedule.first_round_epochs
        } else {
            schedule.round_epochs
        };
        let data: Vec<(Image, Vec<f64>)> = states
            .iter()
            .map(|s| (s.image.clone(), s.label.bits().to_vec()))
            .collect();
        let losses = fit(
            &mut model,
            &mut opt,
            &data,
            epoch..epoch + epochs,
            schedule.batch_size,
            schedule.seed,
        )?;
        epoch += epochs;
        info!(
            "mining round {}/{}: final loss {:.4}",
            round + 1,
            k,
            losses.last().copied().unwrap_or(f64::NAN)
        );
        round_losses.push(losses);

        let model_ref = &model;
        let results: Vec<Result<(Option<AttributeMask>, usize)>> = states
            .par_iter()
            .zip(train_set)
            .map(|(state, sample)| {
                let (z, maps) = model_ref.forward_one(&state.image)?;
                let attribute = match schedule.channel_selection {
                    ChannelSelection::Sequential => round,
                    ChannelSelection::MaxActivation => (0..k)
                        .filter(|&i| state.label.is_set(sample.class, i))
                        .max_by(|&a, &b| {
                            z.z[sample.class * k + a]
                                .total_cmp(&z.z[sample.class * k + b])
                                .then(b.cmp(&a))
                        })
                        .unwrap_or(round),
                };
                let channel = sample.class * k + attribute;
                match extract_mask(
                    &maps,
                    channel,
                    schedule.threshold_fraction,
                    state.image.height(),
                    state.image.width(),
                ) {
                    Ok(m) => Ok((Some(m), attribute)),
                    Err(Error::EmptyAttention { .. }) => Ok((None, attribute)),
                    Err(e) => Err(e),
                }
            })
            .collect();
        for ((state, sample), res) in states.iter_mut().zip(train_set).zip(results) {
            let (mask, attribute) = res?;
            match &mask {
                Some(m) => state.image = erase(&state.image, &m.mask, &fill)?,
                None => {
                    skipped += 1;
                    warn!("{}: empty attention in round {}, skipping", sample.id, round + 1);
                }
            }
            state.label.clear(sample.class, attribute)?;
            state.masks.push(mask);
            state.round = round + 1;
        }
        debug!("round {} done, {} skipped so far", round + 1, skipped);
    }
    let masks = states.iter().map(|s| s.masks.clone()).collect();
    Ok(MiningOutcome {
        masks,
        states,
        model,
        skipped,
        round_losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub attribute: usize,
    pub path: Option<String>,
    pub bbox: Option<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskIndexEntry {
    pub class: usize,
    pub masks: Vec<MaskRecord>,
}

/// JSON index of the on-disk mask store.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskIndex {
    pub attributes_per_class: usize,
    pub images: BTreeMap<String, MaskIndexEntry>,
}

/// Mask store: `<dir>/<image_id>.attr<i>.png` (1-bit) plus `<dir>/index.json`.
pub struct MaskStore {
    dir: PathBuf,
}

impl MaskStore {
    pub const INDEX: &'static str = "index.json";

    pub fn new(dir: impl Into<PathBuf>) -> Self {
        MaskStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn mask_file(image_id: &str, attribute: usize) -> String {
        format!("{image_id}.attr{attribute}.png")
    }

    pub fn save(&self, k: usize, samples: &[LabeledImage], masks: &[Vec<Option<AttributeMask>>]) -> Result<MaskIndex> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut index = MaskIndex {
            attributes_per_class: k,
            images: BTreeMap::new(),
        };
        for (sample, per_image) in samples.iter().zip(masks) {
            let mut records = Vec::new();
            for (round, m) in per_image.iter().enumerate() {
                let record = match m {
                    Some(m) => {
                        let file = Self::mask_file(&sample.id, m.attribute_index);
                        m.mask.save_png(&self.dir.join(&file))?;
                        MaskRecord {
                            attribute: m.attribute_index,
                            path: Some(file),
                            bbox: Some(m.bbox),
                        }
                    }
                    None => MaskRecord {
                        attribute: round,
                        path: None,
                        bbox: None,
                    },
                };
                records.push(record);
            }
            index.images.insert(
                sample.id.clone(),
                MaskIndexEntry {
                    class: sample.class,
                    masks: records,
                },
            );
        }
        let path = self.dir.join(Self::INDEX);
        std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
        Ok(index)
    }

    pub fn index(&self) -> Result<MaskIndex> {
        let path = self.dir.join(Self::INDEX);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Masks of one image ordered by attribute index; `None` where mining
    /// skipped the attribute.
    pub fn load_image_masks(&self, index: &MaskIndex, image_id: &str) -> Result<Vec<Option<AttributeMask>>> {
        let entry = index
            .images
            .get(image_id)
            .ok_or_else(|| Error::Config(format!("mask store has no entry for {image_id}")))?;
        let mut out = vec![None; index.attributes_per_class];
        for rec in &entry.masks {
            if let Some(p) = &rec.path {
                let mask = Mask::load_png(&self.dir.join(p))?;
                if rec.attribute < out.len() {
                    out[rec.attribute] = Some(AttributeMask::new(mask, entry.class, rec.attribute)?);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(plane: Vec<f64>, h: usize, w: usize) -> AttributeFeatureMaps {
        AttributeFeatureMaps {
            attributes_per_class: 1,
            channels: 1,
            height: h,
            width: w,
            data: plane,
        }
    }

    #[test]
    fn expand_places_block() {
        let l = expand_label(2, 4, 3).unwrap();
        let expected: Vec<f64> = (0..12).map(|i| if (6..9).contains(&i) { 1.0 } else { 0.0 }).collect();
        assert_eq!(l.bits(), expected.as_slice());
        assert_eq!(expand_label(0, 1, 1).unwrap().bits(), &[1.0]);
        assert!(expand_label(4, 4, 3).is_err());
    }

    #[test]
    fn expand_exhaustive() {
        for c_total in 1..=10 {
            for k in 1..=4 {
                for c in 0..c_total {
                    let l = expand_label(c, c_total, k).unwrap();
                    assert_eq!(l.sum(), k as f64);
                    let set: Vec<usize> = (0..k * c_total).filter(|&i| l.bits()[i] == 1.0).collect();
                    assert_eq!(set, (c * k..(c + 1) * k).collect::<Vec<_>>());
                }
            }
        }
    }

    #[test]
    fn clearing_never_leaves_range() {
        let mut l = expand_label(1, 3, 3).unwrap();
        for a in [2, 0, 0, 1] {
            l.clear(1, a).unwrap();
            assert!(l.bits().iter().all(|&b| (0.0..=1.0).contains(&b)));
        }
        assert_eq!(l.sum(), 0.0);
        assert!(l.clear(3, 0).is_err());
    }

    #[test]
    fn mask_at_half_max() {
        let m = extract_mask(&maps(vec![0.1, 0.9, 0.2, 0.8], 2, 2), 0, 0.5, 2, 2).unwrap();
        assert_eq!(m.mask.bits(), &[false, true, false, true]);
        assert_eq!(
            m.bbox,
            BBox {
                top: 0,
                left: 1,
                bottom: 1,
                right: 1
            }
        );
    }

    #[test]
    fn constant_plane_is_full_mask() {
        let m = extract_mask(&maps(vec![0.4; 9], 3, 3), 0, 0.5, 12, 12).unwrap();
        assert_eq!(m.mask.count(), 144);
    }

    #[test]
    fn nonpositive_plane_is_empty_attention() {
        let r = extract_mask(&maps(vec![0.0, -1.0, -0.5, 0.0], 2, 2), 0, 0.5, 4, 4);
        assert!(matches!(r, Err(Error::EmptyAttention { channel: 0 })));
    }

    #[test]
    fn erase_identity_and_full() {
        let img = Image::new(2, 2, 3, (0..12).map(|v| v as f64 / 12.0).collect()).unwrap();
        assert_eq!(erase(&img, &Mask::empty(2, 2), &[0.0; 3]).unwrap(), img);
        let z = erase(&img, &Mask::full(2, 2), &[0.0; 3]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(erase(&img, &Mask::empty(3, 2), &[0.0; 3]).is_err());
    }

    #[test]
    fn mask_store_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let store = MaskStore::new(dir.path().join("masks"));
        let mut m = Mask::empty(6, 6);
        m.set(2, 2, true);
        m.set(3, 4, true);
        let am = AttributeMask::new(m, 1, 0).unwrap();
        let samples = vec![LabeledImage {
            id: "img7".into(),
            class: 1,
            image: Image::filled(6, 6, [0.0; 3]),
        }];
        store.save(2, &samples, &[vec![Some(am.clone()), None]]).unwrap();
        assert!(dir.path().join("masks/img7.attr0.png").exists());
        let index = store.index().unwrap();
        let back = store.load_image_masks(&index, "img7").unwrap();
        assert_eq!(back, vec![Some(am), None]);
    }
}
