//! Synthetic fine-grained dataset.
//!
//! Every image holds the same `k` parts at jittered fixed positions; classes
//! differ only in which palette entry (colour plus texture) each part wears.
//! Class `c` is written in base `appearances`, digit `p` choosing part `p`'s
//! appearance, so any two classes differ in at least one part. Small clutter
//! squares in part colours are scattered over the background so a global
//! colour histogram is not enough to read the class.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, ManifestEntry, PartBox, Provenance, Split};
use crate::error::{Error, Result};
use crate::image::{BBox, Image, Mask};
use crate::rng;

/// Per-part appearance colours.
const PALETTE: [[[f64; 3]; 4]; 4] = [
    [[0.85, 0.25, 0.20], [0.20, 0.35, 0.85], [0.90, 0.75, 0.20], [0.30, 0.75, 0.30]],
    [[0.25, 0.70, 0.70], [0.85, 0.50, 0.15], [0.60, 0.30, 0.75], [0.90, 0.90, 0.90]],
    [[0.75, 0.20, 0.55], [0.45, 0.75, 0.20], [0.15, 0.20, 0.50], [0.60, 0.45, 0.30]],
    [[0.95, 0.55, 0.65], [0.10, 0.55, 0.35], [0.50, 0.50, 0.10], [0.35, 0.15, 0.15]],
];

/// Part centres on a 64-px canvas and nominal (height, width).
fn layout(parts: usize) -> &'static [((f64, f64), (f64, f64))] {
    match parts {
        1 => &[((32.0, 32.0), (16.0, 16.0))],
        2 => &[((32.0, 16.0), (16.0, 14.0)), ((32.0, 48.0), (12.0, 18.0))],
        3 => &[
            ((16.0, 32.0), (12.0, 14.0)),
            ((45.0, 16.0), (14.0, 18.0)),
            ((45.0, 48.0), (17.0, 11.0)),
        ],
        _ => &[
            ((16.0, 16.0), (12.0, 14.0)),
            ((16.0, 48.0), (14.0, 12.0)),
            ((48.0, 16.0), (12.0, 16.0)),
            ((48.0, 48.0), (16.0, 12.0)),
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub parts: usize,
    pub side: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// In-domain images written without a class (the unlabeled pool).
    pub unlabeled_per_class: usize,
    /// Distinct appearances per part.
    pub appearances: usize,
    /// Part-centre jitter in pixels at 64 px.
    pub position_jitter: f64,
    /// Relative part-size jitter.
    pub scale_jitter: f64,
    /// Per-channel colour jitter of each part.
    pub color_jitter: f64,
    pub pixel_noise: f64,
    pub clutter: usize,
    /// Fraction of the unlabeled pool replaced by out-of-domain images.
    pub noise_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_classes: 8,
            parts: 3,
            side: 64,
            train_per_class: 50,
            test_per_class: 30,
            unlabeled_per_class: 0,
            appearances: 2,
            position_jitter: 4.0,
            scale_jitter: 0.15,
            color_jitter: 0.05,
            pixel_noise: 0.04,
            clutter: 4,
            noise_fraction: 0.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.parts) {
            return Err(Error::Config(format!("parts must lie in 1..=4, got {}", self.parts)));
        }
        if !(2..=4).contains(&self.appearances) {
            return Err(Error::Config(format!("appearances must lie in 2..=4, got {}", self.appearances)));
        }
        let available = (self.appearances as u128).saturating_pow(self.parts as u32);
        if self.num_classes == 0 || self.num_classes as u128 > available {
            return Err(Error::PaletteTooSmall {
                palette: self.appearances,
                parts: self.parts,
                classes: self.num_classes,
            });
        }
        if self.side < 32 {
            return Err(Error::Config(format!("side must be at least 32, got {}", self.side)));
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return Err(Error::Config(format!("noise_fraction must lie in [0,1), got {}", self.noise_fraction)));
        }
        if self.position_jitter < 0.0 || !(0.0..0.4).contains(&self.scale_jitter) {
            return Err(Error::Config("jitter out of range".into()));
        }
        Ok(())
    }

    /// Appearance index of each part for `class`.
    pub fn code(&self, class: usize) -> Vec<usize> {
        let mut rest = class;
        (0..self.parts)
            .map(|_| {
                let d = rest % self.appearances;
                rest /= self.appearances;
                d
            })
            .collect()
    }

    pub fn part_color(&self, part: usize, appearance: usize) -> [f64; 3] {
        PALETTE[part % PALETTE.len()][appearance]
    }

    pub fn noise_count(&self) -> usize {
        let in_domain = (self.unlabeled_per_class * self.num_classes) as f64;
        (in_domain * self.noise_fraction / (1.0 - self.noise_fraction)).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub split: Split,
    /// `None` for noise images; unlabeled in-domain images keep their class
    /// here for evaluation but it is not written to the manifest.
    pub class: Option<usize>,
    pub image: Image,
    pub boxes: Vec<PartBox>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
    pub unlabeled: Vec<SynthSample>,
}

impl SynthDataset {
    pub fn all(&self) -> impl Iterator<Item = &SynthSample> {
        self.train.iter().chain(&self.test).chain(&self.unlabeled)
    }
}

/// Ground truth of one image, as written to `ground_truth.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: String,
    pub class: Option<usize>,
    pub boxes: Vec<PartBox>,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn background(side: usize, rng: &mut ChaCha8Rng) -> Image {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.55));
    let tilt: [f64; 2] = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
    let mut img = Image::filled(side, side, base);
    let s = side as f64;
    for y in 0..side {
        for x in 0..side {
            let shade = tilt[0] * (y as f64 / s - 0.5) + tilt[1] * (x as f64 / s - 0.5);
            let p = img.pixel(y, x);
            img.set_pixel(y, x, [p[0] + shade, p[1] + shade, p[2] + shade]);
        }
    }
    img
}

fn add_noise(img: &mut Image, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma is positive");
        for v in img.data_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in img.data_mut() {
        *v = quantize(*v);
    }
}

fn paint_box(img: &mut Image, b: &BBox, color: [f64; 3]) {
    for y in b.top..=b.bottom {
        for x in b.left..=b.right {
            img.set_pixel(y, x, color);
        }
    }
}

/// Texture overlay: appearance parity picks stripes or a dot lattice.
fn textured(appearance: usize, y: usize, x: usize) -> bool {
    if appearance % 2 == 0 {
        y % 5 == 2
    } else {
        y % 3 == 1 && x % 3 == 1
    }
}

fn render_parts(config: &GeneratorConfig, code: &[usize], img: &mut Image, rng: &mut ChaCha8Rng) -> Vec<PartBox> {
    let scale = config.side as f64 / 64.0;
    let jitter = config.position_jitter * scale;
    let mut boxes = Vec::with_capacity(config.parts);
    for (part, &((cy, cx), (h, w))) in layout(config.parts).iter().enumerate() {
        let cy = cy * scale + rng.gen_range(-jitter..=jitter);
        let cx = cx * scale + rng.gen_range(-jitter..=jitter);
        let s = 1.0 + rng.gen_range(-config.scale_jitter..=config.scale_jitter);
        let ph = ((h * scale * s).round() as usize).max(3);
        let pw = ((w * scale * s).round() as usize).max(3);
        let top = (cy - ph as f64 / 2.0).round().clamp(0.0, (config.side - ph) as f64) as usize;
        let left = (cx - pw as f64 / 2.0).round().clamp(0.0, (config.side - pw) as f64) as usize;
        let bbox = BBox { top, left, bottom: top + ph - 1, right: left + pw - 1 };
        let appearance = code[part];
        let base = config.part_color(part, appearance);
        let j = config.color_jitter;
        let color: [f64; 3] = std::array::from_fn(|c| base[c] + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 });
        let dark = color.map(|v| v * 0.55);
        for y in bbox.top..=bbox.bottom {
            for x in bbox.left..=bbox.right {
                let interior = y > bbox.top && y < bbox.bottom && x > bbox.left && x < bbox.right;
                let c = if interior && textured(appearance, y - bbox.top, x - bbox.left) { dark } else { color };
                img.set_pixel(y, x, c);
            }
        }
        boxes.push(PartBox { part, bbox });
    }
    boxes
}

fn render_clutter(config: &GeneratorConfig, boxes: &[PartBox], img: &mut Image, rng: &mut ChaCha8Rng) {
    let side = config.side;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < config.clutter && attempts < 50 * config.clutter.max(1) {
        attempts += 1;
        let s = rng.gen_range(3..=5usize);
        let top = rng.gen_range(0..=side - s);
        let left = rng.gen_range(0..=side - s);
        let b = BBox { top, left, bottom: top + s - 1, right: left + s - 1 };
        let halo = BBox {
            top: top.saturating_sub(2),
            left: left.saturating_sub(2),
            bottom: (b.bottom + 2).min(side - 1),
            right: (b.right + 2).min(side - 1),
        };
        if boxes.iter().any(|p| p.bbox.intersection_area(&halo) > 0) {
            continue;
        }
        let part = rng.gen_range(0..config.parts);
        let color = config.part_color(part, rng.gen_range(0..config.appearances));
        paint_box(img, &b, color);
        placed += 1;
    }
}

fn render_in_domain(config: &GeneratorConfig, class: usize, rng: &mut ChaCha8Rng) -> (Image, Vec<PartBox>) {
    let mut img = background(config.side, rng);
    let boxes = render_parts(config, &config.code(class), &mut img, rng);
    render_clutter(config, &boxes, &mut img, rng);
    add_noise(&mut img, config.pixel_noise, rng);
    (img, boxes)
}

/// Out-of-domain image: random ellipses of arbitrary colour, no part layout.
pub fn render_noise(side: usize, pixel_noise: f64, rng: &mut ChaCha8Rng) -> Image {
    let mut img = background(side, rng);
    let blobs = rng.gen_range(3..=8);
    for _ in 0..blobs {
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let cy = rng.gen_range(0.0..side as f64);
        let cx = rng.gen_range(0.0..side as f64);
        let ry = rng.gen_range(3.0..side as f64 / 4.0);
        let rx = rng.gen_range(3.0..side as f64 / 4.0);
        for y in 0..side {
            for x in 0..side {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    img.set_pixel(y, x, color);
                }
            }
        }
    }
    add_noise(&mut img, pixel_noise, rng);
    img
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
        Split::Unlabeled => "unlabeled",
    }
}

fn render_split(config: &GeneratorConfig, split: Split, per_class: usize) -> Vec<SynthSample> {
    let name = split_name(split);
    (0..per_class * config.num_classes)
        .into_par_iter()
        .map(|i| {
            // Interleaved classes keep every prefix of the split balanced.
            let class = i % config.num_classes;
            let mut rng = rng::stream(config.seed, name, i as u64);
            let (image, boxes) = render_in_domain(config, class, &mut rng);
            SynthSample {
                id: format!("{name}_{i:05}"),
                split,
                class: Some(class),
                image,
                boxes,
                provenance: Provenance::InDomain,
            }
        })
        .collect()
}

/// Out-of-domain images tagged [`Provenance::Noise`].
pub fn generate_noise_pool(config: &GeneratorConfig, n: usize) -> Vec<SynthSample> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(config.seed, "noise", i as u64);
            SynthSample {
                id: format!("noise_{i:05}"),
                split: Split::Unlabeled,
                class: None,
                image: render_noise(config.side, config.pixel_noise, &mut rng),
                boxes: Vec::new(),
                provenance: Provenance::Noise,
            }
        })
        .collect()
}

/// Renders the whole dataset in memory.
pub fn render(config: &GeneratorConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut unlabeled = render_split(config, Split::Unlabeled, config.unlabeled_per_class);
    unlabeled.extend(generate_noise_pool(config, config.noise_count()));
    Ok(SynthDataset {
        train: render_split(config, Split::Train, config.train_per_class),
        test: render_split(config, Split::Test, config.test_per_class),
        unlabeled,
    })
}

/// Writes `images/*.png`, `manifest.jsonl` and `ground_truth.json` under
/// `dir` and returns the in-memory dataset.
pub fn generate(config: &GeneratorConfig, dir: &Path) -> Result<SynthDataset> {
    let data = render(config)?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let samples: Vec<&SynthSample> = data.all().collect();
    samples
        .par_iter()
        .map(|s| s.image.save_png(&images.join(format!("{}.png", s.id))))
        .collect::<Result<()>>()?;
    let entries: Vec<ManifestEntry> = samples
        .iter()
        .map(|s| ManifestEntry {
            id: s.id.clone(),
            path: format!("images/{}.png", s.id),
            split: s.split,
            class: if s.split == Split::Unlabeled { None } else { s.class },
            boxes: (!s.boxes.is_empty()).then(|| s.boxes.clone()),
            provenance: s.provenance,
        })
        .collect();
    write_manifest(&dir.join("manifest.jsonl"), &entries)?;
    let truth: Vec<GroundTruth> = samples
        .iter()
        .map(|s| GroundTruth {
            id: s.id.clone(),
            class: s.class,
            boxes: s.boxes.clone(),
        })
        .collect();
    let path = dir.join("ground_truth.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&truth)?).map_err(|e| Error::io(&path, e))?;
    let echo = dir.join("generator.json");
    std::fs::write(&echo, serde_json::to_vec_pretty(config)?).map_err(|e| Error::io(&echo, e))?;
    Ok(data)
}

/// Pixels within `tolerance` (L∞) of `color` inside `bbox`.
pub fn color_fraction(img: &Image, bbox: &BBox, color: [f64; 3], tolerance: f64) -> f64 {
    let mut hits = 0;
    for y in bbox.top..=bbox.bottom {
        for x in bbox.left..=bbox.right {
            let p = img.pixel(y, x);
            if (0..3).all(|c| (p[c] - color[c]).abs() <= tolerance) {
                hits += 1;
            }
        }
    }
    hits as f64 / bbox.area() as f64
}

/// Mask of the pixels that belong to any part.
pub fn part_mask(sample: &SynthSample, side: usize) -> Mask {
    let mut m = Mask::empty(side, side);
    for b in &sample.boxes {
        for y in b.bbox.top..=b.bbox.bottom {
            for x in b.bbox.left..=b.bbox.right {
                m.set(y, x, true);
            }
        }
    }
    m
}

/// Best one-to-one assignment of mined masks to ground-truth parts. Returns
/// the number of masks matched to a distinct part with IoU above
/// `min_iou`, maximised over assignments.
pub fn matched_parts(masks: &[Option<Mask>], boxes: &[PartBox], min_iou: f64) -> usize {
    fn search(i: usize, masks: &[Option<Mask>], boxes: &[PartBox], used: &mut Vec<bool>, min_iou: f64) -> usize {
        if i == masks.len() {
            return 0;
        }
        let mut best = search(i + 1, masks, boxes, used, min_iou);
        if let Some(m) = &masks[i] {
            for j in 0..boxes.len() {
                if !used[j] && m.iou_with_box(&boxes[j].bbox) > min_iou {
                    used[j] = true;
                    best = best.max(1 + search(i + 1, masks, boxes, used, min_iou));
                    used[j] = false;
                }
            }
        }
        best
    }
    search(0, masks, boxes, &mut vec![false; boxes.len()], min_iou)
}
