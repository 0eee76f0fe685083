//! Sample synthesis.
//!
//! Attribute Mix blends one attribute region of `x_b` into `x_a`:
//!
//! ```text
//! x̃ = (1 − M̃)⊙x_a + λ·M̃⊙x_a + (1 − λ)·M̃⊙x_b
//! ỹ = λ·y_a + (1 − λ)·y_b
//! ```
//!
//! where `M̃` is `x_b`'s attribute mask translated so that its box centre
//! matches the centre of `x_a`'s mask for the same attribute. Mixup and
//! CutMix are provided as baselines.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::attributes::AttributeMask;
use crate::error::{Error, Result};
use crate::image::{BBox, Image, Mask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    /// γ(t) = 0: every sampled λ is accepted.
    None,
    /// γ(t) = (1 − cos(π·t/T))/2.
    #[default]
    Cosine,
}

/// How `x_b` is placed relative to the aligned mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// `x_b` is translated together with its mask, so the pixels blended in
    /// are `x_b`'s own attribute region.
    #[default]
    TranslateContent,
    /// `x_b` is read at the aligned mask's coordinates without translation.
    InPlace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub alpha: f64,
    pub decay: Decay,
    pub total_epochs: usize,
    pub seed: u64,
    /// Mix attribute `j` of `x_b` into attribute `j` of `x_a`; when false
    /// the two indices are drawn independently.
    #[serde(default = "yes")]
    pub shared_attribute: bool,
    #[serde(default)]
    pub transfer: TransferMode,
}

fn yes() -> bool {
    true
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            alpha: 1.0,
            decay: Decay::Cosine,
            total_epochs: 120,
            seed: 0,
            shared_attribute: true,
            transfer: TransferMode::TranslateContent,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> MixSchedule {
        MixSchedule {
            decay: self.decay,
            total_epochs: self.total_epochs,
        }
    }
}

/// Time-decay gate threshold γ(t).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixSchedule {
    pub decay: Decay,
    pub total_epochs: usize,
}

impl MixSchedule {
    pub fn gamma(&self, epoch: f64) -> f64 {
        match self.decay {
            Decay::None => 0.0,
            Decay::Cosine => {
                if self.total_epochs == 0 {
                    return 1.0;
                }
                let t = (epoch / self.total_epochs as f64).clamp(0.0, 1.0);
                (1.0 - (std::f64::consts::PI * t).cos()) / 2.0
            }
        }
    }
}

/// Accepts a mix iff `λ ≥ γ(t)`.
pub fn gate(lambda: f64, epoch: f64, schedule: &MixSchedule) -> bool {
    lambda >= schedule.gamma(epoch)
}

/// λ ~ Beta(α, α).
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidArgument(format!("Beta({alpha},{alpha}): {e}")))?;
    Ok(beta.sample(rng))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixProvenance {
    pub a: String,
    pub b: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attribute: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample {
    pub image: Image,
    pub label: Vec<f64>,
    pub lambda: f64,
    pub provenance: MixProvenance,
}

/// Borrowed view of a labeled sample.
#[derive(Clone, Copy, Debug)]
pub struct MixInput<'a> {
    pub id: &'a str,
    pub image: &'a Image,
    pub label: &'a [f64],
}

fn check_pair(op: &'static str, a: &MixInput<'_>, b: &MixInput<'_>) -> Result<()> {
    if !a.image.same_size(b.image) {
        return Err(Error::shape(
            op,
            "image size",
            format!("{}x{}x{}", a.image.height(), a.image.width(), a.image.channels()),
            format!("{}x{}x{}", b.image.height(), b.image.width(), b.image.channels()),
        ));
    }
    if a.label.len() != b.label.len() {
        return Err(Error::shape(op, "label length", a.label.len(), b.label.len()));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0,1], got {lambda}")));
    }
    Ok(())
}

fn blend_labels(ya: &[f64], yb: &[f64], wa: f64) -> Vec<f64> {
    ya.iter().zip(yb).map(|(a, b)| wa * a + (1.0 - wa) * b).collect()
}

/// Offset (rows, cols) that moves `from`'s box centre onto `to`'s.
pub fn center_offset(from: &BBox, to: &BBox) -> (i64, i64) {
    let (fy, fx) = from.center();
    let (ty, tx) = to.center();
    (ty - fy, tx - fx)
}

/// Translates `mask_b` so its box centre coincides with `mask_a`'s, clipping
/// at the `height × width` border. The result may be empty.
pub fn align_mask(mask_b: &AttributeMask, mask_a: &AttributeMask, height: usize, width: usize) -> Result<Mask> {
    if mask_b.mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (dy, dx) = center_offset(&mask_b.bbox, &mask_a.bbox);
    Ok(translate_mask(&mask_b.mask, dy, dx, height, width))
}

pub fn translate_mask(mask: &Mask, dy: i64, dx: i64, height: usize, width: usize) -> Mask {
    let mut out = Mask::empty(height, width);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if !mask.get(y, x) {
                continue;
            }
            let (ty, tx) = (y as i64 + dy, x as i64 + dx);
            if ty >= 0 && tx >= 0 && (ty as usize) < height && (tx as usize) < width {
                out.set(ty as usize, tx as usize, true);
            }
        }
    }
    out
}

/// `image` shifted by (dy, dx); uncovered pixels repeat the nearest edge.
pub fn translate_image(image: &Image, dy: i64, dx: i64) -> Image {
    if dy == 0 && dx == 0 {
        return image.clone();
    }
    let (h, w) = (image.height() as i64, image.width() as i64);
    let mut out = image.clone();
    for c in 0..image.channels() {
        for y in 0..h {
            for x in 0..w {
                let sy = (y - dy).clamp(0, h - 1) as usize;
                let sx = (x - dx).clamp(0, w - 1) as usize;
                out.set(c, y as usize, x as usize, image.get(c, sy, sx));
            }
        }
    }
    out
}

/// Evaluates the Attribute Mix formula given an already aligned mask.
/// An empty mask is rejected so callers can fall back to the unmixed sample.
pub fn attribute_mix(
    a: MixInput<'_>,
    b: MixInput<'_>,
    aligned: &Mask,
    lambda: f64,
    attribute: Option<usize>,
) -> Result<MixedSample> {
    check_pair("attribute_mix", &a, &b)?;
    check_lambda(lambda)?;
    if aligned.height() != a.image.height() || aligned.width() != a.image.width() {
        return Err(Error::shape(
            "attribute_mix",
            "mask size",
            format!("{}x{}", a.image.height(), a.image.width()),
            format!("{}x{}", aligned.height(), aligned.width()),
        ));
    }
    if aligned.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut image = a.image.clone();
    let (h, w) = (a.image.height(), a.image.width());
    let keep = 1.0 - lambda;
    for c in 0..a.image.channels() {
        for y in 0..h {
            for x in 0..w {
                if aligned.get(y, x) {
                    let xa = a.image.get(c, y, x);
                    let xb = b.image.get(c, y, x);
                    image.set(c, y, x, 0.0 * xa + lambda * xa + keep * xb);
                }
            }
        }
    }
    Ok(MixedSample {
        image,
        label: blend_labels(a.label, b.label, lambda),
        lambda,
        provenance: MixProvenance {
            a: a.id.to_string(),
            b: b.id.to_string(),
            attribute,
        },
    })
}

/// Aligns `mask_b` onto `mask_a`, places `x_b` per `transfer`, and mixes.
/// Returns `Ok(None)` when the aligned mask is clipped away entirely.
pub fn attribute_mix_masks(
    a: MixInput<'_>,
    b: MixInput<'_>,
    mask_a: &AttributeMask,
    mask_b: &AttributeMask,
    lambda: f64,
    transfer: TransferMode,
) -> Result<Option<MixedSample>> {
    check_pair("attribute_mix", &a, &b)?;
    let (h, w) = (a.image.height(), a.image.width());
    let aligned = align_mask(mask_b, mask_a, h, w)?;
    if aligned.is_empty() {
        return Ok(None);
    }
    let shifted;
    let xb = match transfer {
        TransferMode::InPlace => b.image,
        TransferMode::TranslateContent => {
            let (dy, dx) = center_offset(&mask_b.bbox, &mask_a.bbox);
            shifted = translate_image(b.image, dy, dx);
            &shifted
        }
    };
    let b = MixInput { image: xb, ..b };
    attribute_mix(a, b, &aligned, lambda, Some(mask_a.attribute_index)).map(Some)
}

/// Whole-image convex blend.
pub fn mixup(a: MixInput<'_>, b: MixInput<'_>, lambda: f64) -> Result<MixedSample> {
    check_pair("mixup", &a, &b)?;
    check_lambda(lambda)?;
    let data = a
        .image
        .data()
        .iter()
        .zip(b.image.data())
        .map(|(xa, xb)| lambda * xa + (1.0 - lambda) * xb)
        .collect();
    Ok(MixedSample {
        image: Image::new(a.image.height(), a.image.width(), a.image.channels(), data)?,
        label: blend_labels(a.label, b.label, lambda),
        lambda,
        provenance: MixProvenance {
            a: a.id.to_string(),
            b: b.id.to_string(),
            attribute: None,
        },
    })
}

/// Box of area ratio `1 − λ` centred at (`cy`, `cx`), clipped to the image.
pub fn cutmix_box(height: usize, width: usize, lambda: f64, cy: usize, cx: usize) -> Option<BBox> {
    let ratio = (1.0 - lambda).max(0.0).sqrt();
    let ch = (height as f64 * ratio).floor() as i64;
    let cw = (width as f64 * ratio).floor() as i64;
    if ch == 0 || cw == 0 {
        return None;
    }
    let top = (cy as i64 - ch / 2).max(0);
    let left = (cx as i64 - cw / 2).max(0);
    let bottom = (cy as i64 - ch / 2 + ch - 1).min(height as i64 - 1);
    let right = (cx as i64 - cw / 2 + cw - 1).min(width as i64 - 1);
    if top > bottom || left > right {
        return None;
    }
    Some(BBox {
        top: top as usize,
        left: left as usize,
        bottom: bottom as usize,
        right: right as usize,
    })
}

/// CutMix with an explicit box centre; the label weight of `x_b` is the
/// pasted-area fraction.
pub fn cutmix_at(a: MixInput<'_>, b: MixInput<'_>, lambda: f64, cy: usize, cx: usize) -> Result<MixedSample> {
    check_pair("cutmix", &a, &b)?;
    check_lambda(lambda)?;
    let (h, w) = (a.image.height(), a.image.width());
    let mut image = a.image.clone();
    let mut pasted = 0usize;
    if let Some(bx) = cutmix_box(h, w, lambda, cy.min(h - 1), cx.min(w - 1)) {
        pasted = bx.area();
        for c in 0..a.image.channels() {
            for y in bx.top..=bx.bottom {
                for x in bx.left..=bx.right {
                    image.set(c, y, x, b.image.get(c, y, x));
                }
            }
        }
    }
    let weight_b = pasted as f64 / (h * w) as f64;
    Ok(MixedSample {
        image,
        label: blend_labels(a.label, b.label, 1.0 - weight_b),
        lambda: 1.0 - weight_b,
        provenance: MixProvenance {
            a: a.id.to_string(),
            b: b.id.to_string(),
            attribute: None,
        },
    })
}

/// CutMix with a uniformly placed box centre.
pub fn cutmix<R: Rng + ?Sized>(a: MixInput<'_>, b: MixInput<'_>, lambda: f64, rng: &mut R) -> Result<MixedSample> {
    let cy = rng.gen_range(0..a.image.height());
    let cx = rng.gen_range(0..a.image.width());
    cutmix_at(a, b, lambda, cy, cx)
}

/// Running counts of mixing decisions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixStats {
    pub attempted: usize,
    pub accepted: usize,
    pub gated: usize,
    pub fallback: usize,
}

impl MixStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempted as f64
        }
    }

    pub fn merge(&mut self, other: &MixStats) {
        self.attempted += other.attempted;
        self.accepted += other.accepted;
        self.gated += other.gated;
        self.fallback += other.fallback;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gray(h: usize, w: usize, v: &[f64]) -> Image {
        Image::new(h, w, 1, v.to_vec()).unwrap()
    }

    fn input<'a>(id: &'a str, image: &'a Image, label: &'a [f64]) -> MixInput<'a> {
        MixInput { id, image, label }
    }

    fn box_mask(h: usize, w: usize, b: BBox) -> AttributeMask {
        AttributeMask::new(Mask::from_box(h, w, b), 0, 0).unwrap()
    }

    #[test]
    fn two_by_two_formula() {
        let xa = gray(2, 2, &[1.0; 4]);
        let xb = gray(2, 2, &[0.0; 4]);
        let m = Mask::from_bits(2, 2, vec![true, false, false, false]).unwrap();
        let ya = [1.0, 0.0];
        let yb = [0.0, 1.0];
        let s = attribute_mix(input("a", &xa, &ya), input("b", &xb, &yb), &m, 0.25, None).unwrap();
        assert_eq!(s.image.data(), &[0.25, 1.0, 1.0, 1.0]);
        assert_eq!(s.label, vec![0.25, 0.75]);
    }

    #[test]
    fn lambda_endpoints() {
        let xa = gray(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let xb = gray(2, 2, &[0.9, 0.8, 0.7, 0.6]);
        let (ya, yb) = ([1.0, 0.0], [0.0, 1.0]);
        let any = Mask::from_bits(2, 2, vec![true, true, false, true]).unwrap();
        let s = attribute_mix(input("a", &xa, &ya), input("b", &xb, &yb), &any, 1.0, None).unwrap();
        assert_eq!((s.image, s.label), (xa.clone(), ya.to_vec()));
        let s = attribute_mix(input("a", &xa, &ya), input("b", &xb, &yb), &Mask::full(2, 2), 0.0, None).unwrap();
        assert_eq!((s.image, s.label), (xb.clone(), yb.to_vec()));
    }

    #[test]
    fn empty_aligned_mask_is_rejected() {
        let xa = gray(2, 2, &[0.0; 4]);
        let r = attribute_mix(input("a", &xa, &[1.0]), input("b", &xa, &[1.0]), &Mask::empty(2, 2), 0.5, None);
        assert!(matches!(r, Err(Error::EmptyMask)));
    }

    #[test]
    fn align_zero_translation() {
        let b = box_mask(20, 20, BBox { top: 2, left: 3, bottom: 6, right: 9 });
        let a = box_mask(20, 20, BBox { top: 2, left: 3, bottom: 6, right: 9 });
        assert_eq!(align_mask(&b, &a, 20, 20).unwrap(), b.mask);
    }

    #[test]
    fn align_shifts_every_pixel() {
        let mut mb = Mask::empty(40, 40);
        // Irregular blob with box centre (10, 10).
        for &(y, x) in &[(8, 8), (12, 12), (9, 11), (10, 10), (11, 8)] {
            mb.set(y, x, true);
        }
        let b = AttributeMask::new(mb.clone(), 0, 1).unwrap();
        assert_eq!(b.bbox.center(), (10, 10));
        let a = box_mask(40, 40, BBox { top: 18, left: 18, bottom: 22, right: 22 });
        let out = align_mask(&b, &a, 40, 40).unwrap();
        let mut expected = Mask::empty(40, 40);
        for y in 0..40 {
            for x in 0..40 {
                if mb.get(y, x) {
                    expected.set(y + 10, x + 10, true);
                }
            }
        }
        assert_eq!(out, expected);
    }

    #[test]
    fn align_off_image_is_empty() {
        let b = box_mask(100, 100, BBox { top: 0, left: 0, bottom: 3, right: 3 });
        let a = box_mask(100, 100, BBox { top: 90, left: 90, bottom: 99, right: 99 });
        // Target is smaller than the source frame, so the shifted pixels fall outside it.
        let out = align_mask(&b, &a, 20, 20).unwrap();
        assert!(out.is_empty());
        let xa = Image::filled(20, 20, [0.2; 3]);
        let r = attribute_mix(input("a", &xa, &[1.0]), input("b", &xa, &[1.0]), &out, 0.5, None);
        assert!(r.is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = MixSchedule { decay: Decay::Cosine, total_epochs: 100 };
        assert_eq!(s.gamma(0.0), 0.0);
        assert!((s.gamma(100.0) - 1.0).abs() < 1e-15);
        assert!((s.gamma(50.0) - 0.5).abs() < 1e-15);
        let mut prev = 0.0;
        for t in 0..=100 {
            let g = s.gamma(t as f64);
            assert!(g >= prev);
            prev = g;
        }
        assert!(gate(0.0, 0.0, &s));
        assert!(!gate(0.999_999, 100.0, &s));
        assert!(gate(1.0, 100.0, &s));
    }

    #[test]
    fn no_decay_accepts_everything() {
        let s = MixSchedule { decay: Decay::None, total_epochs: 10 };
        assert!(gate(0.0, 10.0, &s));
    }

    #[test]
    fn beta_variance_shrinks_with_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let var = |alpha: f64, rng: &mut ChaCha8Rng| {
            let xs: Vec<f64> = (0..20_000).map(|_| sample_lambda(alpha, rng).unwrap()).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
        };
        assert!(var(0.5, &mut rng) > var(2.0, &mut rng));
        assert!(sample_lambda(0.0, &mut rng).is_err());
    }

    #[test]
    fn mixup_constant_images() {
        let one = Image::filled(3, 3, [1.0; 3]);
        let zero = Image::filled(3, 3, [0.0; 3]);
        let s = mixup(input("a", &one, &[1.0, 0.0]), input("b", &zero, &[0.0, 1.0]), 0.5).unwrap();
        assert!(s.image.data().iter().all(|&v| v == 0.5));
        let s = mixup(input("a", &one, &[1.0, 0.0]), input("b", &zero, &[0.0, 1.0]), 1.0).unwrap();
        assert_eq!(s.image, one);
        assert!(mixup(input("a", &one, &[1.0]), input("b", &Image::filled(2, 3, [0.0; 3]), &[1.0]), 0.5).is_err());
    }

    #[test]
    fn cutmix_interior_box_weight() {
        let (h, w) = (32, 32);
        let xa = Image::filled(h, w, [1.0; 3]);
        let xb = Image::filled(h, w, [0.0; 3]);
        for &lambda in &[0.3, 0.5, 0.75, 0.9] {
            let s = cutmix_at(input("a", &xa, &[1.0, 0.0]), input("b", &xb, &[0.0, 1.0]), lambda, 16, 16).unwrap();
            let counted = s.image.plane(0).iter().filter(|&&v| v == 0.0).count() as f64 / (h * w) as f64;
            assert!((s.label[1] - counted).abs() < 1e-15);
            assert!((s.label[1] - (1.0 - lambda)).abs() <= 2.0 / 32.0);
        }
    }

    #[test]
    fn cutmix_clipped_box_weight_is_pixel_count() {
        let xa = Image::filled(20, 30, [1.0; 3]);
        let xb = Image::filled(20, 30, [0.0; 3]);
        let s = cutmix_at(input("a", &xa, &[1.0, 0.0]), input("b", &xb, &[0.0, 1.0]), 0.5, 0, 29).unwrap();
        let pasted = s.image.plane(0).iter().filter(|&&v| v == 0.0).count();
        assert!((s.label[1] - pasted as f64 / 600.0).abs() < 1e-15);
        assert!(s.label[1] < 0.5);
    }

    #[test]
    fn cutmix_near_one_recovers_a() {
        let xa = Image::filled(16, 16, [1.0; 3]);
        let xb = Image::filled(16, 16, [0.0; 3]);
        let s = cutmix_at(input("a", &xa, &[1.0, 0.0]), input("b", &xb, &[0.0, 1.0]), 0.999, 8, 8).unwrap();
        assert_eq!(s.image, xa);
        assert_eq!(s.label, vec![1.0, 0.0]);
    }
}
