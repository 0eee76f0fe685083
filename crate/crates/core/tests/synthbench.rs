use attribute_mix::dataset::{read_manifest, Provenance, Split};
use attribute_mix::image::{BBox, Image};
use attribute_mix::synthbench::{color_fraction, generate, generate_noise_pool, render, GeneratorConfig, SynthSample};

fn small() -> GeneratorConfig {
    GeneratorConfig { train_per_class: 3, test_per_class: 2, unlabeled_per_class: 2, noise_fraction: 0.2, ..Default::default() }
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&small(), a.path()).unwrap();
    generate(&small(), b.path()).unwrap();
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "manifest.jsonl"), read(b.path(), "manifest.jsonl"));
    assert_eq!(read(a.path(), "ground_truth.json"), read(b.path(), "ground_truth.json"));
    let mut n = 0;
    for entry in std::fs::read_dir(a.path().join("images")).unwrap() {
        let name = entry.unwrap().file_name();
        let rel = format!("images/{}", name.to_string_lossy());
        assert_eq!(read(a.path(), &rel), read(b.path(), &rel), "{rel}");
        n += 1;
    }
    assert_eq!(n, 8 * 3 + 8 * 2 + 8 * 2 + 4);

    let other = GeneratorConfig { seed: 1, ..small() };
    let c = tempfile::tempdir().unwrap();
    generate(&other, c.path()).unwrap();
    assert_ne!(read(a.path(), "images/train_00000.png"), read(c.path(), "images/train_00000.png"));
}

#[test]
fn manifest_roundtrip_hides_unlabeled_classes() {
    let dir = tempfile::tempdir().unwrap();
    generate(&small(), dir.path()).unwrap();
    let entries = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    for e in &entries {
        match e.split {
            Split::Unlabeled => assert!(e.class.is_none()),
            _ => assert!(e.class.is_some() && e.boxes.as_ref().map(Vec::len) == Some(3)),
        }
    }
    let noise = entries.iter().filter(|e| e.provenance == Provenance::Noise).count();
    assert_eq!(noise, 4);
}

#[test]
fn default_benchmark_shape() {
    let config = GeneratorConfig { test_per_class: 1, ..Default::default() };
    let data = render(&config).unwrap();
    assert_eq!(data.train.len(), 400);
    let mut per_class = [0usize; 8];
    for s in &data.train {
        per_class[s.class.unwrap()] += 1;
        assert_eq!(s.boxes.len(), 3);
        for (i, a) in s.boxes.iter().enumerate() {
            assert!(a.bbox.bottom < 64 && a.bbox.right < 64);
            for b in &s.boxes[i + 1..] {
                assert_eq!(a.bbox.intersection_area(&b.bbox), 0);
            }
        }
    }
    assert!(per_class.iter().all(|&n| n == 50));
    let ids: std::collections::BTreeSet<&str> = data.all().map(|s| s.id.as_str()).collect();
    assert_eq!(ids.len(), data.all().count(), "splits are disjoint");
}

#[test]
fn palette_separates_classes() {
    let config = GeneratorConfig::default();
    for a in 0..config.num_classes {
        for b in a + 1..config.num_classes {
            assert_ne!(config.code(a), config.code(b));
        }
    }
    let too_many = GeneratorConfig { num_classes: 9, ..Default::default() };
    assert!(render(&too_many).is_err());
}

/// Pixel-count oracle: the part's own palette colour, within 8-bit noise,
/// covers most of its box.
#[test]
fn dominant_colour_fills_each_part() {
    let config = GeneratorConfig { test_per_class: 1, ..Default::default() };
    let data = render(&config).unwrap();
    for s in &data.train {
        let code = config.code(s.class.unwrap());
        for b in &s.boxes {
            let base = config.part_color(b.part, code[b.part]);
            let frac = color_fraction(&s.image, &b.bbox, base, 0.2);
            assert!(frac >= 0.7, "{} part {}: {frac}", s.id, b.part);
        }
    }
}

#[test]
fn boxes_are_tight() {
    let config = GeneratorConfig { train_per_class: 5, test_per_class: 0, ..Default::default() };
    let data = render(&config).unwrap();
    for s in &data.train {
        let code = config.code(s.class.unwrap());
        for b in &s.boxes {
            let base = config.part_color(b.part, code[b.part]);
            let count = |bx: &BBox| (color_fraction(&s.image, bx, base, 0.2) * bx.area() as f64).round() as usize;
            let inner = BBox { top: b.bbox.top + 1, left: b.bbox.left + 1, bottom: b.bbox.bottom - 1, right: b.bbox.right - 1 };
            assert!(count(&inner) < count(&b.bbox));
        }
    }
}

fn part_means(s: &SynthSample) -> Vec<f64> {
    let mut out = Vec::new();
    let mut boxes = s.boxes.clone();
    boxes.sort_by_key(|b| b.part);
    for b in &boxes {
        let mut acc = [0.0; 3];
        for y in b.bbox.top..=b.bbox.bottom {
            for x in b.bbox.left..=b.bbox.right {
                let p = s.image.pixel(y, x);
                (0..3).for_each(|c| acc[c] += p[c]);
            }
        }
        out.extend(acc.map(|v| v / b.bbox.area() as f64));
    }
    out
}

#[test]
fn nearest_centroid_is_perfect() {
    let config = GeneratorConfig { test_per_class: 20, ..Default::default() };
    let data = render(&config).unwrap();
    let c = config.num_classes;
    let mut centroids = vec![vec![0.0; 9]; c];
    let mut counts = vec![0usize; c];
    for s in &data.train {
        let class = s.class.unwrap();
        part_means(s).iter().enumerate().for_each(|(i, v)| centroids[class][i] += v);
        counts[class] += 1;
    }
    for (cen, n) in centroids.iter_mut().zip(&counts) {
        cen.iter_mut().for_each(|v| *v /= *n as f64);
    }
    for s in &data.test {
        let f = part_means(s);
        let dist = |cen: &Vec<f64>| cen.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let pred = (0..c).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
        assert_eq!(pred, s.class.unwrap(), "{}", s.id);
    }
}

fn histogram(img: &Image) -> Vec<f64> {
    let bins = 4;
    let mut h = vec![0.0; bins * bins * bins];
    let n = (img.height() * img.width()) as f64;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.pixel(y, x).map(|v| ((v * bins as f64) as usize).min(bins - 1));
            h[(p[0] * bins + p[1]) * bins + p[2]] += 1.0 / n;
        }
    }
    h
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[test]
fn noise_pool_is_out_of_domain() {
    let config = GeneratorConfig { test_per_class: 0, train_per_class: 4, ..Default::default() };
    assert!(generate_noise_pool(&config, 0).is_empty());
    let noise = generate_noise_pool(&config, 24);
    assert!(noise.iter().all(|s| s.provenance == Provenance::Noise && s.class.is_none()));
    let data = render(&config).unwrap();
    let hin: Vec<Vec<f64>> = data.train.iter().map(|s| histogram(&s.image)).collect();
    let hno: Vec<Vec<f64>> = noise.iter().map(|s| histogram(&s.image)).collect();
    let mut within = (0.0, 0);
    for i in 0..hin.len() {
        for j in i + 1..hin.len() {
            within.0 += l1(&hin[i], &hin[j]);
            within.1 += 1;
        }
    }
    let mut across = (0.0, 0);
    for a in &hin {
        for b in &hno {
            across.0 += l1(a, b);
            across.1 += 1;
        }
    }
    let (w, x) = (within.0 / within.1 as f64, across.0 / across.1 as f64);
    assert!(x > w, "noise/in-domain {x} vs in-domain/in-domain {w}");
}
