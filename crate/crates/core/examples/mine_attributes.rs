//! Mines k = 3 attribute masks per training image of the synthetic benchmark
//! and scores them against the generator's part boxes.
//!
//! ```text
//! cargo run --release --example mine_attributes -- /tmp/masks
//! ```

use std::path::PathBuf;
use std::time::Instant;

use attribute_mix::attributes::{mine_attributes, MaskStore, MiningSchedule};
use attribute_mix::attrnet::AttrNetConfig;
use attribute_mix::dataset::LabeledImage;
use attribute_mix::synthbench::{matched_parts, render, GeneratorConfig};

fn main() -> attribute_mix::Result<()> {
    env_logger::init();
    let out = std::env::args().nth(1).map(PathBuf::from);
    let gen = GeneratorConfig::default();
    let data = render(&gen)?;
    let train: Vec<LabeledImage> = data
        .train
        .iter()
        .map(|s| LabeledImage { id: s.id.clone(), class: s.class.unwrap(), image: s.image.clone() })
        .collect();

    let env = |k: &str, d: &str| std::env::var(k).unwrap_or_else(|_| d.to_string());
    let channels: Vec<usize> = env("CHANNELS", "16,32,64,64").split(',').map(|v| v.parse().unwrap()).collect();
    let config = AttrNetConfig::localized(gen.num_classes, 3, &channels);
    let mut schedule = MiningSchedule::default();
    schedule.sgd.learning_rate = env("LR", "0.05").parse().unwrap();
    schedule.first_round_epochs = env("E1", "20").parse().unwrap();
    schedule.round_epochs = env("E2", "10").parse().unwrap();
    let t = Instant::now();
    let outcome = mine_attributes(&train, &config, &schedule)?;
    println!("mined {} images in {:.1}s, {} empty attentions", train.len(), t.elapsed().as_secs_f64(), outcome.skipped);
    for (r, losses) in outcome.round_losses.iter().enumerate() {
        println!("round {}: loss {:.4} -> {:.4}", r + 1, losses[0], losses[losses.len() - 1]);
    }

    let mut full = 0;
    let mut hist = [0usize; 4];
    for (sample, masks) in data.train.iter().zip(&outcome.masks) {
        let masks: Vec<_> = masks.iter().map(|m| m.as_ref().map(|m| m.mask.clone())).collect();
        let n = matched_parts(&masks, &sample.boxes, 0.2);
        hist[n] += 1;
        if n == 3 {
            full += 1;
        }
    }
    println!("images with all 3 masks on distinct parts (IoU > 0.2): {:.1}%", 100.0 * full as f64 / train.len() as f64);
    println!("matched-part histogram 0..=3: {hist:?}");

    if let Some(dir) = out {
        MaskStore::new(&dir).save(3, &train, &outcome.masks)?;
        println!("mask store written to {}", dir.display());
    }
    Ok(())
}
