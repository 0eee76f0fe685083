//! Trains baseline, mixup, cutmix and Attribute Mix on the low-data
//! benchmark (8 labeled images per class) and prints final accuracies.
//!
//! ```text
//! cargo run --release --example compare_modes -- /tmp/compare 40
//! ```

use std::path::PathBuf;

use attribute_mix::harness::config::{DataSection, ExperimentConfig, Mode};
use attribute_mix::harness::train::train;
use attribute_mix::synthbench::{generate, GeneratorConfig};

fn main() -> attribute_mix::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("compare"));
    let epochs: usize = args.next().map_or(40, |e| e.parse().expect("epochs"));
    let gen = GeneratorConfig { train_per_class: 8, test_per_class: 30, ..Default::default() };
    generate(&gen, &dir.join("data"))?;
    for mode in [Mode::Baseline, Mode::Mixup, Mode::Cutmix, Mode::AttributeMix] {
        let mut config = ExperimentConfig {
            mode,
            data: DataSection { manifest: dir.join("data/manifest.jsonl"), ..Default::default() },
            ..Default::default()
        };
        config.train.epochs = epochs;
        config.mining.auto = true;
        let summary = train(&config, &dir.join(mode.name()), false)?;
        println!(
            "{:<14} final {:.3}  best {:.3} (epoch {})",
            mode.name(),
            summary.final_accuracy,
            summary.best_accuracy,
            summary.best_epoch
        );
    }
    Ok(())
}
