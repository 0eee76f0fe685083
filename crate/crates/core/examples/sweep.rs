//! Sweeps the Beta parameter of Attribute Mix over two seeds on a tiny
//! benchmark and prints the summary table.
//!
//! ```text
//! cargo run --release --example sweep -- /tmp/alpha-sweep
//! ```

use std::path::PathBuf;

use attribute_mix::harness::config::{DataSection, ExperimentConfig, Mode, ModelSection, TrainSection};
use attribute_mix::harness::sweep::sweep;
use attribute_mix::synthbench::{generate, GeneratorConfig};

fn main() -> attribute_mix::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("alpha-sweep"));
    let gen = GeneratorConfig { side: 32, train_per_class: 4, test_per_class: 4, ..Default::default() };
    generate(&gen, &dir.join("data"))?;
    let mut config = ExperimentConfig {
        mode: Mode::AttributeMix,
        data: DataSection { manifest: dir.join("data/manifest.jsonl"), ..Default::default() },
        model: ModelSection { input_side: 32, channels: vec![8, 16], ..Default::default() },
        train: TrainSection { epochs: 5, batch_size: 8, ..Default::default() },
        ..Default::default()
    };
    config.mining.auto = true;
    config.mining.first_round_epochs = 5;
    config.mining.round_epochs = 3;
    let values: Vec<String> = ["0.2", "1", "5"].map(String::from).to_vec();
    let (_, summary) = sweep(&config, "alpha".parse()?, &values, &[0, 1], &dir.join("sweep"))?;
    for row in summary {
        println!("{}", serde_json::to_string(&row)?);
    }
    println!("per-run metrics under {}", dir.join("sweep").display());
    Ok(())
}
