//! Generates the default synthetic benchmark and prints a short summary.
//!
//! ```text
//! cargo run --example synthetic_dataset -- /tmp/synth
//! ```

use std::path::PathBuf;

use attribute_mix::synthbench::{color_fraction, generate, GeneratorConfig};

fn main() -> attribute_mix::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("attrmix-synth"));
    let config = GeneratorConfig { unlabeled_per_class: 10, noise_fraction: 0.2, ..Default::default() };
    let data = generate(&config, &dir)?;
    println!("wrote {} train, {} test, {} unlabeled images to {}", data.train.len(), data.test.len(), data.unlabeled.len(), dir.display());

    let mut worst: f64 = 1.0;
    for s in &data.train {
        let code = config.code(s.class.unwrap());
        for b in &s.boxes {
            let frac = color_fraction(&s.image, &b.bbox, config.part_color(b.part, code[b.part]), 0.2);
            worst = worst.min(frac);
        }
    }
    println!("smallest dominant-colour share of any part box: {worst:.3}");
    for class in 0..config.num_classes {
        println!("class {class}: part appearances {:?}", config.code(class));
    }
    Ok(())
}
