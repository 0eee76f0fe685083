//! Mines attribute masks on a small synthetic set and writes a few
//! Attribute Mix samples as PNGs.
//!
//! ```text
//! cargo run --release --example attribute_mix -- /tmp/attribute-mix
//! ```

use std::path::PathBuf;

use attribute_mix::attributes::{expand_label, mine_attributes, MiningSchedule};
use attribute_mix::attrnet::AttrNetConfig;
use attribute_mix::dataset::LabeledImage;
use attribute_mix::mixer::{attribute_mix_masks, MixInput, TransferMode};
use attribute_mix::synthbench::{render, GeneratorConfig};

fn main() -> attribute_mix::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("attribute-mix"));
    std::fs::create_dir_all(&out).map_err(|e| attribute_mix::Error::io(&out, e))?;
    let gen = GeneratorConfig { train_per_class: 10, test_per_class: 0, ..Default::default() };
    let data = render(&gen)?;
    let train: Vec<LabeledImage> = data
        .train
        .iter()
        .map(|s| LabeledImage { id: s.id.clone(), class: s.class.unwrap(), image: s.image.clone() })
        .collect();

    let (c, k) = (gen.num_classes, 3);
    let config = AttrNetConfig::localized(c, k, &[8, 16, 32, 32]);
    let schedule = MiningSchedule { first_round_epochs: 40, round_epochs: 20, ..Default::default() };
    let mined = mine_attributes(&train, &config, &schedule)?;
    println!("mined {} images, {} empty attentions", train.len(), mined.skipped);

    let mut written = 0;
    for i in 0..train.len() {
        let j = (i + 13) % train.len();
        if written == 6 || train[i].class == train[j].class {
            continue;
        }
        for attr in 0..k {
            let (Some(ma), Some(mb)) = (&mined.masks[i][attr], &mined.masks[j][attr]) else {
                continue;
            };
            let ya = expand_label(train[i].class, c, k)?.into_vec();
            let yb = expand_label(train[j].class, c, k)?.into_vec();
            let a = MixInput { id: &train[i].id, image: &train[i].image, label: &ya };
            let b = MixInput { id: &train[j].id, image: &train[j].image, label: &yb };
            let Some(mixed) = attribute_mix_masks(a, b, ma, mb, 0.3, TransferMode::TranslateContent)? else {
                continue;
            };
            let name = format!("{}_{}_attr{attr}.png", train[i].id, train[j].id);
            mixed.image.save_png(&out.join(&name))?;
            println!(
                "{name}: class {} keeps {:.2}, class {} gets {:.2}",
                train[i].class,
                mixed.label[train[i].class * k],
                train[j].class,
                mixed.label[train[j].class * k]
            );
            written += 1;
            break;
        }
    }
    println!("{written} samples in {}", out.display());
    Ok(())
}
