//! Trains a small teacher, pseudo-labels an unlabeled pool with 20%
//! out-of-domain images and shows how the entropy filter treats them.
//!
//! ```text
//! cargo run --release --example pseudo_label
//! ```

use attribute_mix::attributes::expand_label;
use attribute_mix::attrnet::{fit, AttrNet, AttrNetConfig};
use attribute_mix::dataset::{PoolImage, Provenance};
use attribute_mix::engine::{Sgd, SgdConfig};
use attribute_mix::synthbench::{render, GeneratorConfig};
use attribute_mix::transfer::{max_entropy, score_pool, select, Threshold, UnlabeledPool};

fn main() -> attribute_mix::Result<()> {
    let gen = GeneratorConfig {
        train_per_class: 10,
        test_per_class: 0,
        unlabeled_per_class: 10,
        noise_fraction: 0.2,
        ..Default::default()
    };
    let data = render(&gen)?;
    let (c, k) = (gen.num_classes, 3);
    let mut teacher = AttrNet::new(AttrNetConfig::localized(c, k, &[8, 16, 32, 32]), 0)?;
    let mut opt = Sgd::new(SgdConfig { learning_rate: 0.05, ..Default::default() })?;
    let labeled: Vec<_> = data
        .train
        .iter()
        .map(|s| Ok((s.image.clone(), expand_label(s.class.unwrap(), c, k)?.into_vec())))
        .collect::<attribute_mix::Result<_>>()?;
    let losses = fit(&mut teacher, &mut opt, &labeled, 0..80, 16, 0)?;
    println!("teacher loss {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);

    let pool = UnlabeledPool::new(
        data.unlabeled
            .iter()
            .map(|s| PoolImage { id: s.id.clone(), image: s.image.clone(), provenance: s.provenance })
            .collect(),
    );
    let scored = score_pool(&pool, &teacher, 1.0)?;
    let noise = scored.iter().filter(|s| s.provenance == Provenance::Noise).count();
    println!("pool {} images ({noise} noise), entropy bound {:.2} bits", scored.len(), max_entropy(k, c));
    for q in [0.25, 0.5, 0.75, 1.0] {
        let kept = select(scored.clone(), Threshold::Percentile(q))?;
        let kept_noise = kept.iter().filter(|s| s.provenance == Provenance::Noise).count();
        let tau = kept.last().map_or(0.0, |s| s.entropy);
        println!("keep lowest {:>3.0}%: τ={tau:.2}, kept {} ({kept_noise} noise)", 100.0 * q, kept.len());
    }
    Ok(())
}
