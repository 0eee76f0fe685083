//! Mixup and CutMix on two synthetic images, with the label weights each
//! produces.
//!
//! ```text
//! cargo run --example mixup_cutmix -- /tmp/mixes
//! ```

use std::path::PathBuf;

use attribute_mix::attributes::expand_label;
use attribute_mix::mixer::{cutmix, mixup, sample_lambda, MixInput};
use attribute_mix::synthbench::{render, GeneratorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> attribute_mix::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("mixes"));
    std::fs::create_dir_all(&out).map_err(|e| attribute_mix::Error::io(&out, e))?;
    let gen = GeneratorConfig { train_per_class: 1, test_per_class: 0, ..Default::default() };
    let data = render(&gen)?;
    let (sa, sb) = (&data.train[0], &data.train[1]);
    let (ca, cb) = (sa.class.unwrap(), sb.class.unwrap());
    let ya = expand_label(ca, gen.num_classes, 1)?.into_vec();
    let yb = expand_label(cb, gen.num_classes, 1)?.into_vec();
    let a = MixInput { id: &sa.id, image: &sa.image, label: &ya };
    let b = MixInput { id: &sb.id, image: &sb.image, label: &yb };

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 0..4 {
        let lambda = sample_lambda(1.0, &mut rng)?;
        let m = mixup(a, b, lambda)?;
        let c = cutmix(a, b, lambda, &mut rng)?;
        m.image.save_png(&out.join(format!("mixup_{n}.png")))?;
        c.image.save_png(&out.join(format!("cutmix_{n}.png")))?;
        println!(
            "λ={lambda:.3}  mixup: {:.3}/{:.3}  cutmix: {:.3}/{:.3} (pasted-area weight)",
            m.label[ca], m.label[cb], c.label[ca], c.label[cb]
        );
    }
    println!("images in {}", out.display());
    Ok(())
}
