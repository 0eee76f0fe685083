use std::time::Instant;

use attribute_mix::attrnet::{AttrNet, AttrNetConfig, StageSpec};
use attribute_mix::image::Image;

fn main() -> attribute_mix::Result<()> {
    let fine = |chans: [usize; 4]| AttrNetConfig {
        stages: chans.iter().enumerate().map(|(i, &c)| StageSpec { out_channels: c, kernel: 3, pool: i < 2 }).collect(),
        ..AttrNetConfig::desk(8, 3)
    };
    let variants: Vec<(&str, AttrNetConfig)> = vec![
        ("desk 16-128, 4x4 maps", AttrNetConfig::desk(8, 3)),
        ("16-128, 16x16 maps", fine([16, 32, 64, 128])),
        ("16-64, 16x16 maps", fine([16, 32, 64, 64])),
        ("16-48, 16x16 maps", fine([16, 32, 48, 48])),
        ("8-32, 16x16 maps", fine([8, 16, 32, 32])),
    ];
    for (name, cfg) in variants {
        let side = cfg.input_side;
        let mut net = AttrNet::new(cfg, 0)?;
        let batch: Vec<(Image, Vec<f64>)> = (0..32)
            .map(|i| (Image::filled(side, side, [0.1 * (i % 10) as f64, 0.5, 0.2]), vec![0.0; 24]))
            .collect();
        net.accumulate_batch(&batch)?;
        let t = Instant::now();
        for _ in 0..3 {
            net.accumulate_batch(&batch)?;
        }
        let per = t.elapsed().as_secs_f64() / 96.0;
        let t = Instant::now();
        for (img, _) in &batch {
            net.forward_one(img)?;
        }
        let fwd = t.elapsed().as_secs_f64() / 32.0;
        println!("{name}: train {:.2} ms/img, forward {:.2} ms/img", per * 1e3, fwd * 1e3);
    }
    Ok(())
}
