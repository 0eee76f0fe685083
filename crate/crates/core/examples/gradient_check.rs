//! Checks reverse-mode gradients of a small conv net against central
//! differences.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use attribute_mix::engine::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// conv -> bias -> relu -> max pool -> GAP -> BCE against `target`.
fn loss(x: &Tensor, w: &Tensor, b: &Tensor, target: &Tensor) -> attribute_mix::Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.param(w);
    let bv = g.param(b);
    let h = g.conv2d(xv, wv, 1, 1)?;
    let h = g.add_channel_bias(h, bv)?;
    let h = g.relu(h);
    let h = g.max_pool2d(h, 2, 2)?;
    let z = g.global_average_pool(h)?;
    let l = g.bce_with_logits(z, target)?;
    let value = g.value(l).item();
    let grads = g.backward(l)?;
    Ok((value, grads.get(wv).unwrap().to_vec()))
}

fn main() -> attribute_mix::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let x = rand(&[2, 3, 6, 6]);
    let w = rand(&[4, 3, 3, 3]);
    let b = rand(&[4]);
    let target = Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0])?;

    let (l, analytic) = loss(&x, &w, &b, &target)?;
    println!("loss {l:.6}");
    let h = 1e-5;
    let (mut diff, mut norm) = (0.0, 0.0);
    for j in 0..w.numel() {
        let mut plus = w.clone();
        plus.data_mut()[j] += h;
        let mut minus = w.clone();
        minus.data_mut()[j] -= h;
        let numeric = (loss(&x, &plus, &b, &target)?.0 - loss(&x, &minus, &b, &target)?.0) / (2.0 * h);
        diff += (numeric - analytic[j]).powi(2);
        norm += numeric * numeric;
    }
    println!("kernel gradient: {} entries, relative error {:.2e}", w.numel(), diff.sqrt() / norm.sqrt());
    Ok(())
}
