//! Oracles shared by the unit suites and the acceptance run.
#![allow(dead_code)]

use attribute_mix::attributes::expand_label;
use attribute_mix::attrnet::{AttrNet, AttrNetConfig};
use attribute_mix::dataset::{PoolImage, Provenance};
use attribute_mix::engine::{self, Graph, Tensor, Var};
use attribute_mix::image::{Image, Mask};
use attribute_mix::mixer::{attribute_mix, gate, sample_lambda, MixInput, MixSchedule};
use attribute_mix::transfer::{filter_pool, max_entropy, PseudoSample, Threshold, UnlabeledPool};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: usize = 100;
const H: f64 = 1e-5;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values kept away from zero so relu kinks stay outside the FD stencil.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

pub fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

/// `sum(out * w)` for a fixed random `w`, so every output entry carries a
/// distinct weight.
fn weighted_loss(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let w = g.input(weights.clone());
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

fn eval(inputs: &[Tensor], build: &Build<'_>, weights: &Tensor) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = weighted_loss(&mut g, out, weights);
    g.value(loss).item()
}

/// Norm-wise relative error between the analytic and central-difference
/// gradients, worst over the inputs.
pub fn grad_check(inputs: &[Tensor], build: &Build<'_>, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = build(&mut g, &vars);
    let weights = rand_tensor(rng, g.value(out).shape());
    let loss = weighted_loss(&mut g, out, &weights);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).unwrap().to_vec();
        let mut numeric = vec![0.0; input.numel()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            *n = (eval(&plus, build, &weights) - eval(&minus, build, &weights)) / (2.0 * H);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
            + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        worst = worst.max(if norm < 1e-12 { diff } else { diff / norm });
    }
    worst
}

pub const OPS: &[&str] = &[
    "conv2d",
    "add_channel_bias",
    "relu",
    "max_pool2d",
    "global_average_pool",
    "matmul",
    "linear",
    "transpose2d",
    "add",
    "mul",
    "softmax_rows",
    "reshape",
    "sum",
    "bce_with_logits",
];

/// Worst relative gradient error of `op` over `CASES` random cases.
pub fn gradcheck_op(op: &str) -> f64 {
    let seed = OPS.iter().position(|o| *o == op).expect("unknown op") as u64 + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let r = &mut rng;
        let err = match op {
            "conv2d" => {
                let (n, ci, co, k) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
                let (stride, pad) = (dims(r, 1, 2), dims(r, 0, 1));
                let side = dims(r, k.max(2), 6);
                let inputs = [rand_tensor(r, &[n, ci, side, side]), rand_tensor(r, &[co, ci, k, k])];
                grad_check(&inputs, &|g, v| g.conv2d(v[0], v[1], stride, pad).unwrap(), r)
            }
            "add_channel_bias" => {
                let (n, c, h, w) = (dims(r, 1, 2), dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
                let inputs = [rand_tensor(r, &[n, c, h, w]), rand_tensor(r, &[c])];
                grad_check(&inputs, &|g, v| g.add_channel_bias(v[0], v[1]).unwrap(), r)
            }
            "relu" => {
                let (a, b) = (dims(r, 1, 5), dims(r, 1, 5));
                grad_check(&[off_kink(r, &[a, b])], &|g, v| g.relu(v[0]), r)
            }
            "max_pool2d" => {
                let (n, c, side) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 2, 7));
                let x = rand_tensor(r, &[n, c, side, side]);
                grad_check(&[x], &|g, v| g.max_pool2d(v[0], 2, 2).unwrap(), r)
            }
            "global_average_pool" => {
                let (n, c, h, w) = (dims(r, 1, 2), dims(r, 1, 4), dims(r, 1, 5), dims(r, 1, 5));
                let x = rand_tensor(r, &[n, c, h, w]);
                grad_check(&[x], &|g, v| g.global_average_pool(v[0]).unwrap(), r)
            }
            "matmul" => {
                let (m, k, n) = (dims(r, 1, 5), dims(r, 1, 5), dims(r, 1, 5));
                let inputs = [rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])];
                grad_check(&inputs, &|g, v| g.matmul(v[0], v[1]).unwrap(), r)
            }
            "linear" => {
                let (b, i, o) = (dims(r, 1, 4), dims(r, 1, 5), dims(r, 1, 5));
                let inputs = [rand_tensor(r, &[b, i]), rand_tensor(r, &[o, i]), rand_tensor(r, &[o])];
                grad_check(&inputs, &|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(), r)
            }
            "transpose2d" => {
                let (a, b) = (dims(r, 1, 5), dims(r, 1, 5));
                grad_check(&[rand_tensor(r, &[a, b])], &|g, v| g.transpose2d(v[0]).unwrap(), r)
            }
            "add" | "mul" => {
                let (a, b) = (dims(r, 1, 5), dims(r, 1, 5));
                let inputs = [rand_tensor(r, &[a, b]), rand_tensor(r, &[a, b])];
                if op == "add" {
                    grad_check(&inputs, &|g, v| g.add(v[0], v[1]).unwrap(), r)
                } else {
                    grad_check(&inputs, &|g, v| g.mul(v[0], v[1]).unwrap(), r)
                }
            }
            "softmax_rows" => {
                let (a, b) = (dims(r, 1, 4), dims(r, 1, 6));
                let x = Tensor::from_fn(&[a, b], |_| r.gen_range(-3.0..3.0));
                grad_check(&[x], &|g, v| g.softmax_rows(v[0]).unwrap(), r)
            }
            "reshape" => {
                let (a, b) = (dims(r, 1, 4), dims(r, 1, 4));
                grad_check(&[rand_tensor(r, &[a, b])], &|g, v| g.reshape(v[0], &[a * b]).unwrap(), r)
            }
            "sum" => {
                let a = dims(r, 1, 8);
                let build = |g: &mut Graph, v: &[Var]| {
                    let s = g.sum(v[0]);
                    g.reshape(s, &[1]).unwrap()
                };
                grad_check(&[rand_tensor(r, &[a])], &build, r)
            }
            "bce_with_logits" => {
                let n = dims(r, 1, 8);
                let z = Tensor::from_fn(&[n], |_| r.gen_range(-4.0..4.0));
                let t = Tensor::from_fn(&[n], |_| r.gen_range(0.0..=1.0));
                let build = |g: &mut Graph, v: &[Var]| {
                    let l = g.bce_with_logits(v[0], &t).unwrap();
                    g.reshape(l, &[1]).unwrap()
                };
                grad_check(&[z], &build, r)
            }
            _ => unreachable!(),
        };
        worst = worst.max(err);
    }
    worst
}

pub fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[b, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![n, co, oh, ow], out)
}

pub fn pool_oracle(x: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = ((h - 2) / 2 + 1, (w - 2) / 2 + 1);
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            m = m.max(x.at(&[b, ch, 2 * i + di, 2 * j + dj]));
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    (vec![n, c, oh, ow], out)
}

pub fn gap_oracle(x: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x.at(&[b, ch, y, xx]);
                }
            }
            out.push(s / (h * w) as f64);
        }
    }
    out
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst absolute deviation of conv, max pool and GAP from the loop oracles
/// over `cases` random shapes each.
pub fn loop_oracle_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, ci, co, k) = (dims(r, 1, 2), dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 3));
        let (s, p) = (dims(r, 1, 2), dims(r, 0, 2));
        let side = dims(r, k, 9);
        let x = rand_tensor(r, &[n, ci, side, side + 1]);
        let w = rand_tensor(r, &[co, ci, k, k]);
        let y = engine::conv2d(&x, &w, s, p).unwrap();
        let (shape, want) = conv_oracle(&x, &w, s, p);
        assert_eq!(y.shape(), &shape[..]);
        worst = worst.max(max_abs(y.data(), &want));

        let (h, wd) = (dims(r, 2, 9), dims(r, 2, 9));
        let x = rand_tensor(r, &[n, ci, h, wd]);
        let y = engine::max_pool2d(&x, 2, 2).unwrap();
        let (shape, want) = pool_oracle(&x);
        assert_eq!(y.shape(), &shape[..]);
        worst = worst.max(max_abs(y.data(), &want));

        let y = engine::global_average_pool(&x).unwrap();
        assert_eq!(y.shape(), &[n, ci]);
        worst = worst.max(max_abs(y.data(), &gap_oracle(&x)));
    }
    worst
}

pub fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

pub fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let p = rng.gen_range(0.05..0.9);
    let mut bits: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(p)).collect();
    let i = rng.gen_range(0..h * w);
    bits[i] = true;
    Mask::from_bits(h, w, bits).unwrap()
}

/// Per-pixel evaluation of `M ⊙ (λ x_a + (1 − λ) x_b) + (1 − M) ⊙ x_a`.
pub fn mix_oracle(a: &Image, b: &Image, m: &Mask, lambda: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.data().len());
    for c in 0..3 {
        for y in 0..a.height() {
            for x in 0..a.width() {
                let mv = if m.get(y, x) { 1.0 } else { 0.0 };
                let (xa, xb) = (a.get(c, y, x), b.get(c, y, x));
                out.push(mv * (lambda * xa + (1.0 - lambda) * xb) + (1.0 - mv) * xa);
            }
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct MixOracleReport {
    /// Triples whose image differs from the oracle in any bit.
    pub image_mismatches: usize,
    /// Triples whose label differs from `λ y_a + (1 − λ) y_b` by more than 1e-15.
    pub label_mismatches: usize,
    /// Largest `|Σ ỹ − k|`.
    pub label_sum_error: f64,
}

pub fn mix_oracle_check(cases: usize, seed: u64) -> MixOracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, k) = (6, 3);
    let mut rep = MixOracleReport::default();
    for case in 0..cases {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let a = rand_image(&mut rng, h, w);
        let b = rand_image(&mut rng, h, w);
        let m = rand_mask(&mut rng, h, w);
        let lambda = match case % 10 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen::<f64>(),
        };
        let ya = expand_label(rng.gen_range(0..c), c, k).unwrap().into_vec();
        let yb = expand_label(rng.gen_range(0..c), c, k).unwrap().into_vec();
        let out = attribute_mix(
            MixInput { id: "a", image: &a, label: &ya },
            MixInput { id: "b", image: &b, label: &yb },
            &m,
            lambda,
            Some(0),
        )
        .unwrap();
        let want = mix_oracle(&a, &b, &m, lambda);
        if !out.image.data().iter().zip(&want).all(|(x, y)| x.to_bits() == y.to_bits()) {
            rep.image_mismatches += 1;
        }
        let sum: f64 = out.label.iter().sum();
        rep.label_sum_error = rep.label_sum_error.max((sum - k as f64).abs());
        if out.label.iter().enumerate().any(|(i, v)| (v - (lambda * ya[i] + (1.0 - lambda) * yb[i])).abs() > 1e-15) {
            rep.label_mismatches += 1;
        }
    }
    rep
}

/// Kolmogorov-Smirnov statistic of `n` Beta(1, 1) draws against U(0, 1).
pub fn ks_uniform(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: Vec<f64> = (0..n).map(|_| sample_lambda(1.0, &mut rng).unwrap()).collect();
    draws.sort_by(f64::total_cmp);
    draws
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n as f64 - x).abs().max((x - i as f64 / n as f64).abs()))
        .fold(0.0, f64::max)
}

/// Observed gate acceptance rate at epoch `t` over `n` draws.
pub fn gate_rate(schedule: &MixSchedule, t: f64, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let accepted = (0..n).filter(|_| gate(sample_lambda(1.0, &mut rng).unwrap(), t, schedule)).count();
    accepted as f64 / n as f64
}

pub fn tiny_net(c: usize, k: usize, seed: u64) -> AttrNet {
    let mut cfg = AttrNetConfig::localized(c, k, &[4, 4]);
    cfg.input_side = 8;
    AttrNet::new(cfg, seed).unwrap()
}

pub fn tiny_pool(rng: &mut ChaCha8Rng, n: usize) -> UnlabeledPool {
    UnlabeledPool::new(
        (0..n)
            .map(|i| PoolImage {
                id: format!("p{i:03}"),
                image: Image::new(8, 8, 3, (0..192).map(|_| rng.gen::<f64>()).collect()).unwrap(),
                provenance: if i % 5 == 0 { Provenance::Noise } else { Provenance::InDomain },
            })
            .collect(),
    )
}

fn ids(kept: &[PseudoSample]) -> std::collections::BTreeSet<String> {
    kept.iter().map(|s| s.id.clone()).collect()
}

#[derive(Debug, Default)]
pub struct FilterReport {
    /// Pools where raising τ dropped a previously kept image.
    pub monotonicity_violations: usize,
    /// Pools where τ at the entropy bound did not keep every image.
    pub bound_violations: usize,
    /// Largest deviation of a pseudo-label row sum from 1.
    pub row_sum_error: f64,
}

/// Runs `filter_pool` on `pools` random pools with a fresh tiny network each
/// and sweeps τ through every observed entropy.
pub fn filter_pool_check(pools: usize, seed: u64) -> FilterReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, k) = (4, 2);
    let mut rep = FilterReport::default();
    for case in 0..pools {
        let net = tiny_net(c, k, case as u64);
        let n = rng.gen_range(0..8);
        let pool = tiny_pool(&mut rng, n);
        let all = filter_pool(&pool, &net, 1.0, Threshold::Absolute(max_entropy(k, c))).unwrap();
        if all.len() != pool.len() {
            rep.bound_violations += 1;
        }
        let mut taus: Vec<f64> = all.iter().map(|s| s.entropy).collect();
        taus.insert(0, 0.0);
        taus.sort_by(f64::total_cmp);
        let mut prev = std::collections::BTreeSet::new();
        let mut monotone = true;
        for t in taus {
            let now = ids(&filter_pool(&pool, &net, 1.0, Threshold::Absolute(t)).unwrap());
            monotone &= prev.is_subset(&now);
            prev = now;
        }
        if !monotone {
            rep.monotonicity_violations += 1;
        }
        for s in &all {
            for i in 0..k {
                let row: f64 = (0..c).map(|class| s.label[class * k + i]).sum();
                rep.row_sum_error = rep.row_sum_error.max((row - 1.0).abs());
            }
        }
    }
    rep
}
