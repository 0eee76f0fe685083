//! Reverse-mode differentiation over an append-only tape.
//!
//! Nodes are pushed in evaluation order, so the tape is already a topological
//! order and `backward` is a single reverse sweep.

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        batch: usize,
        cols: Vec<f64>,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
        plane: usize,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    SoftmaxRows {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Transpose {
        input: Var,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visits: Vec<u32>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// How many times the sweep processed `var`'s node.
    pub fn visits(&self, var: Var) -> u32 {
        self.visits[var.0]
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that honours the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.is_trainable();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Constant leaf.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.requires_grad(false), Op::Leaf, false)
    }

    /// Trainable leaf holding a copy of `tensor`'s values.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut t = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("valid tensor");
        t = t.requires_grad(true);
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        if x.shape().len() != 4 {
            return Err(Error::shape("conv2d", "input rank", 4, x.shape().len()));
        }
        if w.shape().len() != 4 {
            return Err(Error::shape("conv2d", "kernel rank", 4, w.shape().len()));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if ci != c {
            return Err(Error::shape("conv2d", "input channels", ci, c));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", "kernel width", kh, kw));
        }
        if h + 2 * padding < kh {
            return Err(Error::shape("conv2d", "input height", format!(">= {}", kh), h + 2 * padding));
        }
        if wd + 2 * padding < kw {
            return Err(Error::shape("conv2d", "input width", format!(">= {}", kw), wd + 2 * padding));
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            padding,
            out_height: (h + 2 * padding - kh) / stride + 1,
            out_width: (wd + 2 * padding - kw) / stride + 1,
        };
        let (pl, p) = (geom.patch_len(), geom.positions());
        let needs = self.needs(input) || self.needs(kernel);
        // Column matrices are only kept when backward will need them.
        let keep = self.needs(kernel);
        let mut cols = vec![0.0; if keep { n * pl * p } else { pl * p }];
        let mut out = vec![0.0; n * o * p];
        for b in 0..n {
            let img = &x.data()[b * c * h * wd..(b + 1) * c * h * wd];
            let col = if keep {
                &mut cols[b * pl * p..(b + 1) * pl * p]
            } else {
                &mut cols[..]
            };
            kernels::im2col(&geom, img, col);
            kernels::gemm(
                o,
                pl,
                p,
                w.data(),
                pl,
                1,
                col,
                p,
                1,
                0.0,
                &mut out[b * o * p..(b + 1) * o * p],
            );
        }
        if !keep {
            cols = Vec::new();
        }
        let value = Tensor::new(&[n, o, geom.out_height, geom.out_width], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch: n,
                cols,
            },
            needs,
        ))
    }

    /// Adds a per-channel bias to an NCHW tensor.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let b = self.value(bias);
        if x.shape().len() != 4 {
            return Err(Error::shape("add_channel_bias", "input rank", 4, x.shape().len()));
        }
        let c = x.shape()[1];
        if b.numel() != c {
            return Err(Error::shape("add_channel_bias", "bias length", c, b.numel()));
        }
        let plane = x.shape()[2] * x.shape()[3];
        let mut out = x.data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(x.shape(), out)?;
        let needs = self.needs(input) || self.needs(bias);
        Ok(self.push(value, Op::ChannelBias { input, bias }, needs))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|v| v.max(0.0)).collect())
            .expect("same shape");
        let needs = self.needs(input);
        self.push(value, Op::Relu { input }, needs)
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 4 {
            return Err(Error::shape("max_pool2d", "input rank", 4, x.shape().len()));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidArgument("max_pool2d kernel and stride must be positive".into()));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if h < kernel {
            return Err(Error::shape("max_pool2d", "input height", format!(">= {kernel}"), h));
        }
        if w < kernel {
            return Err(Error::shape("max_pool2d", "input width", format!(">= {kernel}"), w));
        }
        let (out, argmax, oh, ow) = kernels::max_pool_planes(x.data(), n * c, h, w, kernel, stride);
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::MaxPool { input, argmax }, needs))
    }

    /// NCHW → NC spatial mean.
    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 4 {
            return Err(Error::shape("global_average_pool", "input rank", 4, x.shape().len()));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let plane = x.shape()[2] * x.shape()[3];
        let out = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::GlobalAvgPool { input, plane }, needs))
    }

    /// (m × k) · (k × n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 {
            return Err(Error::shape("matmul", "lhs rank", 2, ta.shape().len()));
        }
        if tb.shape().len() != 2 {
            return Err(Error::shape("matmul", "rhs rank", 2, tb.shape().len()));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::shape("matmul", "inner dimension", k, k2));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), k, 1, tb.data(), n, 1, 0.0, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b }, needs))
    }

    /// `x · weightᵀ + bias` with `weight` shaped (out × in).
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let w = self.value(weight);
        if w.shape().len() != 2 {
            return Err(Error::shape("linear", "weight rank", 2, w.shape().len()));
        }
        let wt = self.transpose2d(weight)?;
        let y = self.matmul(x, wt)?;
        match bias {
            None => Ok(y),
            Some(b) => {
                let rows = self.value(y).shape()[0];
                let tb = self.value(b);
                let cols = self.value(y).shape()[1];
                if tb.numel() != cols {
                    return Err(Error::shape("linear", "bias length", cols, tb.numel()));
                }
                let ones = self.input(Tensor::full(&[rows, 1], 1.0));
                let b2 = self.reshape(b, &[1, cols])?;
                let tiled = self.matmul(ones, b2)?;
                self.add(y, tiled)
            }
        }
    }

    pub fn transpose2d(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if t.shape().len() != 2 {
            return Err(Error::shape("transpose2d", "input rank", 2, t.shape().len()));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let value = Tensor::new(&[c, r], transpose(t.data(), r, c))?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Transpose { input }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", "shape", format!("{:?}", ta.shape()), format!("{:?}", tb.shape())));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", "shape", format!("{:?}", ta.shape()), format!("{:?}", tb.shape())));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    /// Softmax along the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 2 {
            return Err(Error::shape("softmax_rows", "input rank", 2, x.shape().len()));
        }
        let cols = x.shape()[1];
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(x.shape(), out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::SoftmaxRows { input }, needs))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, needs)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Reshape { input }, needs))
    }

    /// Mean binary cross-entropy between `logits` and soft `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                "shape",
                format!("{:?}", z.shape()),
                format!("{:?}", targets.shape()),
            ));
        }
        check_finite("bce_with_logits(logits)", z.data())?;
        check_finite("bce_with_logits(targets)", targets.data())?;
        let n = z.numel() as f64;
        let loss = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| bce_term(z, t))
            .sum::<f64>()
            / n;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss numel", 1, self.value(loss).numel()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visits = vec![0u32; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visits[idx] += 1;
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visits })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                cols,
            } => {
                let w = self.value(*kernel);
                let o = w.shape()[0];
                let (pl, p) = (geom.patch_len(), geom.positions());
                let image = geom.channels * geom.height * geom.width;
                if self.needs(*kernel) {
                    let mut dw = vec![0.0; o * pl];
                    for b in 0..*batch {
                        let dy = &g[b * o * p..(b + 1) * o * p];
                        let col = &cols[b * pl * p..(b + 1) * pl * p];
                        kernels::gemm(o, p, pl, dy, p, 1, col, 1, p, 1.0, &mut dw);
                    }
                    add_into(&mut grads[kernel.0], &dw);
                }
                if self.needs(*input) {
                    let mut dx = vec![0.0; batch * image];
                    let mut dcols = vec![0.0; pl * p];
                    for b in 0..*batch {
                        let dy = &g[b * o * p..(b + 1) * o * p];
                        kernels::gemm(pl, o, p, w.data(), 1, pl, dy, p, 1, 0.0, &mut dcols);
                        kernels::col2im(geom, &dcols, &mut dx[b * image..(b + 1) * image]);
                    }
                    add_into(&mut grads[input.0], &dx);
                }
            }
            Op::ChannelBias { input, bias } => {
                let shape = self.value(*input).shape();
                let c = shape[1];
                let plane = shape[2] * shape[3];
                if self.needs(*bias) {
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    add_into(&mut grads[bias.0], &db);
                }
                if self.needs(*input) {
                    add_into(&mut grads[input.0], g);
                }
            }
            Op::Relu { input } => {
                let out = node.value.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 })
                    .collect();
                add_into(&mut grads[input.0], &dx);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                add_into(&mut grads[input.0], &dx);
            }
            Op::GlobalAvgPool { input, plane } => {
                let scale = 1.0 / *plane as f64;
                let dx: Vec<f64> = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat(gv * scale).take(*plane))
                    .collect();
                add_into(&mut grads[input.0], &dx);
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, n, 1, tb.data(), 1, n, 0.0, &mut da);
                    add_into(&mut grads[a.0], &da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), 1, k, g, n, 1, 0.0, &mut db);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da: Vec<f64> = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::SoftmaxRows { input } => {
                let cols = node.value.shape()[1];
                let mut dx = vec![0.0; g.len()];
                for ((y, gr), d) in node
                    .value
                    .data()
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(dx.chunks_mut(cols))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[j] = y[j] * (gr[j] - dot);
                    }
                }
                add_into(&mut grads[input.0], &dx);
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                add_into(&mut grads[input.0], &vec![g[0]; n]);
            }
            Op::Reshape { input } => {
                add_into(&mut grads[input.0], g);
            }
            Op::Transpose { input } => {
                let shape = node.value.shape();
                add_into(&mut grads[input.0], &transpose(g, shape[0], shape[1]));
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let scale = g[0] / z.len() as f64;
                let dz: Vec<f64> = z
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                    .collect();
                add_into(&mut grads[logits.0], &dz);
            }
        }
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stable `−[t·log σ(z) + (1−t)·log(1−σ(z))]`.
pub fn bce_term(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
