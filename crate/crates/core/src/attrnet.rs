//! Attribute classifier.
//!
//! A small convolutional backbone feeds a 1×1 convolution with `k·C` output
//! channels; global average pooling turns each channel into one attribute
//! logit. Channels `c·k ..= c·k + k − 1` belong to class `c`.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{self, checkpoint, softmax_in_place, Graph, Sgd, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

/// One backbone stage: `kernel×kernel` conv (same padding), ReLU, and an
/// optional 2×2 max pool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: bool,
}

impl StageSpec {
    pub fn conv3(out_channels: usize) -> Self {
        StageSpec {
            out_channels,
            kernel: 3,
            pool: true,
        }
    }
}

/// How attribute logits are folded into class scores at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Sum raw logits.
    #[default]
    Logits,
    /// Sum per-attribute sigmoid probabilities.
    Probabilities,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttrNetConfig {
    pub num_classes: usize,
    pub attributes_per_class: usize,
    pub input_side: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub score_mode: ScoreMode,
    /// Fixed input standardisation `(x − mean) / std`, applied to every
    /// channel before the first stage.
    #[serde(default = "default_input_norm")]
    pub input_norm: (f64, f64),
}

fn default_in_channels() -> usize {
    3
}

fn default_input_norm() -> (f64, f64) {
    (0.45, 0.25)
}

impl AttrNetConfig {
    /// Four 3×3 stages (16→32→64→128), each with ReLU and 2×2 max pool.
    pub fn desk(num_classes: usize, attributes_per_class: usize) -> Self {
        AttrNetConfig {
            num_classes,
            attributes_per_class,
            input_side: 64,
            in_channels: 3,
            stages: [16, 32, 64, 128].into_iter().map(StageSpec::conv3).collect(),
            score_mode: ScoreMode::Logits,
            input_norm: default_input_norm(),
        }
    }

    /// Same widths as [`desk`](Self::desk) but pooled only after the first
    /// two stages, leaving 16×16 attribute maps on a 64-px input. Attention
    /// masks from 4×4 maps are too coarse to separate neighbouring parts.
    pub fn localized(num_classes: usize, attributes_per_class: usize, channels: &[usize]) -> Self {
        AttrNetConfig {
            stages: channels
                .iter()
                .enumerate()
                .map(|(i, &c)| StageSpec {
                    out_channels: c,
                    kernel: 3,
                    pool: i < 2,
                })
                .collect(),
            ..AttrNetConfig::desk(num_classes, attributes_per_class)
        }
    }

    pub fn input_tensor(&self, img: &Image) -> Tensor {
        let (mean, std) = self.input_norm;
        let mut t = img.to_tensor();
        t.data_mut().iter_mut().for_each(|v| *v = (*v - mean) / std);
        t
    }

    pub fn head_channels(&self) -> usize {
        self.num_classes * self.attributes_per_class
    }

    /// Spatial side of the attribute maps.
    pub fn map_side(&self) -> usize {
        self.stages
            .iter()
            .fold(self.input_side, |s, st| if st.pool { s / 2 } else { s })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.attributes_per_class == 0 {
            return Err(Error::Config("num_classes and attributes_per_class must be positive".into()));
        }
        if !(self.input_norm.1 > 0.0) || !self.input_norm.0.is_finite() {
            return Err(Error::Config("input_norm std must be positive".into()));
        }
        if self.input_side == 0 || self.in_channels == 0 {
            return Err(Error::Config("input_side and in_channels must be positive".into()));
        }
        let mut side = self.input_side;
        for (i, st) in self.stages.iter().enumerate() {
            if st.out_channels == 0 || st.kernel == 0 || st.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "stage {i}: channels must be positive and kernel odd"
                )));
            }
            if st.pool {
                if side < 2 {
                    return Err(Error::Config(format!("stage {i}: nothing left to pool")));
                }
                side /= 2;
            }
        }
        Ok(())
    }
}

/// Attribute logits `z ∈ R^{kC}` for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeLogits {
    pub k: usize,
    pub c: usize,
    pub z: Vec<f64>,
}

impl AttributeLogits {
    pub fn new(k: usize, c: usize, z: Vec<f64>) -> Result<Self> {
        if z.len() != k * c {
            return Err(Error::shape("AttributeLogits", "length", k * c, z.len()));
        }
        Ok(AttributeLogits { k, c, z })
    }

    /// Entry of the k×C view: attribute `i` of class `class`.
    pub fn matrix(&self, i: usize, class: usize) -> f64 {
        self.z[class * self.k + i]
    }

    /// Row-major k×C reshaping.
    pub fn to_matrix(&self) -> Vec<f64> {
        let mut m = Vec::with_capacity(self.z.len());
        for i in 0..self.k {
            for class in 0..self.c {
                m.push(self.matrix(i, class));
            }
        }
        m
    }
}

/// The `kC` attribute maps of one image, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeFeatureMaps {
    pub attributes_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl AttributeFeatureMaps {
    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }
}

/// Row-stochastic k×C matrix of per-attribute class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeProbabilities {
    pub k: usize,
    pub c: usize,
    pub p: Vec<f64>,
}

impl AttributeProbabilities {
    pub fn new(k: usize, c: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != k * c || k == 0 || c == 0 {
            return Err(Error::shape("AttributeProbabilities", "length", k * c, p.len()));
        }
        Ok(AttributeProbabilities { k, c, p })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.c..(i + 1) * self.c]
    }

    /// Flattened back to the `kC` label layout (class-major).
    pub fn to_label(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.k * self.c];
        for i in 0..self.k {
            for class in 0..self.c {
                out[class * self.k + i] = self.p[i * self.c + class];
            }
        }
        out
    }
}

/// Σ of the k attribute scores of each class.
pub fn combine_scores(z: &AttributeLogits) -> Vec<f64> {
    combine_scores_with(z, ScoreMode::Logits)
}

pub fn combine_scores_with(z: &AttributeLogits, mode: ScoreMode) -> Vec<f64> {
    z.z.chunks(z.k)
        .map(|block| match mode {
            ScoreMode::Logits => block.iter().sum(),
            ScoreMode::Probabilities => block.iter().map(|&v| engine::sigmoid(v)).sum(),
        })
        .collect()
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Temperature softmax across classes for each attribute row.
pub fn predict_attribute_probs(z: &AttributeLogits, temperature: f64) -> Result<AttributeProbabilities> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let mut p: Vec<f64> = z.to_matrix().into_iter().map(|v| v / temperature).collect();
    for row in p.chunks_mut(z.c) {
        softmax_in_place(row);
    }
    AttributeProbabilities::new(z.k, z.c, p)
}

/// Parameter handles of one forward graph.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug)]
pub struct AttrNet {
    config: AttrNetConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl AttrNet {
    /// He-normal conv weights, zero biases except the head, whose bias starts
    /// at the log-odds of the multi-hot prior `1/C`.
    pub fn new(config: AttrNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut in_ch = config.in_channels;
        for (i, st) in config.stages.iter().enumerate() {
            let fan_in = in_ch * st.kernel * st.kernel;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let shape = [st.out_channels, in_ch, st.kernel, st.kernel];
            names.push(format!("stage{i}.weight"));
            params.push(Tensor::from_fn(&shape, |_| normal.sample(&mut rng)).requires_grad(true));
            names.push(format!("stage{i}.bias"));
            params.push(Tensor::zeros(&[st.out_channels]).requires_grad(true));
            in_ch = st.out_channels;
        }
        let kc = config.head_channels();
        let normal = Normal::new(0.0, (1.0 / in_ch as f64).sqrt()).expect("finite std");
        names.push("head.weight".into());
        params.push(Tensor::from_fn(&[kc, in_ch, 1, 1], |_| normal.sample(&mut rng)).requires_grad(true));
        let prior = if config.num_classes > 1 {
            -((config.num_classes - 1) as f64).ln()
        } else {
            0.0
        };
        names.push("head.bias".into());
        params.push(Tensor::full(&[kc], prior).requires_grad(true));
        Ok(AttrNet {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &AttrNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.params.iter().cloned()).collect()
    }

    pub fn set_params(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        for (name, t) in tensors {
            let idx = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            if t.shape() != self.params[idx].shape() {
                return Err(Error::shape(
                    "set_params",
                    name,
                    format!("{:?}", self.params[idx].shape()),
                    format!("{:?}", t.shape()),
                ));
            }
            self.params[idx] = t.requires_grad(true);
        }
        Ok(())
    }

    /// Pushes parameters onto `g`, trainable or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.param(p) } else { g.input(p.clone()) })
            .collect();
        BoundParams { vars }
    }

    /// Builds the forward pass; returns (logits N×kC, maps N×kC×h×w).
    pub fn forward_graph(&self, g: &mut Graph, params: &BoundParams, x: Var) -> Result<(Var, Var)> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("AttrNet::forward", "input rank", 4, shape.len()));
        }
        if shape[1] != self.config.in_channels {
            return Err(Error::shape("AttrNet::forward", "input channels", self.config.in_channels, shape[1]));
        }
        if shape[2] != self.config.input_side || shape[3] != self.config.input_side {
            return Err(Error::shape(
                "AttrNet::forward",
                "input side",
                self.config.input_side,
                format!("{}x{}", shape[2], shape[3]),
            ));
        }
        let mut h = x;
        for (i, st) in self.config.stages.iter().enumerate() {
            let w = params.vars[2 * i];
            let b = params.vars[2 * i + 1];
            h = g.conv2d(h, w, 1, st.kernel / 2)?;
            h = g.add_channel_bias(h, b)?;
            h = g.relu(h);
            if st.pool {
                h = g.max_pool2d(h, 2, 2)?;
            }
        }
        let n = self.config.stages.len();
        let maps = g.conv2d(h, params.vars[2 * n], 1, 0)?;
        let maps = g.add_channel_bias(maps, params.vars[2 * n + 1])?;
        let logits = g.global_average_pool(maps)?;
        Ok((logits, maps))
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let side = self.config.input_side;
        if img.height() != side || img.width() != side || img.channels() != self.config.in_channels {
            return Err(Error::shape(
                "AttrNet::forward",
                "image",
                format!("{}x{}x{}", side, side, self.config.in_channels),
                format!("{}x{}x{}", img.height(), img.width(), img.channels()),
            ));
        }
        Ok(())
    }

    /// Inference on one image.
    pub fn forward_one(&self, img: &Image) -> Result<(AttributeLogits, AttributeFeatureMaps)> {
        self.check_image(img)?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.input(self.config.input_tensor(img));
        let (logits, maps) = self.forward_graph(&mut g, &params, x)?;
        let (k, c) = (self.config.attributes_per_class, self.config.num_classes);
        let m = g.value(maps);
        Ok((
            AttributeLogits::new(k, c, g.value(logits).data().to_vec())?,
            AttributeFeatureMaps {
                attributes_per_class: k,
                channels: m.shape()[1],
                height: m.shape()[2],
                width: m.shape()[3],
                data: m.data().to_vec(),
            },
        ))
    }

    /// Inference over a batch, fanned out across threads.
    pub fn forward(&self, images: &[Image]) -> Result<Vec<(AttributeLogits, AttributeFeatureMaps)>> {
        images.par_iter().map(|img| self.forward_one(img)).collect()
    }

    pub fn logits(&self, images: &[Image]) -> Result<Vec<AttributeLogits>> {
        images
            .par_iter()
            .map(|img| self.forward_one(img).map(|(z, _)| z))
            .collect()
    }

    /// Class scores for one image under the configured score mode.
    pub fn class_scores(&self, img: &Image) -> Result<Vec<f64>> {
        let (z, _) = self.forward_one(img)?;
        Ok(combine_scores_with(&z, self.config.score_mode))
    }

    /// BCE loss and per-parameter gradients for one image and its soft
    /// `kC` target.
    pub fn loss_and_grads(&self, img: &Image, target: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_image(img)?;
        let kc = self.config.head_channels();
        if target.len() != kc {
            return Err(Error::shape("AttrNet::loss", "target length", kc, target.len()));
        }
        let mut g = Graph::new();
        let params = self.bind(&mut g, true);
        let x = g.input(self.config.input_tensor(img));
        let (logits, _) = self.forward_graph(&mut g, &params, x)?;
        let t = Tensor::new(&[1, kc], target.to_vec())?;
        let loss = g.bce_with_logits(logits, &t)?;
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let out = params
            .vars
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        Ok((value, out))
    }

    /// Mean loss over a batch; gradients are averaged and written into each
    /// parameter's grad buffer. Per-sample work runs in parallel, the
    /// reduction is sequential so results do not depend on thread count.
    pub fn accumulate_batch(&mut self, batch: &[(Image, Vec<f64>)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let per_sample: Vec<(f64, Vec<Vec<f64>>)> = batch
            .par_iter()
            .map(|(img, target)| self.loss_and_grads(img, target))
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut total = vec![Vec::new(); self.params.len()];
        let mut loss = 0.0;
        for (l, grads) in per_sample {
            loss += l;
            for (acc, g) in total.iter_mut().zip(grads) {
                if acc.is_empty() {
                    *acc = g;
                } else {
                    acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
            }
        }
        for (p, mut g) in self.params.iter_mut().zip(total) {
            g.iter_mut().for_each(|v| *v *= scale);
            p.set_grad(g)?;
        }
        Ok(loss * scale)
    }

    /// Writes `<path>` (weights) and `<path>.card.json` (architecture).
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.named_params())?;
        let card = serde_json::to_string_pretty(&self.config)?;
        let card_path = card_path(path);
        std::fs::write(&card_path, card).map_err(|e| Error::io(card_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let card_path = card_path(path);
        let text = std::fs::read_to_string(&card_path).map_err(|e| Error::io(&card_path, e))?;
        let config: AttrNetConfig = serde_json::from_str(&text)?;
        let mut net = AttrNet::new(config, 0)?;
        let tensors = checkpoint::load(path)?;
        let weights: Vec<_> = tensors
            .into_iter()
            .filter(|(n, _)| !n.starts_with("optim.") && !n.starts_with("state."))
            .collect();
        if weights.len() != net.params.len() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("expected {} tensors, found {}", net.params.len(), weights.len()),
            });
        }
        net.set_params(weights)?;
        Ok(net)
    }
}

/// Plain epoch loop over `data`: seeded shuffle, mini-batches, one SGD step
/// per batch. Returns the mean loss of each epoch.
pub fn fit(
    net: &mut AttrNet,
    opt: &mut Sgd,
    data: &[(Image, Vec<f64>)],
    epochs: Range<usize>,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut losses = Vec::new();
    for epoch in epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(seed, "fit-shuffle", epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(Image, Vec<f64>)> = chunk.iter().map(|&i| data[i].clone()).collect();
            total += net.accumulate_batch(&batch)? * chunk.len() as f64;
            opt.step(net.params_mut(), epoch)?;
        }
        losses.push(total / data.len().max(1) as f64);
    }
    Ok(losses)
}

pub fn card_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".card.json");
    PathBuf::from(s)
}
