//! Compact spatio-temporal graph-convolution encoder.
//!
//! Each block applies a spatial graph convolution (`A_norm · X[t] · W`), a
//! per-joint temporal convolution along frames, and a ReLU. The last block's
//! activations are averaged over frames and joints, person streams are
//! averaged, and the resulting F-vector is the visual feature. A linear
//! softmax classifier over the seen classes sits on top.
//!
//! All gradients are derived by hand; see the finite-difference tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{
    argmax, softmax_cross_entropy, unit_normalize_slice, Optimizer, Parameters, Rng, SgdHyper, Tensor,
};
use crate::skeleton::{build_adjacency, normalize_adjacency, validate_sequence, JointTopology, NormalizedAdjacency, SkeletonSequence};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ZSTG";
pub const FEATURES_MAGIC: &[u8; 4] = b"ZFEA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub block_channels: Vec<usize>,
    pub temporal_kernel: usize,
    /// Sequences are zero-padded or center-cropped to this many frames.
    pub frames: usize,
    /// Filled from the seen-class list at training time when zero.
    #[serde(default)]
    pub num_seen_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdHyper,
    /// Center every (joint, axis) input channel and divide by one pooled
    /// standard deviation, both fitted on the training set and then frozen.
    #[serde(default)]
    pub normalize_input: bool,
    /// Epochs after which the learning rate is multiplied by `lr_gamma`.
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_lr_gamma")]
    pub lr_gamma: f64,
}

fn default_lr_gamma() -> f64 {
    0.1
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            block_channels: vec![8, 16, 32],
            temporal_kernel: 3,
            frames: 32,
            num_seen_classes: 0,
            epochs: 80,
            batch_size: 48,
            optimizer: SgdHyper {
                learning_rate: 0.01,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            normalize_input: false,
            lr_milestones: Vec::new(),
            lr_gamma: default_lr_gamma(),
        }
    }
}

impl EncoderConfig {
    /// Full-scale configuration: 300 frames, 9-tap temporal kernel, 256-d features.
    pub fn full_scale() -> Self {
        Self {
            block_channels: vec![64, 64, 64, 64, 128, 128, 128, 256, 256, 256],
            temporal_kernel: 9,
            frames: 300,
            ..Self::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.block_channels.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return Err(Error::Config("block_channels must be nonempty and positive".into()));
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "temporal_kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return Err(Error::Config(format!("lr_gamma must be positive, got {}", self.lr_gamma)));
        }
        self.optimizer.validate()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.optimizer.learning_rate * self.lr_gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    /// `[C_in, C_out]`
    spatial: Tensor,
    /// `[C_out, C_out, K]`, indexed `[out, in, tap]`
    temporal: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    topology: JointTopology,
    adjacency: NormalizedAdjacency,
    neighbors: Vec<Vec<(usize, f64)>>,
    seen_classes: Vec<usize>,
    blocks: Vec<Block>,
    /// `[F, S]`
    classifier: Tensor,
    /// `[S]`
    bias: Tensor,
    /// `[2, V * 3]`: per-channel mean then scale.
    input_norm: Option<Tensor>,
    relu_enabled: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: EncoderConfig,
    topology: JointTopology,
    seen_classes: Vec<usize>,
}

impl Parameters for EncoderModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in &self.blocks {
            out.push(&b.spatial);
            out.push(&b.temporal);
        }
        out.push(&self.classifier);
        out.push(&self.bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            out.push(&mut b.spatial);
            out.push(&mut b.temporal);
        }
        out.push(&mut self.classifier);
        out.push(&mut self.bias);
        out
    }
}

/// Activations of one block for one person stream, kept for backprop.
struct BlockCache {
    /// `A·X`, `[T, V, C_in]`
    mixed: Vec<f64>,
    /// `A·X·W`, `[T, V, C_out]`
    spatial: Vec<f64>,
    /// temporal conv output (pre-ReLU), `[T, V, C_out]`
    pre: Vec<f64>,
}

struct PersonCache {
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
}

impl EncoderModel {
    /// Seeded initialization: block and classifier weights uniform in
    /// `±sqrt(6 / (fan_in + fan_out))`, classifier bias zero.
    pub fn init(config: &EncoderConfig, topology: &JointTopology, seen_classes: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut config = config.clone();
        if config.num_seen_classes == 0 {
            config.num_seen_classes = seen_classes.len();
        }
        config.validate()?;
        if seen_classes.is_empty() || config.num_seen_classes != seen_classes.len() {
            return Err(Error::Config(format!(
                "num_seen_classes {} does not match {} seen classes",
                config.num_seen_classes,
                seen_classes.len()
            )));
        }
        let k = config.temporal_kernel;
        let mut blocks = Vec::with_capacity(config.block_channels.len());
        let mut c_in = 3;
        for &c_out in &config.block_channels {
            blocks.push(Block {
                spatial: glorot(&[c_in, c_out], c_in, c_out, rng),
                temporal: glorot(&[c_out, c_out, k], c_out * k, c_out * k, rng),
            });
            c_in = c_out;
        }
        let f = config.feature_dim();
        let s = seen_classes.len();
        let classifier = glorot(&[f, s], f, s, rng);
        let adjacency = normalize_adjacency(&build_adjacency(topology)?)?;
        Ok(Self {
            neighbors: neighbor_lists(&adjacency),
            adjacency,
            topology: topology.clone(),
            seen_classes: seen_classes.to_vec(),
            blocks,
            classifier,
            bias: Tensor::zeros(&[s]),
            input_norm: None,
            relu_enabled: true,
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn topology(&self) -> &JointTopology {
        &self.topology
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        &self.adjacency
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.seen_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn classifier_bias(&self) -> &Tensor {
        &self.bias
    }

    /// Disables the block nonlinearity; used to test the linear path.
    pub fn set_relu_enabled(&mut self, enabled: bool) {
        self.relu_enabled = enabled;
    }

    /// Per-person `[frames, joints, 3]` slabs after padding/cropping to the configured frame count.
    fn prepare(&self, seq: &SkeletonSequence) -> Result<Vec<Vec<f64>>> {
        let v = self.topology.joint_count();
        if seq.joints() != v || seq.dims()[3] != 3 {
            return Err(Error::Shape(format!(
                "sequence dims {:?} do not match topology with {v} joints",
                seq.dims()
            )));
        }
        let target = self.config.frames;
        let frames = seq.frames();
        let row = v * 3;
        let mut out = Vec::with_capacity(seq.persons());
        for p in 0..seq.persons() {
            let src = seq.person(p);
            let mut slab = vec![0.0; target * row];
            let kept = frames.min(target);
            if frames >= target {
                let start = (frames - target) / 2;
                slab.copy_from_slice(&src[start * row..(start + target) * row]);
            } else {
                slab[..frames * row].copy_from_slice(src);
            }
            if let Some(norm) = &self.input_norm {
                let (mean, std) = norm.data().split_at(row);
                for frame in slab[..kept * row].chunks_mut(row) {
                    for (i, x) in frame.iter_mut().enumerate() {
                        *x = (*x - mean[i]) / std[i];
                    }
                }
            }
            if let Some(i) = slab.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("input coordinate {i} of person {p}")));
            }
            out.push(slab);
        }
        Ok(out)
    }

    fn forward_person(&self, input: &[f64]) -> PersonCache {
        let t = self.config.frames;
        let v = self.topology.joint_count();
        let k = self.config.temporal_kernel;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut x = input.to_vec();
        let mut c_in = 3;
        for block in &self.blocks {
            let c_out = block.spatial.dims()[1];
            let mixed = graph_mix(&x, t, v, c_in, &self.neighbors);
            let spatial = channel_mix(&mixed, t * v, c_in, block.spatial.data(), c_out);
            let pre = temporal_forward(&spatial, t, v, c_out, block.temporal.data(), k);
            x = if self.relu_enabled {
                pre.iter().map(|&u| if u > 0.0 { u } else { 0.0 }).collect()
            } else {
                pre.clone()
            };
            caches.push(BlockCache { mixed, spatial, pre });
            c_in = c_out;
        }
        let pooled = mean_pool(&x, t * v, c_in);
        PersonCache { blocks: caches, pooled }
    }

    fn logits(&self, feature: &[f64]) -> Vec<f64> {
        let s = self.seen_classes.len();
        let w = self.classifier.data();
        let mut out = self.bias.data().to_vec();
        for (i, &fi) in feature.iter().enumerate() {
            if fi != 0.0 {
                for (o, z) in out.iter_mut().enumerate() {
                    *z += fi * w[i * s + o];
                }
            }
        }
        out
    }

    /// Logits over the seen classes (in [`Self::seen_classes`] order) and the pooled feature.
    pub fn forward(&self, seq: &SkeletonSequence) -> Result<(Tensor, Tensor)> {
        let feature = self.feature(seq)?;
        let logits = self.logits(&feature);
        Ok((Tensor::vector(logits)?, Tensor::vector(feature)?))
    }

    fn feature(&self, seq: &SkeletonSequence) -> Result<Vec<f64>> {
        let persons = self.prepare(seq)?;
        let f = self.feature_dim();
        let mut feature = vec![0.0; f];
        for slab in &persons {
            let cache = self.forward_person(slab);
            for (a, b) in feature.iter_mut().zip(&cache.pooled) {
                *a += b;
            }
        }
        let inv = 1.0 / persons.len() as f64;
        feature.iter_mut().for_each(|x| *x *= inv);
        Ok(feature)
    }

    /// Pre-activation output of every block for the first person stream.
    pub fn preactivations(&self, seq: &SkeletonSequence) -> Result<Vec<Tensor>> {
        let persons = self.prepare(seq)?;
        let t = self.config.frames;
        let v = self.topology.joint_count();
        let cache = self.forward_person(&persons[0]);
        cache
            .blocks
            .into_iter()
            .zip(&self.config.block_channels)
            .map(|(b, &c)| Tensor::new(vec![t, v, c], b.pre))
            .collect()
    }

    /// Global class index predicted by the seen-class softmax.
    pub fn classify(&self, seq: &SkeletonSequence) -> Result<usize> {
        let feature = self.feature(seq)?;
        Ok(self.seen_classes[argmax(&self.logits(&feature))])
    }

    fn class_position(&self, label: usize) -> Option<usize> {
        self.seen_classes.iter().position(|&c| c == label)
    }

    /// Softmax cross-entropy of one sample and its gradient, accumulated into `grads` scaled by `weight`.
    fn accumulate_gradient(&self, seq: &SkeletonSequence, grads: &mut [Tensor], weight: f64) -> Result<f64> {
        let target = self.class_position(seq.label_index()).ok_or_else(|| {
            Error::contamination(
                "train_encoder",
                format!("sample with class {} is not a seen class", seq.label_index()),
            )
        })?;
        let persons = self.prepare(seq)?;
        let caches: Vec<PersonCache> = persons.iter().map(|p| self.forward_person(p)).collect();
        let f = self.feature_dim();
        let s = self.seen_classes.len();
        let inv_p = 1.0 / persons.len() as f64;
        let mut feature = vec![0.0; f];
        for c in &caches {
            for (a, b) in feature.iter_mut().zip(&c.pooled) {
                *a += b * inv_p;
            }
        }
        let logits = self.logits(&feature);
        let (loss, dlogits) = softmax_cross_entropy(&logits, target);

        let nb = self.blocks.len();
        {
            let (dw, rest) = grads[2 * nb..].split_at_mut(1);
            let dw = dw[0].data_mut();
            let db = rest[0].data_mut();
            for o in 0..s {
                db[o] += weight * dlogits[o];
            }
            for i in 0..f {
                if feature[i] != 0.0 {
                    for o in 0..s {
                        dw[i * s + o] += weight * feature[i] * dlogits[o];
                    }
                }
            }
        }
        let w = self.classifier.data();
        let dfeature: Vec<f64> = (0..f)
            .map(|i| (0..s).map(|o| w[i * s + o] * dlogits[o]).sum::<f64>())
            .collect();

        let t = self.config.frames;
        let v = self.topology.joint_count();
        let k = self.config.temporal_kernel;
        let rows = t * v;
        for cache in &caches {
            // d pooled / d H = 1 / (T V) for every position
            let scale = weight * inv_p / rows as f64;
            let mut dh: Vec<f64> = Vec::with_capacity(rows * f);
            for _ in 0..rows {
                dh.extend(dfeature.iter().map(|d| d * scale));
            }
            for b in (0..nb).rev() {
                let block = &self.blocks[b];
                let bc = &cache.blocks[b];
                let c_out = block.spatial.dims()[1];
                let c_in = block.spatial.dims()[0];
                let mut du = dh;
                if self.relu_enabled {
                    for (d, &u) in du.iter_mut().zip(&bc.pre) {
                        if u <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                let ds = temporal_backward(
                    &du,
                    &bc.spatial,
                    t,
                    v,
                    c_out,
                    block.temporal.data(),
                    k,
                    grads[2 * b + 1].data_mut(),
                );
                let dmixed = channel_backward(&ds, &bc.mixed, rows, c_in, block.spatial.data(), c_out, grads[2 * b].data_mut(), b > 0);
                if b > 0 {
                    dh = graph_mix(&dmixed, t, v, c_in, &self.neighbors);
                } else {
                    dh = Vec::new();
                }
            }
        }
        Ok(loss)
    }

    /// Mean cross-entropy over `data` and its gradient for every parameter tensor.
    pub fn loss_and_gradient(&self, data: &[SkeletonSequence]) -> Result<(f64, Vec<Tensor>)> {
        if data.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let mut grads: Vec<Tensor> = self.tensors().iter().map(|t| Tensor::zeros(t.dims())).collect();
        let w = 1.0 / data.len() as f64;
        let mut loss = 0.0;
        for seq in data {
            loss += w * self.accumulate_gradient(seq, &mut grads, w)?;
        }
        Ok((loss, grads))
    }

    /// Per-channel input statistics, `[2, V * 3]`, once fitted.
    pub fn input_norm(&self) -> Option<&Tensor> {
        self.input_norm.as_ref()
    }

    /// Fits the frozen input normalization on `data` (real frames only,
    /// after cropping): per-channel means and the root mean per-channel
    /// variance as a shared scale.
    /// Values are rounded through `f32` so a checkpoint reproduces them.
    pub fn fit_input_norm(&mut self, data: &[SkeletonSequence]) -> Result<()> {
        let row = self.topology.joint_count() * 3;
        let mut sum = vec![0.0; row];
        let mut sq = vec![0.0; row];
        let mut n = 0usize;
        for seq in data {
            let kept = seq.frames().min(self.config.frames);
            let start = (seq.frames() - kept) / 2;
            for p in 0..seq.persons() {
                let slab = &seq.person(p)[start * row..(start + kept) * row];
                for frame in slab.chunks(row) {
                    for (i, &x) in frame.iter().enumerate() {
                        sum[i] += x;
                        sq[i] += x * x;
                    }
                }
                n += kept;
            }
        }
        if n == 0 {
            return Err(Error::Data("no frames to fit input normalization".into()));
        }
        let means: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let var = means.iter().zip(&sq).map(|(m, q)| (q / n as f64 - m * m).max(0.0)).sum::<f64>() / row as f64;
        let std = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
        let mut stats: Vec<f64> = means.iter().map(|&m| m as f32 as f64).collect();
        stats.resize(2 * row, std as f32 as f64);
        self.input_norm = Some(Tensor::matrix(2, row, stats)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            topology: self.topology.clone(),
            seen_classes: self.seen_classes.clone(),
        };
        let mut tensors = self.tensors();
        if self.config.normalize_input {
            match &self.input_norm {
                Some(norm) => tensors.push(norm),
                None => return Err(Error::Config("normalize_input is set but no statistics were fitted".into())),
            }
        }
        io::write_checkpoint(path, CHECKPOINT_MAGIC, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, mut tensors): (CheckpointHeader, Vec<Tensor>) = io::read_checkpoint(path, CHECKPOINT_MAGIC)?;
        let mut model = Self::init(&header.config, &header.topology, &header.seen_classes, &mut Rng::new(0))?;
        let mut expected: Vec<Vec<usize>> = model.tensors().iter().map(|t| t.dims().to_vec()).collect();
        if header.config.normalize_input {
            expected.push(vec![2, model.topology.joint_count() * 3]);
        }
        let got: Vec<Vec<usize>> = tensors.iter().map(|t| t.dims().to_vec()).collect();
        if expected != got {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("tensor dims {got:?} do not match config {expected:?}"),
            });
        }
        if header.config.normalize_input {
            model.input_norm = tensors.pop();
        }
        for (dst, src) in model.tensors_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        Ok(model)
    }

    /// Rounds every weight through `f32`, matching a save/load cycle.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.round_to_f32();
        }
    }
}

fn glorot(dims: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(dims);
    for x in t.data_mut() {
        *x = rng.uniform_range(-bound, bound);
    }
    t
}

fn neighbor_lists(a: &NormalizedAdjacency) -> Vec<Vec<(usize, f64)>> {
    let n = a.size();
    (0..n)
        .map(|i| (0..n).filter(|&j| a.get(i, j) != 0.0).map(|j| (j, a.get(i, j))).collect())
        .collect()
}

/// `out[t, i, :] = sum_j A[i, j] x[t, j, :]`
fn graph_mix(x: &[f64], t: usize, v: usize, c: usize, neighbors: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let mut out = vec![0.0; t * v * c];
    for ti in 0..t {
        let frame = &x[ti * v * c..(ti + 1) * v * c];
        let dst = &mut out[ti * v * c..(ti + 1) * v * c];
        for (i, nbrs) in neighbors.iter().enumerate() {
            let row = &mut dst[i * c..(i + 1) * c];
            for &(j, a) in nbrs {
                for (o, xj) in row.iter_mut().zip(&frame[j * c..(j + 1) * c]) {
                    *o += a * xj;
                }
            }
        }
    }
    out
}

/// `out[r, :] = y[r, :] · W` with `W` of dims `[c_in, c_out]`.
fn channel_mix(y: &[f64], rows: usize, c_in: usize, w: &[f64], c_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * c_out];
    for r in 0..rows {
        let yr = &y[r * c_in..(r + 1) * c_in];
        let or = &mut out[r * c_out..(r + 1) * c_out];
        for (i, &yi) in yr.iter().enumerate() {
            if yi != 0.0 {
                for (o, wv) in or.iter_mut().zip(&w[i * c_out..(i + 1) * c_out]) {
                    *o += yi * wv;
                }
            }
        }
    }
    out
}

/// Accumulates `dW` and returns `dY` (when `need_input_grad`).
#[allow(clippy::too_many_arguments)]
fn channel_backward(
    ds: &[f64],
    y: &[f64],
    rows: usize,
    c_in: usize,
    w: &[f64],
    c_out: usize,
    dw: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let mut dy = if need_input_grad { vec![0.0; rows * c_in] } else { Vec::new() };
    for r in 0..rows {
        let dsr = &ds[r * c_out..(r + 1) * c_out];
        let yr = &y[r * c_in..(r + 1) * c_in];
        for i in 0..c_in {
            let yi = yr[i];
            let wrow = &w[i * c_out..(i + 1) * c_out];
            if yi != 0.0 {
                let dwrow = &mut dw[i * c_out..(i + 1) * c_out];
                for (d, g) in dwrow.iter_mut().zip(dsr) {
                    *d += yi * g;
                }
            }
            if need_input_grad {
                dy[r * c_in + i] = wrow.iter().zip(dsr).map(|(a, b)| a * b).sum();
            }
        }
    }
    dy
}

/// Kernel re-laid out as `[tap][in][out]` for contiguous inner loops.
fn kernel_by_tap(kernel: &[f64], c: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * c * c];
    for o in 0..c {
        for i in 0..c {
            for tap in 0..k {
                out[(tap * c + i) * c + o] = kernel[(o * c + i) * k + tap];
            }
        }
    }
    out
}

/// `u[t, v, o] = sum_{tap, i} K[o, i, tap] s[t + tap - r, v, i]`, zero padded, `r = (K - 1) / 2`.
fn temporal_forward(s: &[f64], t: usize, v: usize, c: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let kt = kernel_by_tap(kernel, c, k);
    let r = (k - 1) / 2;
    let mut u = vec![0.0; t * v * c];
    for ti in 0..t {
        for tap in 0..k {
            let src = ti + tap;
            if src < r || src - r >= t {
                continue;
            }
            let src = src - r;
            let ktap = &kt[tap * c * c..(tap + 1) * c * c];
            for vi in 0..v {
                let srow = &s[(src * v + vi) * c..(src * v + vi + 1) * c];
                let urow = &mut u[(ti * v + vi) * c..(ti * v + vi + 1) * c];
                for (i, &si) in srow.iter().enumerate() {
                    if si != 0.0 {
                        for (uo, kv) in urow.iter_mut().zip(&ktap[i * c..(i + 1) * c]) {
                            *uo += si * kv;
                        }
                    }
                }
            }
        }
    }
    u
}

/// Accumulates `dK` and returns `dS`.
#[allow(clippy::too_many_arguments)]
fn temporal_backward(du: &[f64], s: &[f64], t: usize, v: usize, c: usize, kernel: &[f64], k: usize, dk: &mut [f64]) -> Vec<f64> {
    let kt = kernel_by_tap(kernel, c, k);
    let mut dkt = vec![0.0; k * c * c];
    let r = (k - 1) / 2;
    let mut ds = vec![0.0; t * v * c];
    for ti in 0..t {
        for tap in 0..k {
            let src = ti + tap;
            if src < r || src - r >= t {
                continue;
            }
            let src = src - r;
            let ktap = &kt[tap * c * c..(tap + 1) * c * c];
            let dktap = &mut dkt[tap * c * c..(tap + 1) * c * c];
            for vi in 0..v {
                let durow = &du[(ti * v + vi) * c..(ti * v + vi + 1) * c];
                if durow.iter().all(|&d| d == 0.0) {
                    continue;
                }
                let srow = &s[(src * v + vi) * c..(src * v + vi + 1) * c];
                let dsrow = &mut ds[(src * v + vi) * c..(src * v + vi + 1) * c];
                for i in 0..c {
                    let krow = &ktap[i * c..(i + 1) * c];
                    let mut acc = 0.0;
                    for (kv, d) in krow.iter().zip(durow) {
                        acc += kv * d;
                    }
                    dsrow[i] += acc;
                    let si = srow[i];
                    if si != 0.0 {
                        for (g, d) in dktap[i * c..(i + 1) * c].iter_mut().zip(durow) {
                            *g += si * d;
                        }
                    }
                }
            }
        }
    }
    for o in 0..c {
        for i in 0..c {
            for tap in 0..k {
                dk[(o * c + i) * k + tap] += dkt[(tap * c + i) * c + o];
            }
        }
    }
    ds
}

fn mean_pool(x: &[f64], rows: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for r in 0..rows {
        for (o, xv) in out.iter_mut().zip(&x[r * c..(r + 1) * c]) {
            *o += xv;
        }
    }
    let inv = 1.0 / rows as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// Spatial graph convolution of `x` (`[T, V, C_in]`): `out[t] = A_norm · x[t] · W`.
pub fn spatial_graph_conv(x: &Tensor, adjacency: &NormalizedAdjacency, w: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 2 {
        return Err(Error::Shape("spatial_graph_conv needs x [T,V,C_in] and W [C_in,C_out]".into()));
    }
    let (t, v, c_in) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    if v != adjacency.size() {
        return Err(Error::Shape(format!("x has {v} joints, adjacency has {}", adjacency.size())));
    }
    if w.dims()[0] != c_in {
        return Err(Error::Shape(format!("W has {} input channels, x has {c_in}", w.dims()[0])));
    }
    let c_out = w.dims()[1];
    let mixed = graph_mix(x.data(), t, v, c_in, &neighbor_lists(adjacency));
    Tensor::new(vec![t, v, c_out], channel_mix(&mixed, t * v, c_in, w.data(), c_out))
}

/// Per-joint temporal convolution of `x` (`[T, V, C]`) with `kernel` (`[C, C, K]`), zero padded, length preserving.
pub fn temporal_conv(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 || kernel.rank() != 3 {
        return Err(Error::Shape("temporal_conv needs x [T,V,C] and kernel [C,C,K]".into()));
    }
    let (t, v, c) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let k = kernel.dims()[2];
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("temporal kernel size must be odd, got {k}")));
    }
    if kernel.dims()[0] != c || kernel.dims()[1] != c {
        return Err(Error::Shape(format!("kernel dims {:?} for {c} channels", kernel.dims())));
    }
    Tensor::new(vec![t, v, c], temporal_forward(x.data(), t, v, c, kernel.data(), k))
}

/// Encoder forward pass: seen-class logits and the pooled visual feature.
pub fn encoder_forward(model: &EncoderModel, seq: &SkeletonSequence) -> Result<(Tensor, Tensor)> {
    model.forward(seq)
}

/// Per-epoch mean training loss and accuracy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

/// Trains the encoder with mini-batch momentum SGD on softmax cross-entropy
/// over the seen classes. Any sample whose class is not seen is a hard error.
pub fn train_encoder(
    data: &[SkeletonSequence],
    config: &EncoderConfig,
    topology: &JointTopology,
    seen_classes: &[usize],
    rng: &mut Rng,
) -> Result<EncoderModel> {
    train_encoder_logged(data, config, topology, seen_classes, rng).map(|(m, _)| m)
}

pub fn train_encoder_logged(
    data: &[SkeletonSequence],
    config: &EncoderConfig,
    topology: &JointTopology,
    seen_classes: &[usize],
    rng: &mut Rng,
) -> Result<(EncoderModel, TrainingLog)> {
    if data.is_empty() {
        return Err(Error::Data("encoder training set is empty".into()));
    }
    if let Some(bad) = data.iter().find(|s| !seen_classes.contains(&s.label_index())) {
        return Err(Error::contamination(
            "train_encoder",
            format!("training data contains a sample of unseen class {}", bad.label_index()),
        ));
    }
    for (i, seq) in data.iter().enumerate() {
        validate_sequence(seq, topology, None).map_err(|d| Error::Data(format!("sample {i}: {d}")))?;
    }
    let mut model = EncoderModel::init(config, topology, seen_classes, rng)?;
    if model.config.normalize_input {
        model.fit_input_norm(data)?;
    }
    let mut optimizer = Optimizer::sgd(model.config.optimizer, &model.tensors());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainingLog::default();
    let batch_size = model.config.batch_size;
    for epoch in 0..model.config.epochs {
        optimizer.set_sgd_learning_rate(model.config.learning_rate_at(epoch));
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<SkeletonSequence> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = model.loss_and_gradient(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("encoder loss at epoch {epoch}")));
            }
            total += loss * chunk.len() as f64;
            optimizer.step(model.tensors_mut(), &grads)?;
        }
        if !model.is_finite() {
            return Err(Error::NonFinite(format!("encoder weights at epoch {epoch}")));
        }
        log.epoch_loss.push(total / data.len() as f64);
        log.epoch_accuracy.push(training_accuracy(&model, data)?);
    }
    Ok((model, log))
}

/// Fraction of `data` classified correctly by the seen-class softmax.
pub fn training_accuracy(model: &EncoderModel, data: &[SkeletonSequence]) -> Result<f64> {
    let mut correct = 0usize;
    for seq in data {
        if model.classify(seq)? == seq.label_index() {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Encoder features with aligned class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureMatrix {
    pub features: Tensor,
    pub label_indices: Vec<usize>,
    pub unit_normalized: bool,
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    label_indices: Vec<usize>,
    unit_normalized: bool,
}

impl VisualFeatureMatrix {
    pub fn new(features: Tensor, label_indices: Vec<usize>, unit_normalized: bool) -> Result<Self> {
        if features.rank() != 2 || features.rows() != label_indices.len() {
            return Err(Error::Shape(format!(
                "feature matrix {:?} with {} labels",
                features.dims(),
                label_indices.len()
            )));
        }
        Ok(Self {
            features,
            label_indices,
            unit_normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.label_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Rows whose label satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.label_indices[i])).collect();
        if idx.is_empty() {
            return Err(Error::Data("feature filter selected no rows".into()));
        }
        let f = self.dim();
        let data = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self::new(
            Tensor::matrix(idx.len(), f, data)?,
            idx.iter().map(|&i| self.label_indices[i]).collect(),
            self.unit_normalized,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = FeatureHeader {
            label_indices: self.label_indices.clone(),
            unit_normalized: self.unit_normalized,
        };
        io::write_checkpoint(path, FEATURES_MAGIC, &header, &[&self.features])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, mut tensors): (FeatureHeader, Vec<Tensor>) = io::read_checkpoint(path, FEATURES_MAGIC)?;
        if tensors.len() != 1 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "feature file must hold one tensor".into(),
            });
        }
        Self::new(tensors.remove(0), header.label_indices, header.unit_normalized)
    }
}

/// Encodes every sample; row `i` is the feature of `data[i]`.
pub fn extract_features(model: &EncoderModel, data: &[SkeletonSequence], normalize: bool) -> Result<VisualFeatureMatrix> {
    if data.is_empty() {
        return Err(Error::Data("no samples to encode".into()));
    }
    let f = model.feature_dim();
    let mut rows = Vec::with_capacity(data.len() * f);
    for seq in data {
        let feature = model.feature(seq)?;
        if normalize {
            rows.extend(unit_normalize_slice(&feature)?);
        } else {
            rows.extend(feature);
        }
    }
    VisualFeatureMatrix::new(
        Tensor::matrix(data.len(), f, rows)?,
        data.iter().map(|s| s.label_index()).collect(),
        normalize,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;

    fn random_tensor(dims: &[usize], rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(dims);
        t.data_mut().iter_mut().for_each(|x| *x = rng.normal());
        t
    }

    fn small_config(channels: Vec<usize>, k: usize, frames: usize) -> EncoderConfig {
        EncoderConfig {
            block_channels: channels,
            temporal_kernel: k,
            frames,
            num_seen_classes: 0,
            epochs: 0,
            batch_size: 4,
            optimizer: SgdHyper {
                learning_rate: 0.01,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            normalize_input: false,
            ..EncoderConfig::default()
        }
    }

    fn random_sequence(persons: usize, frames: usize, joints: usize, label: usize, rng: &mut Rng) -> SkeletonSequence {
        let mut s = SkeletonSequence::zeros(persons, frames, joints, label);
        s.coords_mut().iter_mut().for_each(|x| *x = rng.normal());
        s
    }

    #[test]
    fn single_node_identity_conv() {
        let topo = JointTopology::new(1, vec![], None).unwrap();
        let a = normalize_adjacency(&build_adjacency(&topo).unwrap()).unwrap();
        let mut rng = Rng::new(1);
        let x = random_tensor(&[4, 1, 3], &mut rng);
        let w = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(spatial_graph_conv(&x, &a, &w).unwrap(), x);
    }

    #[test]
    fn two_node_conv_averages() {
        let topo = JointTopology::new(2, vec![[0, 1]], None).unwrap();
        let a = normalize_adjacency(&build_adjacency(&topo).unwrap()).unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 10.0, 3.0, 30.0]).unwrap();
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = spatial_graph_conv(&x, &a, &w).unwrap();
        for (got, want) in y.data().iter().zip([2.0, 20.0, 2.0, 20.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_conv_matches_triple_loop() {
        let mut rng = Rng::new(5);
        let topo = JointTopology::chain(3).unwrap();
        let a = normalize_adjacency(&build_adjacency(&topo).unwrap()).unwrap();
        let (t, v, ci, co) = (4, 3, 2, 5);
        let x = random_tensor(&[t, v, ci], &mut rng);
        let w = random_tensor(&[ci, co], &mut rng);
        let y = spatial_graph_conv(&x, &a, &w).unwrap();
        for ti in 0..t {
            for i in 0..v {
                for o in 0..co {
                    let mut acc = 0.0;
                    for j in 0..v {
                        for c in 0..ci {
                            acc += a.get(i, j) * x.data()[(ti * v + j) * ci + c] * w.data()[c * co + o];
                        }
                    }
                    assert!((acc - y.data()[(ti * v + i) * co + o]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn spatial_conv_shape_errors() {
        let topo = JointTopology::chain(3).unwrap();
        let a = normalize_adjacency(&build_adjacency(&topo).unwrap()).unwrap();
        let x = Tensor::zeros(&[2, 4, 3]);
        let w = Tensor::zeros(&[3, 2]);
        assert!(matches!(spatial_graph_conv(&x, &a, &w), Err(Error::Shape(_))));
        let x = Tensor::zeros(&[2, 3, 2]);
        assert!(matches!(spatial_graph_conv(&x, &a, &w), Err(Error::Shape(_))));
    }

    fn identity_kernel(c: usize, k: usize) -> Tensor {
        let mut kern = Tensor::zeros(&[c, c, k]);
        for i in 0..c {
            kern.data_mut()[(i * c + i) * k + (k - 1) / 2] = 1.0;
        }
        kern
    }

    #[test]
    fn temporal_identity_kernels() {
        let mut rng = Rng::new(9);
        let x = random_tensor(&[5, 2, 3], &mut rng);
        assert_eq!(temporal_conv(&x, &identity_kernel(3, 1)).unwrap(), x);
        assert_eq!(temporal_conv(&x, &identity_kernel(3, 3)).unwrap(), x);
    }

    #[test]
    fn temporal_even_kernel_rejected() {
        let x = Tensor::zeros(&[5, 2, 3]);
        let k = Tensor::zeros(&[3, 3, 2]);
        assert!(matches!(temporal_conv(&x, &k), Err(Error::Config(_))));
    }

    #[test]
    fn temporal_conv_matches_direct_sum() {
        let mut rng = Rng::new(13);
        let (t, v, c, k) = (6, 3, 4, 5);
        let x = random_tensor(&[t, v, c], &mut rng);
        let kern = random_tensor(&[c, c, k], &mut rng);
        let y = temporal_conv(&x, &kern).unwrap();
        let r = (k - 1) as isize / 2;
        for ti in 0..t as isize {
            for vi in 0..v {
                for o in 0..c {
                    let mut acc = 0.0;
                    for tap in 0..k as isize {
                        let src = ti + tap - r;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        for i in 0..c {
                            acc += kern.data()[(o * c + i) * k + tap as usize]
                                * x.data()[((src as usize) * v + vi) * c + i];
                        }
                    }
                    let got = y.data()[((ti as usize) * v + vi) * c + o];
                    assert!((acc - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_input_gives_bias_logits() {
        let mut rng = Rng::new(2);
        let topo = JointTopology::chain(4).unwrap();
        let mut model = EncoderModel::init(&small_config(vec![3, 5], 3, 6), &topo, &[0, 2, 3], &mut rng).unwrap();
        model.bias = Tensor::vector(vec![0.1, -0.2, 0.3]).unwrap();
        let seq = SkeletonSequence::zeros(2, 6, 4, 0);
        let (logits, feature) = encoder_forward(&model, &seq).unwrap();
        assert_eq!(logits.data(), model.bias.data());
        assert!(feature.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_block_scales_with_input() {
        let mut rng = Rng::new(3);
        let topo = JointTopology::chain(4).unwrap();
        let mut model = EncoderModel::init(&small_config(vec![5], 3, 6), &topo, &[0, 1], &mut rng).unwrap();
        model.set_relu_enabled(false);
        let seq = random_sequence(1, 6, 4, 0, &mut rng);
        let mut doubled = seq.clone();
        doubled.coords_mut().iter_mut().for_each(|x| *x *= 2.0);
        let a = model.preactivations(&seq).unwrap();
        let b = model.preactivations(&doubled).unwrap();
        for (x, y) in a[0].data().iter().zip(b[0].data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn frames_are_padded_and_cropped() {
        let mut rng = Rng::new(4);
        let topo = JointTopology::chain(3).unwrap();
        let model = EncoderModel::init(&small_config(vec![4], 3, 6), &topo, &[0, 1], &mut rng).unwrap();
        let short = random_sequence(1, 4, 3, 0, &mut rng);
        let mut padded = SkeletonSequence::zeros(1, 6, 3, 0);
        padded.coords_mut()[..short.coords().len()].copy_from_slice(short.coords());
        assert_eq!(model.forward(&short).unwrap(), model.forward(&padded).unwrap());

        let long = random_sequence(1, 9, 3, 0, &mut rng);
        let start = (9 - 6) / 2;
        let row = 3 * 3;
        let cropped = SkeletonSequence::new([1, 6, 3, 3], long.coords()[start * row..(start + 6) * row].to_vec(), 0).unwrap();
        assert_eq!(model.forward(&long).unwrap(), model.forward(&cropped).unwrap());
    }

    /// Resamples inputs until no ReLU pre-activation is within `margin` of zero.
    fn relu_safe_instance(seed: u64, margin: f64) -> (EncoderModel, Vec<SkeletonSequence>) {
        let topo = JointTopology::chain(4).unwrap();
        let mut rng = Rng::new(seed);
        loop {
            let model = EncoderModel::init(&small_config(vec![3, 4], 3, 5), &topo, &[1, 4, 6], &mut rng).unwrap();
            let labels = [1, 4, 6];
            let data: Vec<SkeletonSequence> = (0..3)
                .map(|i| random_sequence(2, 5, 4, labels[i], &mut rng))
                .collect();
            let safe = data.iter().all(|s| {
                model
                    .prepare(s)
                    .unwrap()
                    .iter()
                    .all(|p| model.forward_person(p).blocks.iter().all(|b| b.pre.iter().all(|u| u.abs() > margin)))
            });
            if safe {
                return (model, data);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let (model, data) = relu_safe_instance(seed, 1e-3);
            let params = model.flat_params();
            let err = finite_difference_check(
                |p| {
                    let mut m = model.clone();
                    m.set_flat_params(p.data())?;
                    let (loss, grads) = m.loss_and_gradient(&data)?;
                    let refs: Vec<&Tensor> = grads.iter().collect();
                    Ok((loss, crate::numerics::flatten(&refs)))
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let topo = JointTopology::chain(3).unwrap();
        let mut rng = Rng::new(7);
        let data: Vec<_> = (0..4).map(|i| random_sequence(1, 5, 3, i % 2, &mut rng)).collect();
        let cfg = small_config(vec![4], 3, 5);
        let trained = train_encoder(&data, &cfg, &topo, &[0, 1], &mut Rng::new(8)).unwrap();
        let init = EncoderModel::init(&cfg, &topo, &[0, 1], &mut Rng::new(8)).unwrap();
        assert_eq!(trained, init);
        let before = init.loss_and_gradient(&data).unwrap().0;
        let after = trained.loss_and_gradient(&data).unwrap().0;
        assert_eq!(before, after);
    }

    #[test]
    fn unseen_sample_is_contamination() {
        let topo = JointTopology::chain(3).unwrap();
        let mut rng = Rng::new(7);
        let data: Vec<_> = (0..4).map(|i| random_sequence(1, 5, 3, i, &mut rng)).collect();
        let err = train_encoder(&data, &small_config(vec![4], 3, 5), &topo, &[0, 1, 2], &mut rng).unwrap_err();
        assert!(matches!(err, Error::Contamination { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn unseen_samples_never_classified_correctly() {
        let topo = JointTopology::chain(3).unwrap();
        let mut rng = Rng::new(21);
        let model = EncoderModel::init(&small_config(vec![4], 3, 5), &topo, &[0, 1], &mut rng).unwrap();
        for _ in 0..50 {
            let seq = random_sequence(1, 5, 3, 2, &mut rng);
            assert_ne!(model.classify(&seq).unwrap(), 2);
        }
    }

    #[test]
    fn features_are_deterministic_and_normalized() {
        let topo = JointTopology::chain(3).unwrap();
        let mut rng = Rng::new(17);
        let model = EncoderModel::init(&small_config(vec![4, 6], 3, 5), &topo, &[0, 1], &mut rng).unwrap();
        let seq = random_sequence(1, 5, 3, 0, &mut rng);
        let data = vec![seq.clone(), seq.clone(), random_sequence(1, 5, 3, 1, &mut rng)];
        let m = extract_features(&model, &data, true).unwrap();
        assert_eq!(m.features.dims(), &[3, 6]);
        assert_eq!(m.label_indices, vec![0, 0, 1]);
        assert_eq!(m.row(0), m.row(1));
        for i in 0..3 {
            let n: f64 = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_f32_exact() {
        let topo = JointTopology::chain(3).unwrap();
        let mut rng = Rng::new(23);
        let mut model = EncoderModel::init(&small_config(vec![4, 6], 3, 5), &topo, &[0, 2], &mut rng).unwrap();
        model.round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"ZSTG");
        assert_eq!(EncoderModel::load(&path).unwrap(), model);
    }

    #[test]
    fn input_norm_matches_manual_standardization() {
        let topo = JointTopology::chain(3).unwrap();
        let mut rng = Rng::new(41);
        let data: Vec<SkeletonSequence> = (0..4).map(|i| random_sequence(1, 5, 3, i % 2, &mut rng)).collect();
        let mut cfg = small_config(vec![4, 3], 3, 5);
        cfg.normalize_input = true;
        let mut model = EncoderModel::init(&cfg, &topo, &[0, 1], &mut Rng::new(5)).unwrap();
        model.fit_input_norm(&data).unwrap();

        let row = 9;
        let n = (data.len() * 5) as f64;
        let mut mean = vec![0.0; row];
        for seq in &data {
            for (i, x) in seq.coords().iter().enumerate() {
                mean[i % row] += x / n;
            }
        }
        let mut var = 0.0;
        for seq in &data {
            for (i, x) in seq.coords().iter().enumerate() {
                var += (x - mean[i % row]).powi(2) / (n * row as f64);
            }
        }
        let norm = model.input_norm().unwrap().data().to_vec();
        for i in 0..row {
            assert!((norm[i] - mean[i]).abs() < 1e-6);
            assert!((norm[row + i] - var.sqrt()).abs() < 1e-6);
        }

        let mut plain = model.clone();
        plain.input_norm = None;
        let mut manual = data[1].clone();
        for (i, x) in manual.coords_mut().iter_mut().enumerate() {
            *x = (*x - norm[i % row]) / norm[row + i % row];
        }
        assert_eq!(model.forward(&data[1]).unwrap(), plain.forward(&manual).unwrap());
    }

    #[test]
    fn learning_rate_steps_at_milestones() {
        let cfg = EncoderConfig {
            lr_milestones: vec![2, 4],
            lr_gamma: 0.5,
            ..EncoderConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|e| cfg.learning_rate_at(e)).collect();
        assert_eq!(lrs, vec![0.01, 0.01, 0.005, 0.005, 0.0025, 0.0025]);
        assert_eq!(EncoderConfig::default().learning_rate_at(1000), 0.01);
    }

    #[test]
    fn checkpoint_keeps_input_norm() {
        let topo = JointTopology::chain(3).unwrap();
        let mut rng = Rng::new(43);
        let data: Vec<SkeletonSequence> = (0..3).map(|_| random_sequence(1, 4, 3, 0, &mut rng)).collect();
        let mut cfg = small_config(vec![4], 3, 4);
        cfg.normalize_input = true;
        let mut model = EncoderModel::init(&cfg, &topo, &[0], &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        assert!(matches!(model.save(&path), Err(Error::Config(_))));
        model.fit_input_norm(&data).unwrap();
        model.round_to_f32();
        model.save(&path).unwrap();
        let loaded = EncoderModel::load(&path).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(loaded.forward(&data[0]).unwrap(), model.forward(&data[0]).unwrap());
    }

    /// Relabeling joints consistently in the topology and the input leaves the feature unchanged.
    #[test]
    fn features_invariant_under_joint_relabeling() {
        let mut rng = Rng::new(31);
        for _ in 0..10 {
            let n = 5;
            let mut edges = Vec::new();
            for i in 1..n {
                edges.push([rng.below(i), i]);
            }
            let topo = JointTopology::new(n, edges, None).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let relabeled = topo.relabeled(&perm).unwrap();
            let cfg = small_config(vec![4, 3], 3, 4);
            let a = EncoderModel::init(&cfg, &topo, &[0, 1], &mut Rng::new(99)).unwrap();
            let b = EncoderModel::init(&cfg, &relabeled, &[0, 1], &mut Rng::new(99)).unwrap();
            let seq = random_sequence(1, 4, n, 0, &mut rng);
            let mut moved = SkeletonSequence::zeros(1, 4, n, 0);
            for t in 0..4 {
                for j in 0..n {
                    for ax in 0..3 {
                        let dst = moved.offset(0, t, perm[j], ax);
                        moved.coords_mut()[dst] = seq.coords()[seq.offset(0, t, j, ax)];
                    }
                }
            }
            let fa = a.forward(&seq).unwrap().1;
            let fb = b.forward(&moved).unwrap().1;
            for (x, y) in fa.data().iter().zip(fb.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
