//! Relation Network head.
//!
//! The attribute net maps a label embedding into feature space
//! (`D → H_a → F`, ReLU between). The relation net scores the concatenation
//! `[attr(t), v]` (`2F → H_r → 1`, ReLU then sigmoid). Training is episodic:
//! each episode draws a batch of seen-class features and regresses every
//! (sample, candidate) score onto a 0/1 match target with mean squared error.
//!
//! The first relation layer is evaluated as `W_a·attr(t) + W_v·v + b`, so the
//! per-candidate and per-sample halves are computed once per episode.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::devise::{check_head_inputs, ClassSet};
use crate::embeddings::LabelEmbeddingTable;
use crate::encoder::VisualFeatureMatrix;
use crate::error::{Error, Result};
use crate::eval::rank_by_score;
use crate::io;
use crate::numerics::{sigmoid, AdamHyper, Optimizer, Parameters, Rng, Tensor};
use crate::split::ClassSplit;

pub const RELATION_MAGIC: &[u8; 4] = b"ZREL";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationHyper {
    pub episodes: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_step_size: u64,
    pub lr_gamma: f64,
    /// Attribute hidden width; `None` means `2·D`.
    pub attribute_hidden: Option<usize>,
    /// Relation hidden width; `None` means `F`.
    pub relation_hidden: Option<usize>,
    pub candidate_set: ClassSet,
    /// Gaussian weight std; `None` scales each layer by `sqrt(2 / fan_in)`.
    pub init_std: Option<f64>,
}

impl Default for RelationHyper {
    fn default() -> Self {
        Self {
            episodes: 20_000,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_step_size: 10_000,
            lr_gamma: 0.5,
            attribute_hidden: None,
            relation_hidden: None,
            candidate_set: ClassSet::AllClasses,
            init_std: None,
        }
    }
}

impl RelationHyper {
    /// Full-scale training: 400k episodes at 1e-5, halved every 200k.
    pub fn full_scale() -> Self {
        Self {
            episodes: 400_000,
            learning_rate: 1e-5,
            lr_step_size: 200_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("relation batch_size must be positive".into()));
        }
        if self.attribute_hidden == Some(0) || self.relation_hidden == Some(0) {
            return Err(Error::Config("relation hidden widths must be positive".into()));
        }
        if let Some(std) = self.init_std {
            if !(std >= 0.0) || !std.is_finite() {
                return Err(Error::Config(format!("relation init_std must be >= 0, got {std}")));
            }
        }
        self.adam().validate()
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr_step_size: self.lr_step_size,
            lr_gamma: self.lr_gamma,
            ..AdamHyper::with_lr(self.learning_rate)
        }
    }
}

/// `D → H_a → F`, ReLU after the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// `2F → H_r → 1`, ReLU after the first layer, sigmoid at the output.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Both nets; parameter order is attribute `w1, b1, w2, b2` then relation
/// `w1, b1, w2, b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationModel {
    pub attr: AttributeNet,
    pub rel: RelationNet,
}

impl Parameters for RelationModel {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.attr.w1,
            &self.attr.b1,
            &self.attr.w2,
            &self.attr.b2,
            &self.rel.w1,
            &self.rel.b1,
            &self.rel.w2,
            &self.rel.b2,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.attr.w1,
            &mut self.attr.b1,
            &mut self.attr.w2,
            &mut self.attr.b2,
            &mut self.rel.w1,
            &mut self.rel.b1,
            &mut self.rel.w2,
            &mut self.rel.b2,
        ]
    }
}

#[derive(Serialize, Deserialize)]
struct RelationHeader {
    embedding_dim: usize,
    feature_dim: usize,
    attribute_hidden: usize,
    relation_hidden: usize,
    hyper: RelationHyper,
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let n = w.cols();
    (0..w.rows())
        .map(|r| b.data()[r] + w.data()[r * n..(r + 1) * n].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

/// `w[:, cols]·x` for a column window of `w`.
fn partial_matvec(w: &Tensor, x: &[f64], offset: usize) -> Vec<f64> {
    let n = w.cols();
    (0..w.rows())
        .map(|r| w.data()[r * n + offset..r * n + offset + x.len()].iter().zip(x).map(|(a, c)| a * c).sum())
        .collect()
}

impl RelationModel {
    pub fn zeros(embedding_dim: usize, feature_dim: usize, attribute_hidden: usize, relation_hidden: usize) -> Self {
        let (d, f, ha, hr) = (embedding_dim, feature_dim, attribute_hidden, relation_hidden);
        Self {
            attr: AttributeNet {
                w1: Tensor::zeros(&[ha, d]),
                b1: Tensor::zeros(&[ha]),
                w2: Tensor::zeros(&[f, ha]),
                b2: Tensor::zeros(&[f]),
            },
            rel: RelationNet {
                w1: Tensor::zeros(&[hr, 2 * f]),
                b1: Tensor::zeros(&[hr]),
                w2: Tensor::zeros(&[1, hr]),
                b2: Tensor::zeros(&[1]),
            },
        }
    }

    /// Gaussian weights, zero biases.
    pub fn init(embedding_dim: usize, feature_dim: usize, hyper: &RelationHyper, rng: &mut Rng) -> Self {
        let ha = hyper.attribute_hidden.unwrap_or(2 * embedding_dim);
        let hr = hyper.relation_hidden.unwrap_or(feature_dim);
        let mut m = Self::zeros(embedding_dim, feature_dim, ha, hr);
        for w in [&mut m.attr.w1, &mut m.attr.w2, &mut m.rel.w1, &mut m.rel.w2] {
            let std = hyper.init_std.unwrap_or_else(|| (2.0 / w.cols() as f64).sqrt());
            w.data_mut().iter_mut().for_each(|x| *x = std * rng.normal());
        }
        m
    }

    pub fn embedding_dim(&self) -> usize {
        self.attr.w1.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.attr.w2.rows()
    }

    pub fn attribute_hidden(&self) -> usize {
        self.attr.w1.rows()
    }

    pub fn relation_hidden(&self) -> usize {
        self.rel.w1.rows()
    }

    /// Projected embedding `attr(t)`.
    pub fn attribute(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.embedding_dim() {
            return Err(Error::Shape(format!(
                "embedding has {} dims, attribute net expects {}",
                embedding.len(),
                self.embedding_dim()
            )));
        }
        let h: Vec<f64> = affine(&self.attr.w1, &self.attr.b1, embedding).into_iter().map(|x| x.max(0.0)).collect();
        Ok(affine(&self.attr.w2, &self.attr.b2, &h))
    }

    fn check_feature(&self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "feature has {} dims, relation head expects {}",
                feature.len(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, hyper: &RelationHyper) -> Result<()> {
        let header = RelationHeader {
            embedding_dim: self.embedding_dim(),
            feature_dim: self.feature_dim(),
            attribute_hidden: self.attribute_hidden(),
            relation_hidden: self.relation_hidden(),
            hyper: *hyper,
        };
        io::write_checkpoint(path, RELATION_MAGIC, &header, &self.tensors())
    }

    pub fn load(path: &Path) -> Result<(Self, RelationHyper)> {
        let (h, tensors): (RelationHeader, Vec<Tensor>) = io::read_checkpoint(path, RELATION_MAGIC)?;
        let mut model = Self::zeros(h.embedding_dim, h.feature_dim, h.attribute_hidden, h.relation_hidden);
        let expected: Vec<Vec<usize>> = model.tensors().iter().map(|t| t.dims().to_vec()).collect();
        let got: Vec<Vec<usize>> = tensors.iter().map(|t| t.dims().to_vec()).collect();
        if expected != got {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("relation tensors {got:?} do not match header dims {expected:?}"),
            });
        }
        for (dst, src) in model.tensors_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        Ok((model, h.hyper))
    }
}

/// `sigmoid(rel([attr(embedding), feature]))`.
pub fn relation_score(model: &RelationModel, embedding: &[f64], feature: &[f64]) -> Result<f64> {
    model.check_feature(feature)?;
    let a = model.attribute(embedding)?;
    let x: Vec<f64> = a.iter().chain(feature).copied().collect();
    let h: Vec<f64> = affine(&model.rel.w1, &model.rel.b1, &x).into_iter().map(|z| z.max(0.0)).collect();
    Ok(sigmoid(affine(&model.rel.w2, &model.rel.b2, &h)[0]))
}

/// One training episode: sampled seen-class features against a candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `[B, F]` sampled features.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub candidates: Vec<usize>,
    /// `[B, C]`: 1 where the candidate is the sample's class.
    pub targets: Tensor,
}

impl Episode {
    pub fn new(features: Tensor, labels: Vec<usize>, candidates: Vec<usize>) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() || candidates.is_empty() {
            return Err(Error::Shape(format!(
                "episode features {:?} with {} labels and {} candidates",
                features.dims(),
                labels.len(),
                candidates.len()
            )));
        }
        let (b, c) = (labels.len(), candidates.len());
        let mut targets = Tensor::zeros(&[b, c]);
        for (i, &l) in labels.iter().enumerate() {
            for (j, &k) in candidates.iter().enumerate() {
                if k == l {
                    targets.data_mut()[i * c + j] = 1.0;
                }
            }
        }
        Ok(Self {
            features,
            labels,
            candidates,
            targets,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

/// Draws `batch_size` rows uniformly with replacement.
pub fn sample_episode(features: &VisualFeatureMatrix, candidates: &[usize], batch_size: usize, rng: &mut Rng) -> Result<Episode> {
    if features.is_empty() {
        return Err(Error::Data("cannot sample an episode from no features".into()));
    }
    let f = features.dim();
    let mut rows = Vec::with_capacity(batch_size * f);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = rng.below(features.len());
        rows.extend_from_slice(features.row(i));
        labels.push(features.label_indices[i]);
    }
    Episode::new(Tensor::matrix(batch_size, f, rows)?, labels, candidates.to_vec())
}

/// Mean squared error over all (sample, candidate) pairs and its gradient in
/// parameter order.
pub fn episode_loss(model: &RelationModel, episode: &Episode, table: &LabelEmbeddingTable) -> Result<(f64, Vec<Tensor>)> {
    let (d, f) = (model.embedding_dim(), model.feature_dim());
    let (ha, hr) = (model.attribute_hidden(), model.relation_hidden());
    if table.dim() != d || episode.features.cols() != f {
        return Err(Error::Shape(format!(
            "episode/table dims ({}, {}) do not match head ({d}, {f})",
            table.dim(),
            episode.features.cols()
        )));
    }
    if let Some(&bad) = episode.candidates.iter().find(|&&c| c >= table.len()) {
        return Err(Error::Index(format!("candidate {bad} outside table of {} classes", table.len())));
    }
    let (b, c) = (episode.batch_size(), episode.candidates.len());
    let rw1 = model.rel.w1.data();
    let rb1 = model.rel.b1.data();
    let rw2 = model.rel.w2.data();
    let rb2 = model.rel.b2.data()[0];

    // Attribute forward per candidate.
    let mut q = Vec::with_capacity(c); // pre-ReLU hidden
    let mut attrs = Vec::with_capacity(c);
    for &k in &episode.candidates {
        let qk = affine(&model.attr.w1, &model.attr.b1, table.row(k));
        let r: Vec<f64> = qk.iter().map(|x| x.max(0.0)).collect();
        attrs.push(affine(&model.attr.w2, &model.attr.b2, &r));
        q.push(qk);
    }
    let za: Vec<Vec<f64>> = attrs.iter().map(|a| partial_matvec(&model.rel.w1, a, 0)).collect();
    let zv: Vec<Vec<f64>> = (0..b).map(|i| partial_matvec(&model.rel.w1, episode.features.row(i), f)).collect();

    let mut g_rw2 = vec![0.0; hr];
    let mut g_rb2 = 0.0;
    let mut dz_cand = vec![vec![0.0; hr]; c];
    let mut dz_samp = vec![vec![0.0; hr]; b];
    let mut loss = 0.0;
    let scale = 2.0 / (b * c) as f64;
    let mut h = vec![0.0; hr];
    for i in 0..b {
        for j in 0..c {
            let mut o = rb2;
            for r in 0..hr {
                let z = za[j][r] + zv[i][r] + rb1[r];
                h[r] = z.max(0.0);
                o += rw2[r] * h[r];
            }
            let s = sigmoid(o);
            let diff = s - episode.targets.data()[i * c + j];
            loss += diff * diff;
            let d_o = scale * diff * s * (1.0 - s);
            if d_o == 0.0 {
                continue;
            }
            g_rb2 += d_o;
            for r in 0..hr {
                if h[r] > 0.0 {
                    g_rw2[r] += d_o * h[r];
                    let dz = d_o * rw2[r];
                    dz_cand[j][r] += dz;
                    dz_samp[i][r] += dz;
                }
            }
        }
    }
    loss /= (b * c) as f64;

    let mut g_rw1 = vec![0.0; hr * 2 * f];
    let mut g_rb1 = vec![0.0; hr];
    let mut g_aw1 = vec![0.0; ha * d];
    let mut g_ab1 = vec![0.0; ha];
    let mut g_aw2 = vec![0.0; f * ha];
    let mut g_ab2 = vec![0.0; f];
    for (j, &k) in episode.candidates.iter().enumerate() {
        let dz = &dz_cand[j];
        let mut da = vec![0.0; f];
        for r in 0..hr {
            if dz[r] == 0.0 {
                continue;
            }
            g_rb1[r] += dz[r];
            let row = &mut g_rw1[r * 2 * f..r * 2 * f + f];
            let wrow = &rw1[r * 2 * f..r * 2 * f + f];
            for x in 0..f {
                row[x] += dz[r] * attrs[j][x];
                da[x] += dz[r] * wrow[x];
            }
        }
        // attribute backward
        let aw2 = model.attr.w2.data();
        let mut dr = vec![0.0; ha];
        for x in 0..f {
            g_ab2[x] += da[x];
            for y in 0..ha {
                let rv = q[j][y].max(0.0);
                g_aw2[x * ha + y] += da[x] * rv;
                dr[y] += da[x] * aw2[x * ha + y];
            }
        }
        let t = table.row(k);
        for y in 0..ha {
            if q[j][y] > 0.0 {
                g_ab1[y] += dr[y];
                for e in 0..d {
                    g_aw1[y * d + e] += dr[y] * t[e];
                }
            }
        }
    }
    for i in 0..b {
        let dz = &dz_samp[i];
        let v = episode.features.row(i);
        for r in 0..hr {
            if dz[r] == 0.0 {
                continue;
            }
            let row = &mut g_rw1[r * 2 * f + f..(r + 1) * 2 * f];
            for x in 0..f {
                row[x] += dz[r] * v[x];
            }
        }
    }
    let grads = vec![
        Tensor::new(vec![ha, d], g_aw1)?,
        Tensor::new(vec![ha], g_ab1)?,
        Tensor::new(vec![f, ha], g_aw2)?,
        Tensor::new(vec![f], g_ab2)?,
        Tensor::new(vec![hr, 2 * f], g_rw1)?,
        Tensor::new(vec![hr], g_rb1)?,
        Tensor::new(vec![1, hr], g_rw2)?,
        Tensor::new(vec![1], vec![g_rb2])?,
    ];
    Ok((loss, grads))
}

pub fn train_relation(
    features: &VisualFeatureMatrix,
    table: &LabelEmbeddingTable,
    split: &ClassSplit,
    hyper: &RelationHyper,
    rng: &mut Rng,
) -> Result<RelationModel> {
    train_relation_logged(features, table, split, hyper, rng).map(|(m, _)| m)
}

/// As [`train_relation`], also returning every episode's loss.
pub fn train_relation_logged(
    features: &VisualFeatureMatrix,
    table: &LabelEmbeddingTable,
    split: &ClassSplit,
    hyper: &RelationHyper,
    rng: &mut Rng,
) -> Result<(RelationModel, Vec<f64>)> {
    hyper.validate()?;
    check_head_inputs(features, table, split, "train_relation")?;
    let candidates = hyper.candidate_set.classes(split);
    let mut model = RelationModel::init(table.dim(), features.dim(), hyper, rng);
    let mut optimizer = Optimizer::adam(hyper.adam(), &model.tensors());
    let mut log = Vec::with_capacity(hyper.episodes as usize);
    for episode_index in 0..hyper.episodes {
        let episode = sample_episode(features, &candidates, hyper.batch_size, rng)?;
        let (loss, grads) = episode_loss(&model, &episode, table)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("relation loss at episode {episode_index}")));
        }
        optimizer.step(model.tensors_mut(), &grads)?;
        log.push(loss);
    }
    if !model.is_finite() {
        return Err(Error::NonFinite("relation weights after training".into()));
    }
    Ok((model, log))
}

/// Candidates ranked by relation score, highest first, ties to the lower index.
pub fn predict_relation(
    model: &RelationModel,
    v: &[f64],
    candidates: &[usize],
    table: &LabelEmbeddingTable,
) -> Result<Vec<(usize, f64)>> {
    if candidates.is_empty() {
        return Err(Error::Usage("predict_relation needs at least one candidate".into()));
    }
    let scored = candidates
        .iter()
        .map(|&c| {
            if c >= table.len() {
                return Err(Error::Index(format!("candidate {c} outside table of {} classes", table.len())));
            }
            Ok((c, relation_score(model, table.row(c), v)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_by_score(scored))
}
