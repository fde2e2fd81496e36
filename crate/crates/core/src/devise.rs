//! DeViSE head: a linear map `M` (D × F) from visual features into the label
//! embedding space, trained with a hinge rank loss and queried by dot product.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::LabelEmbeddingTable;
use crate::encoder::VisualFeatureMatrix;
use crate::error::{Error, Result};
use crate::eval::rank_by_score;
use crate::io;
use crate::numerics::{dot, Optimizer, Parameters, Rng, SgdHyper, Tensor};
use crate::split::ClassSplit;

pub const DEVISE_MAGIC: &[u8; 4] = b"ZDVS";

/// Which classes a head may compare against during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSet {
    #[default]
    AllClasses,
    SeenOnly,
}

impl ClassSet {
    pub fn classes(self, split: &ClassSplit) -> Vec<usize> {
        match self {
            ClassSet::AllClasses => split.all_classes(),
            ClassSet::SeenOnly => split.seen().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DeviseInit {
    #[default]
    Zeros,
    Gaussian {
        std: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviseHyper {
    pub margin: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub negative_set: ClassSet,
    pub init: DeviseInit,
}

impl Default for DeviseHyper {
    fn default() -> Self {
        Self {
            margin: 0.1,
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 64,
            epochs: 100,
            negative_set: ClassSet::AllClasses,
            init: DeviseInit::Zeros,
        }
    }
}

impl DeviseHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!("devise margin must be > 0, got {}", self.margin)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("devise batch_size must be positive".into()));
        }
        if let DeviseInit::Gaussian { std } = self.init {
            if !(std > 0.0) || !std.is_finite() {
                return Err(Error::Config(format!("devise init std must be > 0, got {std}")));
            }
        }
        self.sgd().validate()
    }

    fn sgd(&self) -> SgdHyper {
        SgdHyper {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviseProjection {
    m: Tensor,
}

impl Parameters for DeviseProjection {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.m]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.m]
    }
}

#[derive(Serialize, Deserialize)]
struct DeviseHeader {
    embedding_dim: usize,
    feature_dim: usize,
    hyper: DeviseHyper,
}

impl DeviseProjection {
    pub fn new(m: Tensor) -> Result<Self> {
        if m.rank() != 2 {
            return Err(Error::Shape(format!("projection must be a matrix, got {:?}", m.dims())));
        }
        Ok(Self { m })
    }

    pub fn zeros(embedding_dim: usize, feature_dim: usize) -> Self {
        Self {
            m: Tensor::zeros(&[embedding_dim, feature_dim]),
        }
    }

    pub fn init(embedding_dim: usize, feature_dim: usize, init: DeviseInit, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(embedding_dim, feature_dim);
        if let DeviseInit::Gaussian { std } = init {
            p.m.data_mut().iter_mut().for_each(|x| *x = std * rng.normal());
        }
        p
    }

    pub fn matrix(&self) -> &Tensor {
        &self.m
    }

    pub fn embedding_dim(&self) -> usize {
        self.m.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.m.cols()
    }

    /// `M·v`.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "feature has {} dims, projection expects {}",
                v.len(),
                self.feature_dim()
            )));
        }
        Ok((0..self.embedding_dim()).map(|d| dot(self.m.row(d), v)).collect())
    }

    pub fn save(&self, path: &Path, hyper: &DeviseHyper) -> Result<()> {
        let header = DeviseHeader {
            embedding_dim: self.embedding_dim(),
            feature_dim: self.feature_dim(),
            hyper: *hyper,
        };
        io::write_checkpoint(path, DEVISE_MAGIC, &header, &[&self.m])
    }

    pub fn load(path: &Path) -> Result<(Self, DeviseHyper)> {
        let (header, mut tensors): (DeviseHeader, Vec<Tensor>) = io::read_checkpoint(path, DEVISE_MAGIC)?;
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        if tensors.len() != 1 || tensors[0].dims() != [header.embedding_dim, header.feature_dim] {
            return Err(bad("projection tensor does not match header dims".into()));
        }
        Ok((Self { m: tensors.remove(0) }, header.hyper))
    }
}

fn check_dims(m: &DeviseProjection, v: &[f64], table: &LabelEmbeddingTable) -> Result<()> {
    if table.dim() != m.embedding_dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} does not match projection rows {}",
            table.dim(),
            m.embedding_dim()
        )));
    }
    if v.len() != m.feature_dim() {
        return Err(Error::Shape(format!(
            "feature dim {} does not match projection cols {}",
            v.len(),
            m.feature_dim()
        )));
    }
    Ok(())
}

/// Per-sample hinge rank loss and its gradient with respect to `M`.
///
/// `negatives` lists the candidate classes; the true label is skipped if
/// present. A term exactly at its hinge contributes no gradient.
pub fn hinge_rank_loss(
    m: &DeviseProjection,
    v: &[f64],
    label: usize,
    table: &LabelEmbeddingTable,
    negatives: &[usize],
    margin: f64,
) -> Result<(f64, Tensor)> {
    let mut grad = Tensor::zeros(m.matrix().dims());
    let loss = accumulate_hinge(m, v, label, table, negatives, margin, &mut grad, 1.0)?;
    Ok((loss, grad))
}

#[allow(clippy::too_many_arguments)]
fn accumulate_hinge(
    m: &DeviseProjection,
    v: &[f64],
    label: usize,
    table: &LabelEmbeddingTable,
    negatives: &[usize],
    margin: f64,
    grad: &mut Tensor,
    weight: f64,
) -> Result<f64> {
    check_dims(m, v, table)?;
    if label >= table.len() {
        return Err(Error::Index(format!("label {label} outside table of {} classes", table.len())));
    }
    if let Some(&bad) = negatives.iter().find(|&&j| j >= table.len()) {
        return Err(Error::Index(format!("negative class {bad} outside table of {} classes", table.len())));
    }
    let mv = m.project(v)?;
    let t_label = table.row(label);
    let s_label = dot(t_label, &mv);
    let d = m.embedding_dim();
    let mut direction = vec![0.0; d];
    let mut loss = 0.0;
    let mut active = false;
    for &j in negatives.iter().filter(|&&j| j != label) {
        let t_j = table.row(j);
        let term = margin - s_label + dot(t_j, &mv);
        if term > 0.0 {
            loss += term;
            active = true;
            for ((u, a), b) in direction.iter_mut().zip(t_j).zip(t_label) {
                *u += a - b;
            }
        }
    }
    if active {
        let f = m.feature_dim();
        let g = grad.data_mut();
        for (r, &u) in direction.iter().enumerate() {
            if u != 0.0 {
                let row = &mut g[r * f..(r + 1) * f];
                for (x, &vi) in row.iter_mut().zip(v) {
                    *x += weight * u * vi;
                }
            }
        }
    }
    Ok(loss)
}

/// Mean hinge rank loss over every row of `features`.
pub fn mean_devise_loss(
    m: &DeviseProjection,
    features: &VisualFeatureMatrix,
    table: &LabelEmbeddingTable,
    negatives: &[usize],
    margin: f64,
) -> Result<f64> {
    let mut scratch = Tensor::zeros(m.matrix().dims());
    let mut total = 0.0;
    for i in 0..features.len() {
        total += accumulate_hinge(m, features.row(i), features.label_indices[i], table, negatives, margin, &mut scratch, 0.0)?;
    }
    Ok(total / features.len().max(1) as f64)
}

pub(crate) fn check_head_inputs(features: &VisualFeatureMatrix, table: &LabelEmbeddingTable, split: &ClassSplit, stage: &str) -> Result<()> {
    if features.is_empty() {
        return Err(Error::Data(format!("{stage}: no training features")));
    }
    if let Some(&bad) = features.label_indices.iter().find(|&&c| !split.is_seen(c)) {
        return Err(Error::contamination(
            stage,
            format!("training features include a sample of unseen class {bad}"),
        ));
    }
    if table.len() != split.class_count() {
        return Err(Error::Data(format!(
            "{stage}: table has {} classes, split has {}",
            table.len(),
            split.class_count()
        )));
    }
    if !features.unit_normalized || !table.is_normalized() {
        return Err(Error::Data(format!("{stage}: features and embeddings must be unit-normalized")));
    }
    Ok(())
}

/// Trains `M` with mini-batch momentum SGD on the batch-mean hinge rank loss.
pub fn train_devise(
    features: &VisualFeatureMatrix,
    table: &LabelEmbeddingTable,
    split: &ClassSplit,
    hyper: &DeviseHyper,
    rng: &mut Rng,
) -> Result<DeviseProjection> {
    train_devise_logged(features, table, split, hyper, rng).map(|(m, _)| m)
}

/// As [`train_devise`], also returning the mean batch loss of every epoch.
pub fn train_devise_logged(
    features: &VisualFeatureMatrix,
    table: &LabelEmbeddingTable,
    split: &ClassSplit,
    hyper: &DeviseHyper,
    rng: &mut Rng,
) -> Result<(DeviseProjection, Vec<f64>)> {
    hyper.validate()?;
    check_head_inputs(features, table, split, "train_devise")?;
    let negatives = hyper.negative_set.classes(split);
    let mut model = DeviseProjection::init(table.dim(), features.dim(), hyper.init, rng);
    let mut optimizer = Optimizer::sgd(hyper.sgd(), &model.tensors());
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut log = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let mut grad = Tensor::zeros(model.m.dims());
            let w = 1.0 / chunk.len() as f64;
            for &i in chunk {
                total += accumulate_hinge(
                    &model,
                    features.row(i),
                    features.label_indices[i],
                    table,
                    &negatives,
                    hyper.margin,
                    &mut grad,
                    w,
                )?;
            }
            optimizer.step(model.tensors_mut(), &[grad])?;
        }
        if !total.is_finite() || !model.is_finite() {
            return Err(Error::NonFinite(format!("devise training diverged at epoch {epoch}")));
        }
        log.push(total / features.len() as f64);
    }
    Ok((model, log))
}

/// Candidates ranked by `t_jᵀ M v`, highest first, ties to the lower index.
pub fn predict_devise(
    m: &DeviseProjection,
    v: &[f64],
    candidates: &[usize],
    table: &LabelEmbeddingTable,
) -> Result<Vec<(usize, f64)>> {
    if candidates.is_empty() {
        return Err(Error::Usage("predict_devise needs at least one candidate".into()));
    }
    check_dims(m, v, table)?;
    let mv = m.project(v)?;
    let scored = candidates
        .iter()
        .map(|&c| {
            if c >= table.len() {
                Err(Error::Index(format!("candidate {c} outside table of {} classes", table.len())))
            } else {
                Ok((c, dot(table.row(c), &mv)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_by_score(scored))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{random_embeddings, EmbeddingSource};
    use crate::numerics::{finite_difference_check, unit_normalize_slice};
    use crate::split::SplitStrategy;

    fn table_from(rows: Vec<Vec<f64>>) -> LabelEmbeddingTable {
        let n = rows.len();
        let d = rows[0].len();
        let labels = (0..n).map(|i| format!("c{i}")).collect();
        LabelEmbeddingTable::new(labels, Tensor::matrix(n, d, rows.concat()).unwrap(), EmbeddingSource::Loaded).unwrap()
    }

    fn random_table(c: usize, d: usize, rng: &mut Rng) -> LabelEmbeddingTable {
        let labels: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
        random_embeddings(&labels, d, rng).unwrap()
    }

    fn unit(rng: &mut Rng, n: usize) -> Vec<f64> {
        unit_normalize_slice(&(0..n).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()
    }

    /// Features that are noisy linear images of their class embeddings.
    fn realizable(table: &LabelEmbeddingTable, classes: &[usize], per_class: usize, f: usize, noise: f64, rng: &mut Rng) -> VisualFeatureMatrix {
        let d = table.dim();
        let a: Vec<f64> = (0..f * d).map(|_| rng.normal()).collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for &c in classes {
            for _ in 0..per_class {
                let t = table.row(c);
                let v: Vec<f64> = (0..f).map(|r| dot(&a[r * d..(r + 1) * d], t) + noise * rng.normal()).collect();
                rows.extend(unit_normalize_slice(&v).unwrap());
                labels.push(c);
            }
        }
        VisualFeatureMatrix::new(Tensor::matrix(labels.len(), f, rows).unwrap(), labels, true).unwrap()
    }

    #[test]
    fn worked_example_loss() {
        // t0 = e0, t1 = e1, M v = t1
        let table = table_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let m = DeviseProjection::new(Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let v = [0.0, 1.0];
        let (loss, grad) = hinge_rank_loss(&m, &v, 0, &table, &[0, 1], 0.1).unwrap();
        assert!((loss - 1.1).abs() < 1e-12);
        // (t1 - t0) vᵀ
        assert_eq!(grad.data(), &[0.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn slack_hinges_give_zero() {
        let table = table_from(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let m = DeviseProjection::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let (loss, grad) = hinge_rank_loss(&m, &[1.0, 0.0], 0, &table, &[0, 1, 2], 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn boundary_term_is_inactive() {
        // s_label - s_j == margin exactly
        let table = table_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let m = DeviseProjection::new(Tensor::matrix(2, 2, vec![0.5, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let (loss, grad) = hinge_rank_loss(&m, &[1.0, 0.0], 0, &table, &[1], 0.5).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_init_loss_is_margin_times_negatives() {
        let mut rng = Rng::new(4);
        for c in [2, 5, 12] {
            let table = random_table(c, 7, &mut rng);
            let m = DeviseProjection::zeros(7, 9);
            let v = unit(&mut rng, 9);
            let all: Vec<usize> = (0..c).collect();
            let (loss, _) = hinge_rank_loss(&m, &v, 1, &table, &all, 0.1).unwrap();
            assert!((loss - 0.1 * (c - 1) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn label_out_of_range() {
        let mut rng = Rng::new(1);
        let table = random_table(3, 4, &mut rng);
        let m = DeviseProjection::zeros(4, 2);
        assert!(matches!(
            hinge_rank_loss(&m, &[1.0, 0.0], 3, &table, &[0, 1, 2], 0.1),
            Err(Error::Index(_))
        ));
    }

    /// Random 5-class instances, resampled until no hinge is within 1e-3 of
    /// its boundary.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut checked = 0;
        let mut seed = 0;
        while checked < 20 {
            seed += 1;
            let mut rng = Rng::new(seed);
            let (d, f, c) = (6, 5, 5);
            let table = random_table(c, d, &mut rng);
            let mut m = DeviseProjection::init(d, f, DeviseInit::Gaussian { std: 0.5 }, &mut rng);
            let v = unit(&mut rng, f);
            let label = rng.below(c);
            let negs: Vec<usize> = (0..c).collect();
            let mv = m.project(&v).unwrap();
            let s_l = dot(table.row(label), &mv);
            let near = negs
                .iter()
                .filter(|&&j| j != label)
                .any(|&j| (0.1 - s_l + dot(table.row(j), &mv)).abs() < 1e-3);
            if near {
                continue;
            }
            let flat = m.flat_params();
            let err = finite_difference_check(
                |p| {
                    m.set_flat_params(p.data())?;
                    let (l, g) = hinge_rank_loss(&m, &v, label, &table, &negs, 0.1)?;
                    Ok((l, Tensor::vector(g.into_data())?))
                },
                &flat,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
            checked += 1;
        }
    }

    fn split_of(c: usize, unseen: &[usize]) -> ClassSplit {
        ClassSplit::from_unseen(c, unseen, SplitStrategy::Random).unwrap()
    }

    #[test]
    fn epochs_zero_returns_initialization() {
        let mut rng = Rng::new(2);
        let table = random_table(5, 6, &mut rng);
        let split = split_of(5, &[4]);
        let feats = realizable(&table, &[0, 1, 2, 3], 3, 8, 0.1, &mut rng);
        let hyper = DeviseHyper {
            epochs: 0,
            ..Default::default()
        };
        let m = train_devise(&feats, &table, &split, &hyper, &mut Rng::new(0)).unwrap();
        assert_eq!(m, DeviseProjection::zeros(6, 8));
    }

    #[test]
    fn unseen_features_are_contamination() {
        let mut rng = Rng::new(3);
        let table = random_table(5, 6, &mut rng);
        let split = split_of(5, &[4]);
        let feats = realizable(&table, &[0, 4], 2, 8, 0.1, &mut rng);
        let err = train_devise(&feats, &table, &split, &DeviseHyper::default(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Contamination { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn full_batch_small_lr_loss_is_non_increasing() {
        for seed in [1, 2, 3] {
            let mut rng = Rng::new(seed);
            let table = random_table(4, 5, &mut rng);
            let split = split_of(4, &[3]);
            let feats = realizable(&table, &[0, 1, 2], 4, 6, 0.3, &mut rng);
            let negs = ClassSet::AllClasses.classes(&split);
            let mut prev = f64::INFINITY;
            for epochs in 0..15 {
                let hyper = DeviseHyper {
                    learning_rate: 1e-4,
                    batch_size: feats.len(),
                    epochs,
                    ..Default::default()
                };
                let m = train_devise(&feats, &table, &split, &hyper, &mut Rng::new(seed)).unwrap();
                let loss = mean_devise_loss(&m, &feats, &table, &negs, hyper.margin).unwrap();
                assert!(loss <= prev + 1e-12, "seed {seed} epoch {epochs}: {loss} > {prev}");
                prev = loss;
            }
        }
    }

    #[test]
    fn realizable_instance_is_learned() {
        let mut rng = Rng::new(11);
        let table = random_table(10, 16, &mut rng);
        let split = split_of(10, &[8, 9]);
        let feats = realizable(&table, split.seen(), 20, 24, 0.05, &mut rng);
        let negs = ClassSet::AllClasses.classes(&split);
        let initial = mean_devise_loss(&DeviseProjection::zeros(16, 24), &feats, &table, &negs, 0.1).unwrap();
        let hyper = DeviseHyper {
            learning_rate: 0.05,
            batch_size: 16,
            epochs: 60,
            ..Default::default()
        };
        let m = train_devise(&feats, &table, &split, &hyper, &mut rng).unwrap();
        let fin = mean_devise_loss(&m, &feats, &table, &negs, 0.1).unwrap();
        assert!(fin < 0.05 * initial, "{fin} vs {initial}");
    }

    #[test]
    fn seen_only_equals_all_classes_on_seen_rows() {
        let mut rng = Rng::new(21);
        let table = random_table(6, 5, &mut rng);
        let split = split_of(6, &[1, 4]);
        let feats = realizable(&table, split.seen(), 5, 7, 0.1, &mut rng);
        let hyper = DeviseHyper {
            learning_rate: 0.02,
            batch_size: 4,
            epochs: 5,
            negative_set: ClassSet::SeenOnly,
            ..Default::default()
        };
        let a = train_devise(&feats, &table, &split, &hyper, &mut Rng::new(5)).unwrap();

        // Drop the unseen rows and relabel seen classes 0..4.
        let seen = split.seen().to_vec();
        let rows: Vec<Vec<f64>> = seen.iter().map(|&c| table.row(c).to_vec()).collect();
        let small = table_from(rows);
        let relabeled: Vec<usize> = feats.label_indices.iter().map(|c| seen.iter().position(|s| s == c).unwrap()).collect();
        let feats2 = VisualFeatureMatrix::new(feats.features.clone(), relabeled, true).unwrap();
        let split2 = ClassSplit::from_unseen(seen.len() + 1, &[seen.len()], SplitStrategy::Random).unwrap();
        // the extra unseen class has no row in `small`, so give it one
        let mut rows2: Vec<Vec<f64>> = (0..seen.len()).map(|i| small.row(i).to_vec()).collect();
        rows2.push(table.row(1).to_vec());
        let small = table_from(rows2);
        let hyper2 = DeviseHyper {
            negative_set: ClassSet::SeenOnly,
            ..hyper
        };
        let b = train_devise(&feats2, &small, &split2, &hyper2, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);

        let all = DeviseHyper {
            negative_set: ClassSet::AllClasses,
            ..hyper
        };
        assert_ne!(train_devise(&feats, &table, &split, &all, &mut Rng::new(5)).unwrap(), a);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = Rng::new(8);
        let table = random_table(5, 6, &mut rng);
        let split = split_of(5, &[0]);
        let feats = realizable(&table, split.seen(), 6, 8, 0.1, &mut rng);
        let hyper = DeviseHyper {
            epochs: 3,
            batch_size: 5,
            ..Default::default()
        };
        let a = train_devise(&feats, &table, &split, &hyper, &mut Rng::new(1)).unwrap();
        let b = train_devise(&feats, &table, &split, &hyper, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_examples() {
        let table = table_from(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        // M maps e0 onto t2
        let m = DeviseProjection::new(Tensor::matrix(3, 2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        let r = predict_devise(&m, &[1.0, 0.0], &[0, 1, 2], &table).unwrap();
        assert_eq!(r[0], (2, 1.0));
        assert_eq!(r[1].0, 0); // tie at 0 breaks low
        assert_eq!(predict_devise(&m, &[1.0, 0.0], &[1], &table).unwrap(), vec![(1, 0.0)]);
        assert!(matches!(predict_devise(&m, &[1.0, 0.0], &[], &table), Err(Error::Usage(_))));
    }

    #[test]
    fn predict_matches_brute_force_and_is_scale_invariant() {
        let mut rng = Rng::new(13);
        for _ in 0..20 {
            let table = random_table(8, 5, &mut rng);
            let m = DeviseProjection::init(5, 4, DeviseInit::Gaussian { std: 1.0 }, &mut rng);
            let v = unit(&mut rng, 4);
            let cands = vec![7, 2, 5, 0, 3];
            let ranked: Vec<usize> = predict_devise(&m, &v, &cands, &table).unwrap().iter().map(|x| x.0).collect();
            let mut oracle: Vec<(f64, usize)> = cands
                .iter()
                .map(|&c| {
                    let mut s = 0.0;
                    for d in 0..5 {
                        for f in 0..4 {
                            s += table.row(c)[d] * m.matrix().data()[d * 4 + f] * v[f];
                        }
                    }
                    (s, c)
                })
                .collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            assert_eq!(ranked, oracle.iter().map(|x| x.1).collect::<Vec<_>>());
            let mut scaled = m.clone();
            scaled.m.scale(3.7);
            let ranked2: Vec<usize> = predict_devise(&scaled, &v, &cands, &table).unwrap().iter().map(|x| x.0).collect();
            assert_eq!(ranked, ranked2);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("devise.zdvs");
        let mut m = DeviseProjection::init(3, 4, DeviseInit::Gaussian { std: 1.0 }, &mut Rng::new(1));
        m.m.round_to_f32();
        let hyper = DeviseHyper::default();
        m.save(&p, &hyper).unwrap();
        assert_eq!(&std::fs::read(&p).unwrap()[..4], b"ZDVS");
        let (back, h) = DeviseProjection::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(h, hyper);
    }
}
