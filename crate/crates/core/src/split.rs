//! Seen/unseen class partitions: nearest, furthest and random selection.
//!
//! Nearest and furthest rank classes by an isolation score computed from the
//! label-embedding distance matrix. By default the score is the distance to
//! the nearest other class; mean distance to all other classes is available
//! for sensitivity checks. Ties always break toward the lower class index.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::DistanceMetric;
use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    Nearest,
    Furthest,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolationScoring {
    #[default]
    NearestNeighbor,
    MeanDistance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSplit {
    seen: Vec<usize>,
    unseen: Vec<usize>,
    pub strategy: SplitStrategy,
    pub metric: Option<DistanceMetric>,
    pub seed: Option<u64>,
    pub diversity_floor: Option<f64>,
}

impl ClassSplit {
    /// Builds a split of `class_count` classes with the given unseen set.
    pub fn from_unseen(class_count: usize, unseen: &[usize], strategy: SplitStrategy) -> Result<Self> {
        let mut unseen = unseen.to_vec();
        unseen.sort_unstable();
        unseen.dedup();
        if unseen.is_empty() || unseen.len() >= class_count {
            return Err(Error::Usage(format!(
                "{} unseen of {class_count} classes: need 0 < unseen < classes",
                unseen.len()
            )));
        }
        if let Some(&bad) = unseen.iter().find(|&&c| c >= class_count) {
            return Err(Error::Index(format!("class {bad} out of range for {class_count} classes")));
        }
        let seen = (0..class_count).filter(|c| unseen.binary_search(c).is_err()).collect();
        Ok(Self {
            seen,
            unseen,
            strategy,
            metric: None,
            seed: None,
            diversity_floor: None,
        })
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }

    pub fn class_count(&self) -> usize {
        self.seen.len() + self.unseen.len()
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen.binary_search(&class).is_ok()
    }

    pub fn is_unseen(&self, class: usize) -> bool {
        self.unseen.binary_search(&class).is_ok()
    }

    pub fn all_classes(&self) -> Vec<usize> {
        (0..self.class_count()).collect()
    }

    pub fn to_file(&self, labels: &[String]) -> Result<SplitFile> {
        if labels.len() != self.class_count() {
            return Err(Error::Data(format!(
                "{} labels for a split over {} classes",
                labels.len(),
                self.class_count()
            )));
        }
        Ok(SplitFile {
            strategy: self.strategy,
            metric: self.metric,
            seed: self.seed,
            diversity_floor: self.diversity_floor,
            seen: self.seen.iter().map(|&c| labels[c].clone()).collect(),
            unseen: self.unseen.iter().map(|&c| labels[c].clone()).collect(),
        })
    }

    pub fn save(&self, path: &Path, labels: &[String]) -> Result<()> {
        io::write_json(path, &self.to_file(labels)?)
    }

    pub fn load(path: &Path, labels: &[String]) -> Result<Self> {
        let file: SplitFile = io::read_json(path)?;
        file.resolve(labels)
    }
}

/// On-disk split: class labels rather than indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub strategy: SplitStrategy,
    pub metric: Option<DistanceMetric>,
    pub seed: Option<u64>,
    pub diversity_floor: Option<f64>,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

impl SplitFile {
    pub fn resolve(&self, labels: &[String]) -> Result<ClassSplit> {
        let index = |l: &String| {
            labels
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| Error::MissingLabel(l.clone()))
        };
        let unseen = self.unseen.iter().map(index).collect::<Result<Vec<_>>>()?;
        let seen = self.seen.iter().map(index).collect::<Result<Vec<_>>>()?;
        let mut split = ClassSplit::from_unseen(labels.len(), &unseen, self.strategy)?;
        let mut listed = seen.clone();
        listed.sort_unstable();
        if listed != split.seen {
            return Err(Error::Data("split file's seen and unseen sets do not partition the classes".into()));
        }
        split.metric = self.metric;
        split.seed = self.seed;
        split.diversity_floor = self.diversity_floor;
        Ok(split)
    }
}

fn check_distances(dist: &Tensor, k: usize) -> Result<usize> {
    if dist.rank() != 2 || dist.rows() != dist.cols() {
        return Err(Error::Shape(format!("distance matrix must be square, got {:?}", dist.dims())));
    }
    let c = dist.rows();
    if k == 0 || k >= c {
        return Err(Error::Usage(format!("need 0 < k < {c}, got k = {k}")));
    }
    let d = dist.data();
    for i in 0..c {
        if d[i * c + i] != 0.0 {
            return Err(Error::Data(format!("distance matrix diagonal entry {i} is nonzero")));
        }
        for j in i + 1..c {
            if (d[i * c + j] - d[j * c + i]).abs() > 1e-12 {
                return Err(Error::Data(format!("distance matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(c)
}

/// Per-class isolation score.
pub fn isolation_scores(dist: &Tensor, scoring: IsolationScoring) -> Vec<f64> {
    let c = dist.rows();
    let d = dist.data();
    (0..c)
        .map(|i| {
            let others = (0..c).filter(|&j| j != i).map(|j| d[i * c + j]);
            match scoring {
                IsolationScoring::NearestNeighbor => others.fold(f64::INFINITY, f64::min),
                IsolationScoring::MeanDistance => others.sum::<f64>() / (c - 1).max(1) as f64,
            }
        })
        .collect()
}

/// Class indices ordered by score (ascending or descending), ties by index.
fn ranked(scores: &[f64], descending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let ord = scores[a].total_cmp(&scores[b]);
        let ord = if descending { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    order
}

/// Unseen = the `k` least isolated classes, picked greedily in ascending score
/// order while skipping any candidate closer than `diversity_floor` to an
/// already-picked unseen class.
pub fn nearest_split(dist: &Tensor, k: usize, diversity_floor: f64) -> Result<ClassSplit> {
    nearest_split_scored(dist, k, diversity_floor, IsolationScoring::NearestNeighbor)
}

pub fn nearest_split_scored(dist: &Tensor, k: usize, diversity_floor: f64, scoring: IsolationScoring) -> Result<ClassSplit> {
    let c = check_distances(dist, k)?;
    let scores = isolation_scores(dist, scoring);
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for cand in ranked(&scores, false) {
        if picked.len() == k {
            break;
        }
        if picked.iter().all(|&u| dist.data()[cand * c + u] >= diversity_floor) {
            picked.push(cand);
        }
    }
    if picked.len() < k {
        return Err(Error::Infeasible {
            wanted: k,
            found: picked.len(),
        });
    }
    let mut split = ClassSplit::from_unseen(c, &picked, SplitStrategy::Nearest)?;
    split.diversity_floor = Some(diversity_floor);
    Ok(split)
}

/// Unseen = the `k` most isolated classes.
pub fn furthest_split(dist: &Tensor, k: usize) -> Result<ClassSplit> {
    furthest_split_scored(dist, k, IsolationScoring::NearestNeighbor)
}

pub fn furthest_split_scored(dist: &Tensor, k: usize, scoring: IsolationScoring) -> Result<ClassSplit> {
    let c = check_distances(dist, k)?;
    let scores = isolation_scores(dist, scoring);
    let picked: Vec<usize> = ranked(&scores, true).into_iter().take(k).collect();
    ClassSplit::from_unseen(c, &picked, SplitStrategy::Furthest)
}

/// Uniform `k`-subset of the classes as unseen.
pub fn random_split(labels: &[String], k: usize, rng: &mut Rng) -> Result<ClassSplit> {
    let c = labels.len();
    if k == 0 || k >= c {
        return Err(Error::Usage(format!("need 0 < k < {c}, got k = {k}")));
    }
    let mut idx: Vec<usize> = (0..c).collect();
    for i in 0..k {
        let j = i + rng.below(c - i);
        idx.swap(i, j);
    }
    let mut split = ClassSplit::from_unseen(c, &idx[..k], SplitStrategy::Random)?;
    split.seed = Some(rng.seed());
    Ok(split)
}
