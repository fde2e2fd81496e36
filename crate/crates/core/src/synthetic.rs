//! Synthetic skeleton benchmark with controllable class similarity.
//!
//! Motion is built from primitives. Primitive `m` displaces one joint group
//! along one axis: a static offset plus a sinusoid of a few cycles per clip.
//! With `G` groups, slot `s = m % 3G` picks group `s % G` and axis `s / G`;
//! the cycle count is `1 + (m + m / 3G) % 3`, so primitives sharing a slot
//! still differ in frequency. A class is a sparse amplitude vector over primitives, so its base
//! pose and its trajectories both follow from the amplitudes.
//!
//! Class layout for `C` classes: `C / 3` singletons (rounded so the rest pair
//! up) and the rest in twin pairs. Twins share one primitive at weight 1 and
//! each adds a modifier primitive of its own at `modifier_weight`. Each
//! singleton owns two primitives no other class uses. Twin classes are therefore each other's nearest
//! neighbour in embedding space, and singletons are maximally isolated.
//!
//! With `correlated_embeddings`, a class embedding is its unit-normalized
//! amplitude vector zero-padded to `embedding_dim`; otherwise it is a random
//! unit vector.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::embeddings::{random_embeddings, EmbeddingSource, LabelEmbeddingTable};
use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{unit_normalize_slice, Rng, Tensor};
use crate::skeleton::{JointTopology, SkeletonSequence};

pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const SPEC_FILE: &str = "synthetic_spec.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub samples_per_class: usize,
    /// Per-class counts; overrides `samples_per_class` when present.
    pub class_sample_counts: Option<Vec<usize>>,
    pub frames: usize,
    pub persons: usize,
    /// 25 uses the NTU skeleton; any other count uses a chain.
    pub joints: usize,
    pub embedding_dim: usize,
    pub correlated_embeddings: bool,
    /// Static displacement per unit amplitude.
    pub static_offset: f64,
    /// Sinusoid amplitude per unit amplitude.
    pub oscillation: f64,
    pub modifier_weight: f64,
    /// Relative per-sample jitter of each primitive amplitude.
    pub amplitude_jitter: f64,
    /// Std of i.i.d. coordinate noise.
    pub noise_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            class_count: 12,
            samples_per_class: 30,
            class_sample_counts: None,
            frames: 20,
            persons: 1,
            joints: 25,
            embedding_dim: 32,
            correlated_embeddings: true,
            static_offset: 0.3,
            oscillation: 0.2,
            modifier_weight: 0.1,
            amplitude_jitter: 0.15,
            noise_scale: 0.02,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config(format!("synthetic class_count must be >= 2, got {}", self.class_count)));
        }
        if let Some(counts) = &self.class_sample_counts {
            if counts.len() != self.class_count || counts.contains(&0) {
                return Err(Error::Config("class_sample_counts needs one positive count per class".into()));
            }
        } else if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if self.frames == 0 || self.persons == 0 || self.joints < 2 {
            return Err(Error::Config("synthetic frames, persons must be positive and joints >= 2".into()));
        }
        let p = primitive_count(self.class_count);
        let distinct = 9 * joint_groups(self.joints).len();
        if p > distinct {
            return Err(Error::Config(format!(
                "{} classes need {p} primitives but {} joints support {distinct} distinct motions",
                self.class_count, self.joints
            )));
        }
        if self.correlated_embeddings && self.embedding_dim < p {
            return Err(Error::Config(format!(
                "correlated embeddings need embedding_dim >= {p} primitives, got {}",
                self.embedding_dim
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        for (name, v) in [
            ("static_offset", self.static_offset),
            ("oscillation", self.oscillation),
            ("modifier_weight", self.modifier_weight),
            ("amplitude_jitter", self.amplitude_jitter),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("synthetic {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn count_for(&self, class: usize) -> usize {
        self.class_sample_counts.as_ref().map_or(self.samples_per_class, |c| c[class])
    }

    pub fn topology(&self) -> Result<JointTopology> {
        if self.joints == 25 {
            Ok(JointTopology::ntu())
        } else {
            JointTopology::chain(self.joints)
        }
    }
}

fn layout(class_count: usize) -> (usize, usize, usize) {
    let mut singles = class_count / 3;
    if (class_count - singles) % 2 == 1 {
        singles += 1;
    }
    let pairs = (class_count - singles) / 2;
    (pairs, 2 * pairs, singles)
}

pub fn primitive_count(class_count: usize) -> usize {
    let (pairs, modifiers, singles) = layout(class_count);
    pairs + modifiers + 2 * singles
}

/// Amplitude vector of every class, `[class][primitive]`.
pub fn class_amplitudes(class_count: usize, modifier_weight: f64) -> Vec<Vec<f64>> {
    let (pairs, modifiers, singles) = layout(class_count);
    let p = primitive_count(class_count);
    let mut out = Vec::with_capacity(class_count);
    for k in 0..pairs {
        for twin in 0..2 {
            let mut a = vec![0.0; p];
            a[k] = 1.0;
            a[pairs + 2 * k + twin] = modifier_weight;
            out.push(a);
        }
    }
    let first_exclusive = pairs + modifiers;
    for s in 0..singles {
        let mut a = vec![0.0; p];
        a[first_exclusive + 2 * s] = 1.0;
        a[first_exclusive + 2 * s + 1] = 1.0;
        out.push(a);
    }
    out
}

/// Standing pose for the NTU skeleton, metres, y up.
const NTU_POSE: [[f64; 3]; 25] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.3, 0.0],
    [0.0, 0.65, 0.0],
    [0.0, 0.8, 0.0],
    [-0.2, 0.55, 0.0],
    [-0.25, 0.3, 0.0],
    [-0.28, 0.05, 0.0],
    [-0.28, -0.02, 0.0],
    [0.2, 0.55, 0.0],
    [0.25, 0.3, 0.0],
    [0.28, 0.05, 0.0],
    [0.28, -0.02, 0.0],
    [-0.1, 0.0, 0.0],
    [-0.1, -0.45, 0.0],
    [-0.1, -0.85, 0.0],
    [-0.1, -0.9, 0.1],
    [0.1, 0.0, 0.0],
    [0.1, -0.45, 0.0],
    [0.1, -0.85, 0.0],
    [0.1, -0.9, 0.1],
    [0.0, 0.55, 0.0],
    [-0.28, -0.1, 0.0],
    [-0.24, -0.05, 0.03],
    [0.28, -0.1, 0.0],
    [0.24, -0.05, 0.03],
];

/// Torso, left arm, right arm, left leg, right leg.
const NTU_GROUPS: [&[usize]; 5] = [
    &[0, 1, 2, 3, 20],
    &[4, 5, 6, 7, 21, 22],
    &[8, 9, 10, 11, 23, 24],
    &[12, 13, 14, 15],
    &[16, 17, 18, 19],
];

fn rest_pose(joints: usize) -> Vec<[f64; 3]> {
    if joints == 25 {
        NTU_POSE.to_vec()
    } else {
        (0..joints).map(|j| [0.0, -0.1 * j as f64, 0.0]).collect()
    }
}

/// `(group, axis, cycles per clip)` of primitive `m` with `g` joint groups.
pub fn primitive_motion(m: usize, g: usize) -> (usize, usize, usize) {
    let slots = 3 * g;
    ((m % slots) % g, (m % slots) / g, 1 + (m + m / slots) % 3)
}

fn joint_groups(joints: usize) -> Vec<Vec<usize>> {
    if joints == 25 {
        return NTU_GROUPS.iter().map(|g| g.to_vec()).collect();
    }
    let g = joints.min(5);
    (0..g).map(|k| (k * joints / g..(k + 1) * joints / g).collect()).collect()
}

/// Generated benchmark held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub dataset: Dataset,
    pub embeddings: LabelEmbeddingTable,
    pub amplitudes: Vec<Vec<f64>>,
}

pub fn class_label(class: usize) -> String {
    format!("action_{class:02}")
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec, rng: &mut Rng) -> Result<SyntheticDataset> {
    spec.validate()?;
    let topology = spec.topology()?;
    let amplitudes = class_amplitudes(spec.class_count, spec.modifier_weight);
    let p = primitive_count(spec.class_count);
    let groups = joint_groups(spec.joints);
    let pose = rest_pose(spec.joints);
    let labels: Vec<String> = (0..spec.class_count).map(class_label).collect();

    let mut motion_rng = rng.fork("motion");
    let (t_len, v, persons) = (spec.frames, spec.joints, spec.persons);
    let mut ids = Vec::new();
    let mut samples = Vec::new();
    for (c, amps) in amplitudes.iter().enumerate() {
        for i in 0..spec.count_for(c) {
            let mut seq = SkeletonSequence::zeros(persons, t_len, v, c);
            for person in 0..persons {
                let shift = person as f64;
                let active: Vec<(usize, f64, f64)> = (0..p)
                    .filter(|&m| amps[m] != 0.0)
                    .map(|m| {
                        let a = amps[m] * (1.0 + spec.amplitude_jitter * motion_rng.normal());
                        let phase = motion_rng.uniform_range(0.0, std::f64::consts::TAU);
                        (m, a, phase)
                    })
                    .collect();
                for t in 0..t_len {
                    for j in 0..v {
                        let mut xyz = pose[j];
                        xyz[0] += shift;
                        for &(m, a, phase) in &active {
                            let (group, axis, cycles) = primitive_motion(m, groups.len());
                            if !groups[group].contains(&j) {
                                continue;
                            }
                            let cycles = cycles as f64;
                            let wave = (std::f64::consts::TAU * cycles * t as f64 / t_len as f64 + phase).sin();
                            xyz[axis] += a * (spec.static_offset + spec.oscillation * wave);
                        }
                        for (axis, x) in xyz.iter().enumerate() {
                            let o = seq.offset(person, t, j, axis);
                            seq.coords_mut()[o] = x + spec.noise_scale * motion_rng.normal();
                        }
                    }
                }
            }
            ids.push(format!("{}_{i:03}", labels[c]));
            samples.push(seq);
        }
    }

    let embeddings = if spec.correlated_embeddings {
        let mut rows = Vec::with_capacity(spec.class_count * spec.embedding_dim);
        for a in &amplitudes {
            let mut row = unit_normalize_slice(a)?;
            row.resize(spec.embedding_dim, 0.0);
            rows.extend(row);
        }
        LabelEmbeddingTable::new(
            labels.clone(),
            Tensor::matrix(spec.class_count, spec.embedding_dim, rows)?,
            EmbeddingSource::Loaded,
        )?
    } else {
        let t = random_embeddings(&labels, spec.embedding_dim, &mut rng.fork("embeddings"))?;
        LabelEmbeddingTable::new(labels.clone(), t.embeddings().clone(), EmbeddingSource::Loaded)?
    };

    Ok(SyntheticDataset {
        spec: spec.clone(),
        dataset: Dataset {
            topology,
            labels,
            ids,
            samples,
        },
        embeddings,
        amplitudes,
    })
}

impl SyntheticDataset {
    /// Writes the dataset directory, `embeddings.csv` and the generating spec.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.dataset.save(dir)?;
        self.embeddings.save(&dir.join(EMBEDDINGS_FILE))?;
        io::write_json(&dir.join(SPEC_FILE), &self.spec)
    }
}
