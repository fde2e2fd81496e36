//! Body-joint graph, adjacency normalization and skeleton sequence validation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// NTU RGB+D joint names, in dataset order.
pub const NTU_JOINT_NAMES: [&str; 25] = [
    "spine_base",
    "spine_mid",
    "neck",
    "head",
    "shoulder_left",
    "elbow_left",
    "wrist_left",
    "hand_left",
    "shoulder_right",
    "elbow_right",
    "wrist_right",
    "hand_right",
    "hip_left",
    "knee_left",
    "ankle_left",
    "foot_left",
    "hip_right",
    "knee_right",
    "ankle_right",
    "foot_right",
    "spine_shoulder",
    "handtip_left",
    "thumb_left",
    "handtip_right",
    "thumb_right",
];

/// The 24 bones of the NTU RGB+D skeleton (0-based joint indices). The graph is a tree.
pub const NTU_BONES: [[usize; 2]; 24] = [
    [0, 1],
    [1, 20],
    [2, 20],
    [3, 2],
    [4, 20],
    [5, 4],
    [6, 5],
    [7, 6],
    [8, 20],
    [9, 8],
    [10, 9],
    [11, 10],
    [12, 0],
    [13, 12],
    [14, 13],
    [15, 14],
    [16, 0],
    [17, 16],
    [18, 17],
    [19, 18],
    [21, 22],
    [22, 7],
    [23, 24],
    [24, 11],
];

/// Joint graph: anatomical bones over `joint_count` joints.
///
/// Edges are stored with the smaller index first and contain no self-loops;
/// the graph is connected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TopologyFile", into = "TopologyFile")]
pub struct JointTopology {
    joint_count: usize,
    names: Option<Vec<String>>,
    edges: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct TopologyFile {
    joint_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<TopologyFile> for JointTopology {
    type Error = Error;
    fn try_from(f: TopologyFile) -> Result<Self> {
        JointTopology::new(f.joint_count, f.edges, f.names)
    }
}

impl From<JointTopology> for TopologyFile {
    fn from(t: JointTopology) -> Self {
        TopologyFile {
            joint_count: t.joint_count,
            names: t.names,
            edges: t.edges,
        }
    }
}

impl JointTopology {
    pub fn new(joint_count: usize, edges: Vec<[usize; 2]>, names: Option<Vec<String>>) -> Result<Self> {
        if joint_count == 0 {
            return Err(Error::Topology("joint_count must be positive".into()));
        }
        if let Some(names) = &names {
            if names.len() != joint_count {
                return Err(Error::Topology(format!(
                    "{} names for {joint_count} joints",
                    names.len()
                )));
            }
        }
        let mut seen = BTreeSet::new();
        let mut normalized = Vec::with_capacity(edges.len());
        for [a, b] in edges {
            if a >= joint_count || b >= joint_count {
                return Err(Error::Topology(format!(
                    "edge ({a}, {b}) out of range for {joint_count} joints"
                )));
            }
            if a == b {
                return Err(Error::Topology(format!("self-loop on joint {a}")));
            }
            let e = [a.min(b), a.max(b)];
            if !seen.insert(e) {
                return Err(Error::Topology(format!("duplicate edge ({a}, {b})")));
            }
            normalized.push(e);
        }
        let topo = Self {
            joint_count,
            names,
            edges: normalized,
        };
        if !topo.is_connected() {
            return Err(Error::Topology("joint graph is not connected".into()));
        }
        Ok(topo)
    }

    /// The 25-joint NTU RGB+D skeleton.
    pub fn ntu() -> Self {
        Self::new(
            25,
            NTU_BONES.to_vec(),
            Some(NTU_JOINT_NAMES.iter().map(|s| s.to_string()).collect()),
        )
        .expect("NTU bone list is a valid tree")
    }

    /// Path graph 0 - 1 - ... - (n-1).
    pub fn chain(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| [i - 1, i]).collect(), None)
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    /// Relabels joints: old joint `i` becomes joint `perm[i]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.joint_count {
            return Err(Error::Topology("permutation length mismatch".into()));
        }
        let names = self.names.as_ref().map(|names| {
            let mut out = vec![String::new(); names.len()];
            for (i, n) in names.iter().enumerate() {
                out[perm[i]] = n.clone();
            }
            out
        });
        let edges = self.edges.iter().map(|&[a, b]| [perm[a], perm[b]]).collect();
        Self::new(self.joint_count, edges, names)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn is_connected(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.joint_count).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut components = self.joint_count;
        for &[a, b] in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
                components -= 1;
            }
        }
        components == 1
    }
}

/// Binary adjacency: symmetric 0/1 with zero diagonal.
pub fn build_adjacency(topology: &JointTopology) -> Result<Tensor> {
    let n = topology.joint_count();
    let mut a = Tensor::zeros(&[n, n]);
    for &[i, j] in topology.edges() {
        if i >= n || j >= n {
            return Err(Error::Topology(format!("edge ({i}, {j}) out of range")));
        }
        a.data_mut()[i * n + j] = 1.0;
        a.data_mut()[j * n + i] = 1.0;
    }
    Ok(a)
}

/// `D^(-1/2) (A + I) D^(-1/2)` with `D` the degree matrix of `A + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: Tensor,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.data()[i * self.size() + j]
    }
}

pub fn normalize_adjacency(a: &Tensor) -> Result<NormalizedAdjacency> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(Error::Shape(format!("adjacency must be square, got {:?}", a.dims())));
    }
    let n = a.rows();
    let d = a.data();
    for i in 0..n {
        if d[i * n + i] != 0.0 {
            return Err(Error::Topology(format!("adjacency has a self-loop at {i}")));
        }
        for j in 0..n {
            let x = d[i * n + j];
            if x != 0.0 && x != 1.0 {
                return Err(Error::Topology(format!("adjacency entry ({i}, {j}) = {x} is not 0/1")));
            }
            if x != d[j * n + i] {
                return Err(Error::Topology(format!("adjacency not symmetric at ({i}, {j})")));
            }
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let deg = 1.0 + d[i * n..(i + 1) * n].iter().sum::<f64>();
            1.0 / deg.sqrt()
        })
        .collect();
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let aij = if i == j { 1.0 } else { d[i * n + j] };
            if aij != 0.0 {
                m.data_mut()[i * n + j] = inv_sqrt_deg[i] * aij * inv_sqrt_deg[j];
            }
        }
    }
    Ok(NormalizedAdjacency { matrix: m })
}

/// One action sample: coordinates of dims `[persons, frames, joints, 3]`.
///
/// Values are kept raw so that malformed inputs can be diagnosed by
/// [`validate_sequence`]; absent persons are all-zero slices.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    dims: [usize; 4],
    coords: Vec<f64>,
    label_index: usize,
}

impl SkeletonSequence {
    pub fn new(dims: [usize; 4], coords: Vec<f64>, label_index: usize) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != coords.len() || n == 0 {
            return Err(Error::Shape(format!(
                "sequence dims {dims:?} need {n} values, got {}",
                coords.len()
            )));
        }
        Ok(Self {
            dims,
            coords,
            label_index,
        })
    }

    pub fn zeros(persons: usize, frames: usize, joints: usize, label_index: usize) -> Self {
        Self {
            dims: [persons, frames, joints, 3],
            coords: vec![0.0; persons * frames * joints * 3],
            label_index,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn persons(&self) -> usize {
        self.dims[0]
    }

    pub fn frames(&self) -> usize {
        self.dims[1]
    }

    pub fn joints(&self) -> usize {
        self.dims[2]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    pub fn label_index(&self) -> usize {
        self.label_index
    }

    pub fn set_label_index(&mut self, label: usize) {
        self.label_index = label;
    }

    pub fn offset(&self, person: usize, frame: usize, joint: usize, axis: usize) -> usize {
        let [_, t, v, c] = self.dims;
        ((person * t + frame) * v + joint) * c + axis
    }

    /// `[frames, joints, 3]` slab of one person.
    pub fn person(&self, person: usize) -> &[f64] {
        let len = self.dims[1] * self.dims[2] * self.dims[3];
        &self.coords[person * len..(person + 1) * len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    NonFinite {
        person: usize,
        frame: usize,
        joint: usize,
        axis: usize,
        value: f64,
    },
    JointCount { expected: usize, found: usize },
    CoordinateAxes { found: usize },
    Label { index: usize, class_count: usize },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::NonFinite {
                person,
                frame,
                joint,
                axis,
                value,
            } => write!(
                f,
                "non-finite coordinate {value} at person {person}, frame {frame}, joint {joint}, axis {axis}"
            ),
            Diagnostic::JointCount { expected, found } => {
                write!(f, "sequence has {found} joints, topology has {expected}")
            }
            Diagnostic::CoordinateAxes { found } => write!(f, "expected 3 coordinate axes, found {found}"),
            Diagnostic::Label { index, class_count } => {
                write!(f, "label index {index} out of range for {class_count} classes")
            }
        }
    }
}

/// Collected problems with one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics(pub Vec<Diagnostic>);

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

/// Reports dimension mismatches, non-finite coordinates and out-of-range
/// labels. Never mutates the sequence.
pub fn validate_sequence(
    seq: &SkeletonSequence,
    topology: &JointTopology,
    class_count: Option<usize>,
) -> std::result::Result<(), Diagnostics> {
    let mut out = Vec::new();
    let [persons, frames, joints, axes] = seq.dims;
    if joints != topology.joint_count() {
        out.push(Diagnostic::JointCount {
            expected: topology.joint_count(),
            found: joints,
        });
    }
    if axes != 3 {
        out.push(Diagnostic::CoordinateAxes { found: axes });
    }
    if let Some(c) = class_count {
        if seq.label_index >= c {
            out.push(Diagnostic::Label {
                index: seq.label_index,
                class_count: c,
            });
        }
    }
    for p in 0..persons {
        for t in 0..frames {
            for v in 0..joints {
                for a in 0..axes {
                    let x = seq.coords[seq.offset(p, t, v, a)];
                    if !x.is_finite() {
                        out.push(Diagnostic::NonFinite {
                            person: p,
                            frame: t,
                            joint: v,
                            axis: a,
                            value: x,
                        });
                    }
                }
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(Diagnostics(out))
    }
}
