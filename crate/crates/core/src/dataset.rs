//! Skeleton datasets on disk.
//!
//! A dataset directory holds `manifest.json` (an array of `{id, label, file}`
//! entries, `file` relative to the directory), one `ZTNS` tensor per sample
//! with dims `[persons, frames, joints, 3]`, and optionally `topology.json`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::skeleton::{JointTopology, SkeletonSequence};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOPOLOGY_FILE: &str = "topology.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: String,
    pub file: String,
}

/// Samples with ids, class labels and the joint graph they live on.
///
/// `labels[c]` names class index `c`; every sample's `label_index` points
/// into `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub topology: JointTopology,
    pub labels: Vec<String>,
    pub ids: Vec<String>,
    pub samples: Vec<SkeletonSequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn index_of_id(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Clones of the samples whose class satisfies `keep`.
    pub fn samples_where(&self, keep: impl Fn(usize) -> bool) -> Vec<SkeletonSequence> {
        self.samples.iter().filter(|s| keep(s.label_index())).cloned().collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = Vec::with_capacity(self.len());
        for (id, seq) in self.ids.iter().zip(&self.samples) {
            let file = format!("samples/{id}.ztns");
            let dims = seq.dims();
            io::write_tensor(&dir.join(&file), &dims, seq.coords())?;
            manifest.push(ManifestEntry {
                id: id.clone(),
                label: self.labels[seq.label_index()].clone(),
                file,
            });
        }
        io::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        self.topology.save(&dir.join(TOPOLOGY_FILE))
    }

    /// Loads a dataset directory.
    ///
    /// Class indices follow `class_order` when given (every manifest label
    /// must appear in it), otherwise first appearance in the manifest. The
    /// topology is `topology`, else the directory's `topology.json`, else the
    /// NTU skeleton.
    pub fn load(dir: &Path, class_order: Option<&[String]>, topology: Option<JointTopology>) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Vec<ManifestEntry> = io::read_json(&manifest_path)?;
        if manifest.is_empty() {
            return Err(Error::Data(format!("{} lists no samples", manifest_path.display())));
        }
        let topology = match topology {
            Some(t) => t,
            None if dir.join(TOPOLOGY_FILE).exists() => JointTopology::load(&dir.join(TOPOLOGY_FILE))?,
            None => JointTopology::ntu(),
        };
        let mut labels: Vec<String> = class_order.map(|c| c.to_vec()).unwrap_or_default();
        let mut ids = Vec::with_capacity(manifest.len());
        let mut seen_ids = HashSet::new();
        let mut samples = Vec::with_capacity(manifest.len());
        for entry in &manifest {
            if !seen_ids.insert(entry.id.clone()) {
                return Err(Error::Data(format!("duplicate sample id {:?} in manifest", entry.id)));
            }
            let class = match labels.iter().position(|l| l == &entry.label) {
                Some(c) => c,
                None if class_order.is_some() => return Err(Error::MissingLabel(entry.label.clone())),
                None => {
                    labels.push(entry.label.clone());
                    labels.len() - 1
                }
            };
            let path = dir.join(&entry.file);
            let raw = io::read_tensor(&path)?;
            if raw.dims.len() != 4 || raw.dims[3] != 3 {
                return Err(Error::Format {
                    path,
                    message: format!("sample dims {:?} are not [persons, frames, joints, 3]", raw.dims),
                });
            }
            let dims = [raw.dims[0], raw.dims[1], raw.dims[2], raw.dims[3]];
            samples.push(SkeletonSequence::new(dims, raw.data, class)?);
            ids.push(entry.id.clone());
        }
        Ok(Self {
            topology,
            labels,
            ids,
            samples,
        })
    }
}
