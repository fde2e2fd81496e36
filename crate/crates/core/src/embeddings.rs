//! Class-label embedding tables: CSV ingestion, random ablation tables and
//! pairwise distances.
//!
//! CSV layout: header `label,d0,d1,...,d{D-1}`, one row per class, UTF-8,
//! labels quoted per RFC 4180 when they contain commas or quotes.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, unit_normalize_slice, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EmbeddingSource {
    Loaded,
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Cosine,
    Euclidean,
}

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddingTable {
    labels: Vec<String>,
    embeddings: Tensor,
    source: EmbeddingSource,
    normalized: bool,
}

impl LabelEmbeddingTable {
    pub fn new(labels: Vec<String>, embeddings: Tensor, source: EmbeddingSource) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for embedding matrix {:?}",
                labels.len(),
                embeddings.dims()
            )));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::Data(format!("duplicate label {l:?}")));
            }
        }
        let normalized = (0..labels.len()).all(|i| (l2_norm(embeddings.row(i)) - 1.0).abs() <= NORM_TOLERANCE);
        Ok(Self {
            labels,
            embeddings,
            source,
            normalized,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn row(&self, class: usize) -> &[f64] {
        self.embeddings.row(class)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Copy with every row scaled to unit norm.
    pub fn normalized(&self) -> Result<Self> {
        let mut data = Vec::with_capacity(self.embeddings.len());
        for (i, label) in self.labels.iter().enumerate() {
            let row = unit_normalize_slice(self.row(i))
                .map_err(|_| Error::Degenerate(format!("embedding of {label:?} has zero norm")))?;
            data.extend(row);
        }
        Self::new(
            self.labels.clone(),
            Tensor::matrix(self.len(), self.dim(), data)?,
            self.source,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim()).map(|d| format!("d{d}")));
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for (i, label) in self.labels.iter().enumerate() {
            let mut record = vec![label.clone()];
            record.extend(self.row(i).iter().map(|&x| format!("{}", x as f32)));
            w.write_record(&record).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

/// Reads an embedding CSV. With `expected_labels`, the file's label set must
/// equal the expected set and rows are reordered to match it.
pub fn load_embeddings(path: &Path, expected_labels: Option<&[String]>) -> Result<LabelEmbeddingTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(parse_err(1, "header must be label,d0,d1,...".into()));
    }
    let dim = header.len() - 1;
    let mut labels: Vec<String> = Vec::new();
    let mut first_line: HashMap<String, usize> = HashMap::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != dim + 1 {
            return Err(parse_err(
                line,
                format!("ragged row: {} values, header declares {dim}", record.len() - 1),
            ));
        }
        let label = record[0].to_string();
        if let Some(prev) = first_line.get(&label) {
            return Err(parse_err(line, format!("duplicate label {label:?} (first on line {prev})")));
        }
        for (d, cell) in record.iter().skip(1).enumerate() {
            let x: f32 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric value {cell:?} in column d{d}")))?;
            if !x.is_finite() {
                return Err(parse_err(line, format!("non-finite value {cell:?} in column d{d}")));
            }
            data.push(x as f64);
        }
        first_line.insert(label.clone(), line);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no embedding rows".into()));
    }
    let table = LabelEmbeddingTable::new(labels, Tensor::matrix(first_line.len(), dim, data)?, EmbeddingSource::Loaded)?;
    match expected_labels {
        None => Ok(table),
        Some(expected) => reorder(&table, expected, &first_line, path),
    }
}

fn reorder(
    table: &LabelEmbeddingTable,
    expected: &[String],
    lines: &HashMap<String, usize>,
    path: &Path,
) -> Result<LabelEmbeddingTable> {
    for label in expected {
        if table.index_of(label).is_none() {
            return Err(Error::MissingLabel(label.clone()));
        }
    }
    let wanted: HashSet<&str> = expected.iter().map(String::as_str).collect();
    if let Some(extra) = table.labels.iter().find(|l| !wanted.contains(l.as_str())) {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: lines[extra],
            message: format!("unexpected label {extra:?}"),
        });
    }
    let mut data = Vec::with_capacity(table.embeddings.len());
    for label in expected {
        data.extend_from_slice(table.row(table.index_of(label).expect("checked above")));
    }
    LabelEmbeddingTable::new(
        expected.to_vec(),
        Tensor::matrix(expected.len(), table.dim(), data)?,
        table.source,
    )
}

/// Random ablation table: i.i.d. standard normal rows, unit-normalized.
pub fn random_embeddings(labels: &[String], dim: usize, rng: &mut Rng) -> Result<LabelEmbeddingTable> {
    if dim == 0 {
        return Err(Error::Config("embedding dim must be at least 1".into()));
    }
    if labels.is_empty() {
        return Err(Error::Config("no labels".into()));
    }
    let seed = rng.seed();
    let mut data = Vec::with_capacity(labels.len() * dim);
    for _ in labels {
        loop {
            let row: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            if let Ok(row) = unit_normalize_slice(&row) {
                data.extend(row);
                break;
            }
        }
    }
    LabelEmbeddingTable::new(
        labels.to_vec(),
        Tensor::matrix(labels.len(), dim, data)?,
        EmbeddingSource::Random { seed },
    )
}

/// Symmetric `C x C` distance matrix with zero diagonal.
/// Cosine distance is `1 - cos(a, b)`.
pub fn pairwise_distances(table: &LabelEmbeddingTable, metric: DistanceMetric) -> Result<Tensor> {
    let c = table.len();
    if c == 0 {
        return Err(Error::Data("empty embedding table".into()));
    }
    let norms: Vec<f64> = (0..c).map(|i| l2_norm(table.row(i))).collect();
    if metric == DistanceMetric::Cosine {
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::Degenerate(format!(
                "embedding of {:?} has zero norm under cosine distance",
                table.labels[i]
            )));
        }
    }
    let mut out = Tensor::zeros(&[c, c]);
    for i in 0..c {
        for j in i + 1..c {
            let (a, b) = (table.row(i), table.row(j));
            let d = match metric {
                DistanceMetric::Cosine => 1.0 - dot(a, b) / (norms[i] * norms[j]),
                DistanceMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            };
            out.data_mut()[i * c + j] = d;
            out.data_mut()[j * c + i] = d;
        }
    }
    Ok(out)
}
