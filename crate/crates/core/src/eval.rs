//! ZSL / GZSL evaluation with flat hit@k, per-run JSON reports and the
//! aggregate results table.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::devise::{predict_devise, DeviseProjection};
use crate::embeddings::{EmbeddingSource, LabelEmbeddingTable};
use crate::encoder::VisualFeatureMatrix;
use crate::error::{Error, Result};
use crate::io;
use crate::relation::{predict_relation, RelationModel};
use crate::split::{ClassSplit, SplitFile, SplitStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Devise,
    Relation,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Devise => "devise",
            HeadKind::Relation => "relation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Zsl,
    Gzsl,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Zsl => "zsl",
            Paradigm::Gzsl => "gzsl",
        }
    }

    pub fn candidates(self, split: &ClassSplit) -> Vec<usize> {
        match self {
            Paradigm::Zsl => split.unseen().to_vec(),
            Paradigm::Gzsl => split.all_classes(),
        }
    }
}

/// A trained head that ranks candidate classes for one feature vector.
pub trait ZeroShotHead {
    fn kind(&self) -> HeadKind;
    fn rank(&self, feature: &[f64], candidates: &[usize], table: &LabelEmbeddingTable) -> Result<Vec<(usize, f64)>>;
}

impl ZeroShotHead for DeviseProjection {
    fn kind(&self) -> HeadKind {
        HeadKind::Devise
    }

    fn rank(&self, feature: &[f64], candidates: &[usize], table: &LabelEmbeddingTable) -> Result<Vec<(usize, f64)>> {
        predict_devise(self, feature, candidates, table)
    }
}

impl ZeroShotHead for RelationModel {
    fn kind(&self) -> HeadKind {
        HeadKind::Relation
    }

    fn rank(&self, feature: &[f64], candidates: &[usize], table: &LabelEmbeddingTable) -> Result<Vec<(usize, f64)>> {
        predict_relation(self, feature, candidates, table)
    }
}

/// Sorts by descending score; equal scores keep the lower class index first.
pub fn rank_by_score(mut scored: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

/// Number of samples whose true class is within the top `k` of its ranking.
pub fn hits_at_k(rankings: &[Vec<usize>], truth: &[usize], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Usage("hit@k needs k >= 1".into()));
    }
    if rankings.len() != truth.len() {
        return Err(Error::Shape(format!("{} rankings for {} labels", rankings.len(), truth.len())));
    }
    let mut hits = 0;
    for (r, &t) in rankings.iter().zip(truth) {
        if k > r.len() {
            return Err(Error::Usage(format!("hit@{k} requested over a ranking of {} classes", r.len())));
        }
        if r[..k].contains(&t) {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Fraction of samples whose true class is within the top `k`.
pub fn hit_at_k(rankings: &[Vec<usize>], truth: &[usize], k: usize) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Data("hit@k over zero samples".into()));
    }
    Ok(hits_at_k(rankings, truth, k)? as f64 / rankings.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub head: HeadKind,
    pub embedding_source: EmbeddingSource,
    pub split: SplitFile,
    pub paradigm: Paradigm,
    /// Accuracy in [0, 1] for every reported k.
    pub hit_at: BTreeMap<usize, f64>,
    pub sample_count: usize,
    pub candidate_count: usize,
    pub config_echo: serde_json::Value,
}

impl EvalReport {
    pub fn hit1(&self) -> f64 {
        self.hit_at.get(&1).copied().unwrap_or(f64::NAN)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}

/// Evaluates `head` on unseen-class samples under `paradigm`.
///
/// Values of `ks` larger than the candidate count are not reported.
pub fn evaluate(
    head: &dyn ZeroShotHead,
    features: &VisualFeatureMatrix,
    split: &ClassSplit,
    table: &LabelEmbeddingTable,
    paradigm: Paradigm,
    ks: &[usize],
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    if features.is_empty() {
        return Err(Error::Data("evaluation needs at least one sample".into()));
    }
    if let Some(&bad) = features.label_indices.iter().find(|&&c| !split.is_unseen(c)) {
        return Err(Error::contamination(
            &format!("evaluate_{}", paradigm.name()),
            format!("test features include a sample of seen class {bad}"),
        ));
    }
    let candidates = paradigm.candidates(split);
    let mut ks: Vec<usize> = ks.iter().copied().filter(|&k| k >= 1 && k <= candidates.len()).collect();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        return Err(Error::Usage(format!("no requested k fits {} candidates", candidates.len())));
    }
    let rankings = (0..features.len())
        .map(|i| Ok(head.rank(features.row(i), &candidates, table)?.into_iter().map(|x| x.0).collect()))
        .collect::<Result<Vec<Vec<usize>>>>()?;
    let mut hit_at = BTreeMap::new();
    for &k in &ks {
        hit_at.insert(k, hit_at_k(&rankings, &features.label_indices, k)?);
    }
    Ok(EvalReport {
        head: head.kind(),
        embedding_source: table.source(),
        split: split.to_file(table.labels())?,
        paradigm,
        hit_at,
        sample_count: features.len(),
        candidate_count: candidates.len(),
        config_echo,
    })
}

pub fn evaluate_zsl(
    head: &dyn ZeroShotHead,
    features: &VisualFeatureMatrix,
    split: &ClassSplit,
    table: &LabelEmbeddingTable,
    ks: &[usize],
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    evaluate(head, features, split, table, Paradigm::Zsl, ks, config_echo)
}

pub fn evaluate_gzsl(
    head: &dyn ZeroShotHead,
    features: &VisualFeatureMatrix,
    split: &ClassSplit,
    table: &LabelEmbeddingTable,
    ks: &[usize],
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    evaluate(head, features, split, table, Paradigm::Gzsl, ks, config_echo)
}

fn source_name(source: EmbeddingSource) -> &'static str {
    match source {
        EmbeddingSource::Loaded => "loaded",
        EmbeddingSource::Random { .. } => "random",
    }
}

fn strategy_name(strategy: SplitStrategy) -> &'static str {
    match strategy {
        SplitStrategy::Nearest => "nearest",
        SplitStrategy::Furthest => "furthest",
        SplitStrategy::Random => "random",
    }
}

/// Results table: rows are head × embedding source, columns split × paradigm
/// × k. Cells average every report that lands in them, as percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub columns: Vec<(String, Paradigm, usize)>,
    pub rows: Vec<((HeadKind, String), Vec<Option<f64>>)>,
}

impl ResultsTable {
    pub fn from_reports(reports: &[EvalReport]) -> Self {
        let mut cells: BTreeMap<((HeadKind, String), (String, Paradigm, usize)), (f64, usize)> = BTreeMap::new();
        for r in reports {
            let row = (r.head, source_name(r.embedding_source).to_string());
            for (&k, &acc) in &r.hit_at {
                let col = (strategy_name(r.split.strategy).to_string(), r.paradigm, k);
                let e = cells.entry((row.clone(), col)).or_insert((0.0, 0));
                e.0 += acc;
                e.1 += 1;
            }
        }
        let split_order = |s: &str| ["nearest", "random", "furthest"].iter().position(|x| *x == s).unwrap_or(3);
        let mut columns: Vec<(String, Paradigm, usize)> = cells.keys().map(|(_, c)| c.clone()).collect();
        columns.sort_by(|a, b| split_order(&a.0).cmp(&split_order(&b.0)).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        columns.dedup();
        let mut row_keys: Vec<(HeadKind, String)> = cells.keys().map(|(r, _)| r.clone()).collect();
        row_keys.dedup();
        let rows = row_keys
            .into_iter()
            .map(|rk| {
                let vals = columns
                    .iter()
                    .map(|c| cells.get(&(rk.clone(), c.clone())).map(|(s, n)| 100.0 * s / *n as f64))
                    .collect();
                (rk, vals)
            })
            .collect();
        Self { columns, rows }
    }

    fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|(s, p, k)| format!("{s}/{}/top{k}", p.name())).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["head".to_string(), "embeddings".to_string()];
        header.extend(self.column_names());
        w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
        for ((head, source), vals) in &self.rows {
            let mut rec = vec![head.name().to_string(), source.clone()];
            rec.extend(vals.iter().map(|v| v.map(|x| format!("{x:.2}")).unwrap_or_default()));
            w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let names = self.column_names();
        let mut out = format!("| head | embeddings | {} |\n", names.join(" | "));
        out.push_str(&format!("|---|---|{}\n", "---:|".repeat(names.len())));
        for ((head, source), vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "–".into())).collect();
            out.push_str(&format!("| {} | {} | {} |\n", head.name(), source, cells.join(" | ")));
        }
        out
    }
}
