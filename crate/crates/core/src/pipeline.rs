//! End-to-end experiment runner.
//!
//! Stages run in a fixed order. Each persists its artifacts under the output
//! directory, and every stage reads its inputs back from there:
//!
//! | stage | writes |
//! |---|---|
//! | `generate` | `data/` (synthetic datasets), `embeddings/{loaded,random}.csv` |
//! | `make-split` | `split.json` |
//! | `train-encoder` | `encoder.zstg`, `encoder_train.json` |
//! | `extract-features` | `features/train.zfea`, `features/test.zfea` |
//! | `train-devise` | `heads/devise_{source}.zdvs` |
//! | `train-relation` | `heads/relation_{source}.zrel` |
//! | `evaluate` | `reports/{head}_{source}_{paradigm}.json` |
//! | `report` | `results.csv`, `results.md` |
//!
//! `stages.json` records one fingerprint per completed stage: SHA-256 over the
//! stage name, the master seed, the configuration the stage reads, and the
//! fingerprints and output-file digests of its upstream stages. A stage whose
//! fingerprint matches and whose outputs exist is reused unless forced, so an
//! edited intermediate re-runs exactly the stages that consume it. Every stage draws randomness
//! from `derive_seed(master_seed, stage name)`.
//!
//! After the training stages, a hygiene audit re-reads the encoder training
//! ids and the head training features and confirms that none belongs to an
//! unseen class; the result is written to `hygiene.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::devise::{train_devise, DeviseHyper, DeviseProjection};
use crate::embeddings::{load_embeddings, pairwise_distances, random_embeddings, DistanceMetric, EmbeddingSource, LabelEmbeddingTable};
use crate::encoder::{extract_features, train_encoder_logged, EncoderConfig, EncoderModel, TrainingLog, VisualFeatureMatrix};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, HeadKind, Paradigm, ResultsTable, ZeroShotHead};
use crate::io;
use crate::numerics::{derive_seed, Rng};
use crate::relation::{train_relation, RelationHyper, RelationModel};
use crate::skeleton::{JointTopology, SkeletonSequence};
use crate::split::{furthest_split_scored, nearest_split_scored, random_split, ClassSplit, IsolationScoring, SplitStrategy};
use crate::synthetic::{generate_synthetic_dataset, SyntheticSpec};

pub const STAGES_FILE: &str = "stages.json";
pub const HYGIENE_FILE: &str = "hygiene.json";
pub const SPLIT_FILE: &str = "split.json";
pub const ENCODER_FILE: &str = "encoder.zstg";
pub const ENCODER_TRAIN_FILE: &str = "encoder_train.json";
pub const TRAIN_FEATURES_FILE: &str = "features/train.zfea";
pub const TEST_FEATURES_FILE: &str = "features/test.zfea";
pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_MD: &str = "results.md";
const DATA_DIR: &str = "data";
const REPORTS_DIR: &str = "reports";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generate,
    MakeSplit,
    TrainEncoder,
    ExtractFeatures,
    TrainDevise,
    TrainRelation,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Generate,
        Stage::MakeSplit,
        Stage::TrainEncoder,
        Stage::ExtractFeatures,
        Stage::TrainDevise,
        Stage::TrainRelation,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::MakeSplit => "make-split",
            Stage::TrainEncoder => "train-encoder",
            Stage::ExtractFeatures => "extract-features",
            Stage::TrainDevise => "train-devise",
            Stage::TrainRelation => "train-relation",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Generate => &[],
            Stage::MakeSplit => &[Stage::Generate],
            Stage::TrainEncoder => &[Stage::Generate, Stage::MakeSplit],
            Stage::ExtractFeatures => &[Stage::TrainEncoder],
            Stage::TrainDevise | Stage::TrainRelation => &[Stage::ExtractFeatures],
            Stage::Evaluate => &[Stage::ExtractFeatures, Stage::TrainDevise, Stage::TrainRelation],
            Stage::Report => &[Stage::Evaluate],
        }
    }
}

/// Which label-embedding tables the heads are trained and evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Loaded,
    Random,
}

impl SourceKind {
    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Loaded => "loaded",
            SourceKind::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Generate a synthetic benchmark with these parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Or read a dataset directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Explicit encoder training sample ids; default is every seen-class sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_ids: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Embedding CSV; synthetic datasets bring their own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "default_sources")]
    pub sources: Vec<SourceKind>,
    /// Dimension of the random table; defaults to the loaded table's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_dim: Option<usize>,
}

fn default_sources() -> Vec<SourceKind> {
    vec![SourceKind::Loaded]
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            path: None,
            sources: default_sources(),
            random_dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub strategy: SplitStrategy,
    pub unseen_count: usize,
    #[serde(default)]
    pub metric: DistanceMetric,
    #[serde(default)]
    pub diversity_floor: f64,
    #[serde(default)]
    pub scoring: IsolationScoring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsConfig {
    #[serde(default)]
    pub devise: Option<DeviseHyper>,
    #[serde(default)]
    pub relation: Option<RelationHyper>,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            devise: Some(DeviseHyper::default()),
            relation: Some(RelationHyper::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "default_paradigms")]
    pub paradigms: Vec<Paradigm>,
}

fn default_ks() -> Vec<usize> {
    vec![1, 5]
}

fn default_paradigms() -> Vec<Paradigm> {
    vec![Paradigm::Zsl, Paradigm::Gzsl]
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            ks: default_ks(),
            paradigms: default_paradigms(),
        }
    }
}

/// One experiment, as read from a JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    /// Used when no output directory is given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    /// Joint graph JSON; defaults to the dataset's own, else NTU.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<PathBuf>,
    #[serde(default)]
    pub embeddings: EmbeddingConfig,
    pub split: SplitConfig,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub heads: HeadsConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    /// Reads and validates a config file. Relative paths inside it resolve
    /// against the file's directory. Any failure is a configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        resolve(&mut config.output_dir);
        resolve(&mut config.dataset.path);
        resolve(&mut config.topology);
        resolve(&mut config.embeddings.path);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match (&d.synthetic, &d.path) {
            (Some(spec), None) => spec.validate()?,
            (None, Some(p)) => {
                if !p.join(crate::dataset::MANIFEST_FILE).exists() {
                    return Err(Error::Config(format!("dataset path {} has no manifest", p.display())));
                }
            }
            _ => return Err(Error::Config("dataset needs exactly one of `synthetic` and `path`".into())),
        }
        for p in [&self.topology, &self.embeddings.path].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        let sources = &self.embeddings.sources;
        if sources.is_empty() || (1..sources.len()).any(|i| sources[..i].contains(&sources[i])) {
            return Err(Error::Config("embeddings.sources must be nonempty without repeats".into()));
        }
        let has_loaded = d.synthetic.is_some() || self.embeddings.path.is_some();
        if !has_loaded {
            if sources.contains(&SourceKind::Loaded) {
                return Err(Error::Config("the loaded embedding source needs embeddings.path".into()));
            }
            if self.embeddings.random_dim.is_none() {
                return Err(Error::Config("embeddings.random_dim is required without a loaded table".into()));
            }
        }
        if self.embeddings.random_dim == Some(0) {
            return Err(Error::Config("embeddings.random_dim must be positive".into()));
        }
        if self.split.unseen_count == 0 {
            return Err(Error::Config("split.unseen_count must be positive".into()));
        }
        if !(self.split.diversity_floor >= 0.0) {
            return Err(Error::Config("split.diversity_floor must be >= 0".into()));
        }
        self.encoder.validate()?;
        if let Some(h) = &self.heads.devise {
            h.validate()?;
        }
        if let Some(h) = &self.heads.relation {
            h.validate()?;
        }
        if self.heads.devise.is_none() && self.heads.relation.is_none() {
            return Err(Error::Config("no head configured".into()));
        }
        let e = &self.evaluation;
        if e.ks.is_empty() || e.ks.contains(&0) || e.paradigms.is_empty() {
            return Err(Error::Config("evaluation needs positive ks and at least one paradigm".into()));
        }
        Ok(())
    }

    /// The config as echoed into reports: everything except the output directory.
    pub fn echo(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.output_dir = None;
        serde_json::to_value(c).unwrap_or(serde_json::Value::Null)
    }

    fn stage_inputs(&self, stage: Stage) -> serde_json::Value {
        match stage {
            Stage::Generate => serde_json::json!({
                "dataset": v(&(&self.dataset.synthetic, &self.dataset.path)),
                "topology": v(&self.topology),
                "embeddings": v(&self.embeddings),
            }),
            Stage::MakeSplit => v(&self.split),
            Stage::TrainEncoder => serde_json::json!({
                "encoder": v(&self.encoder),
                "train_ids": v(&self.dataset.train_ids),
            }),
            Stage::ExtractFeatures => serde_json::Value::Null,
            Stage::TrainDevise => v(&self.heads.devise),
            Stage::TrainRelation => v(&self.heads.relation),
            Stage::Evaluate => v(&self.evaluation),
            Stage::Report => serde_json::Value::Null,
        }
    }

    fn head_enabled(&self, stage: Stage) -> bool {
        match stage {
            Stage::TrainDevise => self.heads.devise.is_some(),
            Stage::TrainRelation => self.heads.relation.is_some(),
            _ => true,
        }
    }
}

fn v<T: Serialize>(x: &T) -> serde_json::Value {
    serde_json::to_value(x).unwrap_or(serde_json::Value::Null)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Re-execute every stage that runs, even with a matching fingerprint.
    pub force: bool,
    /// Last stage to run; `None` runs all of them.
    pub until: Option<Stage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub executed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub stages: Vec<StageOutcome>,
    pub reports: Vec<EvalReport>,
}

impl RunSummary {
    pub fn report(&self, head: HeadKind, source: SourceKind, paradigm: Paradigm) -> Option<&EvalReport> {
        self.reports.iter().find(|r| {
            r.head == head && r.paradigm == paradigm && matches!(
                (source, r.embedding_source),
                (SourceKind::Loaded, EmbeddingSource::Loaded) | (SourceKind::Random, EmbeddingSource::Random { .. })
            )
        })
    }
}

/// Runs the configured stages under `out`, reusing completed ones.
pub fn run_pipeline(config: &ExperimentConfig, out: &Path, options: RunOptions) -> Result<RunSummary> {
    config.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut records: BTreeMap<String, StageRecord> = if out.join(STAGES_FILE).exists() {
        io::read_json(&out.join(STAGES_FILE))?
    } else {
        BTreeMap::new()
    };
    let runner = Runner { config, out };
    let mut fingerprints: BTreeMap<Stage, String> = BTreeMap::new();
    let mut summary = RunSummary {
        stages: Vec::new(),
        reports: Vec::new(),
    };
    for stage in Stage::ALL {
        if options.until.is_some_and(|u| stage > u) {
            break;
        }
        if !config.head_enabled(stage) {
            records.remove(stage.name());
            continue;
        }
        let fingerprint = fingerprint(config, stage, &fingerprints);
        let reusable = !options.force
            && records.get(stage.name()).is_some_and(|r| {
                r.fingerprint == fingerprint && r.outputs.iter().all(|o| out.join(o).exists())
            });
        let start = std::time::Instant::now();
        if !reusable {
            let outputs = runner.execute(stage).map_err(|e| Error::Stage {
                stage: stage.name().to_string(),
                source: Box::new(e),
            })?;
            records.insert(
                stage.name().to_string(),
                StageRecord {
                    fingerprint: fingerprint.clone(),
                    outputs,
                },
            );
            io::write_json(&out.join(STAGES_FILE), &records)?;
        }
        summary.stages.push(StageOutcome {
            stage,
            executed: !reusable,
            seconds: start.elapsed().as_secs_f64(),
        });
        let outputs = &records[stage.name()].outputs;
        fingerprints.insert(stage, format!("{fingerprint}:{}", digest_outputs(out, outputs)?));
        if stage == Stage::TrainRelation || (stage == Stage::TrainDevise && !config.head_enabled(Stage::TrainRelation)) {
            runner.audit().map_err(|e| Error::Stage {
                stage: "hygiene-audit".into(),
                source: Box::new(e),
            })?;
        }
    }
    if fingerprints.contains_key(&Stage::Evaluate) {
        summary.reports = runner.report_paths().iter().map(|p| EvalReport::load(&out.join(p))).collect::<Result<_>>()?;
    }
    Ok(summary)
}

fn fingerprint(config: &ExperimentConfig, stage: Stage, done: &BTreeMap<Stage, String>) -> String {
    let upstream: Vec<(&str, &str)> = stage
        .upstream()
        .iter()
        .filter_map(|s| done.get(s).map(|f| (s.name(), f.as_str())))
        .collect();
    let doc = serde_json::json!({
        "stage": stage.name(),
        "master_seed": config.master_seed,
        "inputs": config.stage_inputs(stage),
        "upstream": upstream,
        "format": io::FORMAT_VERSION,
    });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over each output's relative path and bytes.
fn digest_outputs(out: &Path, outputs: &[String]) -> Result<String> {
    let mut hasher = Sha256::new();
    for o in outputs {
        let path = out.join(o);
        hasher.update(o.as_bytes());
        hasher.update(std::fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Seed of a stage's random stream.
pub fn stage_rng(master_seed: u64, stage: Stage) -> Rng {
    Rng::new(derive_seed(master_seed, stage.name()))
}

#[derive(Serialize, Deserialize)]
struct EncoderTrainRecord {
    ids: Vec<String>,
    log: TrainingLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HygieneCheck {
    pub stage: String,
    pub input: String,
    pub samples: usize,
    pub unseen_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HygieneReport {
    pub unseen_classes: Vec<String>,
    pub checks: Vec<HygieneCheck>,
    pub clean: bool,
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    out: &'a Path,
}

impl Runner<'_> {
    fn execute(&self, stage: Stage) -> Result<Vec<String>> {
        match stage {
            Stage::Generate => self.generate(),
            Stage::MakeSplit => self.make_split(),
            Stage::TrainEncoder => self.train_encoder(),
            Stage::ExtractFeatures => self.extract_features(),
            Stage::TrainDevise => self.train_devise(),
            Stage::TrainRelation => self.train_relation(),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => self.report(),
        }
    }

    fn rng(&self, stage: Stage) -> Rng {
        stage_rng(self.config.master_seed, stage)
    }

    fn has_loaded(&self) -> bool {
        self.config.dataset.synthetic.is_some() || self.config.embeddings.path.is_some()
    }

    fn table_file(source: SourceKind) -> String {
        format!("embeddings/{}.csv", source.name())
    }

    fn random_seed(&self) -> u64 {
        self.rng(Stage::Generate).fork("random-embeddings").seed()
    }

    fn dataset_dir(&self) -> PathBuf {
        match &self.config.dataset.path {
            Some(p) => p.clone(),
            None => self.out.join(DATA_DIR),
        }
    }

    fn generate(&self) -> Result<Vec<String>> {
        let mut outputs = Vec::new();
        let loaded = if let Some(spec) = &self.config.dataset.synthetic {
            let ds = generate_synthetic_dataset(spec, &mut self.rng(Stage::Generate))?;
            ds.save(&self.out.join(DATA_DIR))?;
            outputs.push(format!("{DATA_DIR}/{}", crate::dataset::MANIFEST_FILE));
            Some(ds.embeddings.normalized()?)
        } else if let Some(p) = &self.config.embeddings.path {
            let table = load_embeddings(p, None)?.normalized()?;
            // fails early on samples whose label has no embedding
            Dataset::load(&self.dataset_dir(), Some(table.labels()), self.topology()?)?;
            Some(table)
        } else {
            None
        };
        let labels = match &loaded {
            Some(t) => t.labels().to_vec(),
            None => Dataset::load(&self.dataset_dir(), None, self.topology()?)?.labels,
        };
        for &source in &self.config.embeddings.sources {
            let table = match source {
                SourceKind::Loaded => loaded.clone().ok_or_else(|| Error::Config("no loaded embedding table".into()))?,
                SourceKind::Random => {
                    let dim = self.config.embeddings.random_dim.or(loaded.as_ref().map(|t| t.dim())).unwrap_or(0);
                    random_embeddings(&labels, dim, &mut Rng::new(self.random_seed()))?
                }
            };
            let file = Self::table_file(source);
            std::fs::create_dir_all(self.out.join("embeddings")).map_err(|e| Error::io(self.out, e))?;
            table.save(&self.out.join(&file))?;
            outputs.push(file);
        }
        if let (Some(t), false) = (&loaded, self.config.embeddings.sources.contains(&SourceKind::Loaded)) {
            // the split still ranks classes by the loaded table
            let file = Self::table_file(SourceKind::Loaded);
            t.save(&self.out.join(&file))?;
            outputs.push(file);
        }
        Ok(outputs)
    }

    fn topology(&self) -> Result<Option<JointTopology>> {
        self.config.topology.as_deref().map(JointTopology::load).transpose()
    }

    /// Embedding table of `source`, as written by the generate stage.
    fn table(&self, source: SourceKind) -> Result<LabelEmbeddingTable> {
        let t = load_embeddings(&self.out.join(Self::table_file(source)), None)?;
        let src = match source {
            SourceKind::Loaded => EmbeddingSource::Loaded,
            SourceKind::Random => EmbeddingSource::Random { seed: self.random_seed() },
        };
        LabelEmbeddingTable::new(t.labels().to_vec(), t.embeddings().clone(), src)?.normalized()
    }

    /// Table that orders classes and drives the split: loaded when available.
    fn reference_table(&self) -> Result<LabelEmbeddingTable> {
        if self.has_loaded() {
            self.table(SourceKind::Loaded)
        } else {
            self.table(SourceKind::Random)
        }
    }

    fn dataset(&self) -> Result<Dataset> {
        let labels = self.reference_table()?.labels().to_vec();
        Dataset::load(&self.dataset_dir(), Some(&labels), self.topology()?)
    }

    fn split(&self) -> Result<ClassSplit> {
        ClassSplit::load(&self.out.join(SPLIT_FILE), self.reference_table()?.labels())
    }

    fn make_split(&self) -> Result<Vec<String>> {
        let s = &self.config.split;
        let table = self.reference_table()?;
        let mut split = match s.strategy {
            SplitStrategy::Nearest => {
                nearest_split_scored(&pairwise_distances(&table, s.metric)?, s.unseen_count, s.diversity_floor, s.scoring)?
            }
            SplitStrategy::Furthest => furthest_split_scored(&pairwise_distances(&table, s.metric)?, s.unseen_count, s.scoring)?,
            SplitStrategy::Random => random_split(table.labels(), s.unseen_count, &mut self.rng(Stage::MakeSplit))?,
        };
        if s.strategy != SplitStrategy::Random {
            split.metric = Some(s.metric);
        }
        split.save(&self.out.join(SPLIT_FILE), table.labels())?;
        Ok(vec![SPLIT_FILE.into()])
    }

    fn encoder_training_set(&self, dataset: &Dataset, split: &ClassSplit) -> Result<Vec<usize>> {
        match &self.config.dataset.train_ids {
            Some(ids) => ids
                .iter()
                .map(|id| dataset.index_of_id(id).ok_or_else(|| Error::Data(format!("train id {id:?} is not in the dataset"))))
                .collect(),
            None => Ok((0..dataset.len()).filter(|&i| split.is_seen(dataset.samples[i].label_index())).collect()),
        }
    }

    fn train_encoder(&self) -> Result<Vec<String>> {
        let dataset = self.dataset()?;
        let split = self.split()?;
        let idx = self.encoder_training_set(&dataset, &split)?;
        let data: Vec<SkeletonSequence> = idx.iter().map(|&i| dataset.samples[i].clone()).collect();
        let (model, log) = train_encoder_logged(&data, &self.config.encoder, &dataset.topology, split.seen(), &mut self.rng(Stage::TrainEncoder))?;
        model.save(&self.out.join(ENCODER_FILE))?;
        let record = EncoderTrainRecord {
            ids: idx.iter().map(|&i| dataset.ids[i].clone()).collect(),
            log,
        };
        io::write_json(&self.out.join(ENCODER_TRAIN_FILE), &record)?;
        Ok(vec![ENCODER_FILE.into(), ENCODER_TRAIN_FILE.into()])
    }

    fn extract_features(&self) -> Result<Vec<String>> {
        let dataset = self.dataset()?;
        let split = self.split()?;
        let model = EncoderModel::load(&self.out.join(ENCODER_FILE))?;
        let record: EncoderTrainRecord = io::read_json(&self.out.join(ENCODER_TRAIN_FILE))?;
        let train: Vec<SkeletonSequence> = record
            .ids
            .iter()
            .map(|id| {
                dataset
                    .index_of_id(id)
                    .map(|i| dataset.samples[i].clone())
                    .ok_or_else(|| Error::Data(format!("train id {id:?} is not in the dataset")))
            })
            .collect::<Result<_>>()?;
        let test = dataset.samples_where(|c| split.is_unseen(c));
        if test.is_empty() {
            return Err(Error::Data("no samples of unseen classes to test on".into()));
        }
        extract_features(&model, &train, true)?.save(&self.out.join(TRAIN_FEATURES_FILE))?;
        extract_features(&model, &test, true)?.save(&self.out.join(TEST_FEATURES_FILE))?;
        Ok(vec![TRAIN_FEATURES_FILE.into(), TEST_FEATURES_FILE.into()])
    }

    fn head_file(head: HeadKind, source: SourceKind) -> String {
        let ext = match head {
            HeadKind::Devise => "zdvs",
            HeadKind::Relation => "zrel",
        };
        format!("heads/{}_{}.{ext}", head.name(), source.name())
    }

    fn train_devise(&self) -> Result<Vec<String>> {
        let hyper = self.config.heads.devise.as_ref().ok_or_else(|| Error::Config("devise head not configured".into()))?;
        let features = VisualFeatureMatrix::load(&self.out.join(TRAIN_FEATURES_FILE))?;
        let split = self.split()?;
        let mut outputs = Vec::new();
        for &source in &self.config.embeddings.sources {
            let table = self.table(source)?;
            let m = train_devise(&features, &table, &split, hyper, &mut self.rng(Stage::TrainDevise))?;
            let file = Self::head_file(HeadKind::Devise, source);
            m.save(&self.out.join(&file), hyper)?;
            outputs.push(file);
        }
        Ok(outputs)
    }

    fn train_relation(&self) -> Result<Vec<String>> {
        let hyper = self.config.heads.relation.as_ref().ok_or_else(|| Error::Config("relation head not configured".into()))?;
        let features = VisualFeatureMatrix::load(&self.out.join(TRAIN_FEATURES_FILE))?;
        let split = self.split()?;
        let mut outputs = Vec::new();
        for &source in &self.config.embeddings.sources {
            let table = self.table(source)?;
            let m = train_relation(&features, &table, &split, hyper, &mut self.rng(Stage::TrainRelation))?;
            let file = Self::head_file(HeadKind::Relation, source);
            m.save(&self.out.join(&file), hyper)?;
            outputs.push(file);
        }
        Ok(outputs)
    }

    fn heads(&self) -> Vec<HeadKind> {
        let mut heads = Vec::new();
        if self.config.heads.devise.is_some() {
            heads.push(HeadKind::Devise);
        }
        if self.config.heads.relation.is_some() {
            heads.push(HeadKind::Relation);
        }
        heads
    }

    fn report_paths(&self) -> Vec<String> {
        let mut paths = Vec::new();
        for head in self.heads() {
            for &source in &self.config.embeddings.sources {
                for &paradigm in &self.config.evaluation.paradigms {
                    paths.push(format!("{REPORTS_DIR}/{}_{}_{}.json", head.name(), source.name(), paradigm.name()));
                }
            }
        }
        paths
    }

    fn evaluate(&self) -> Result<Vec<String>> {
        let features = VisualFeatureMatrix::load(&self.out.join(TEST_FEATURES_FILE))?;
        let split = self.split()?;
        let mut outputs = Vec::new();
        let mut path_iter = self.report_paths().into_iter();
        for head in self.heads() {
            for &source in &self.config.embeddings.sources {
                let table = self.table(source)?;
                let file = self.out.join(Self::head_file(head, source));
                let model: Box<dyn ZeroShotHead> = match head {
                    HeadKind::Devise => Box::new(DeviseProjection::load(&file)?.0),
                    HeadKind::Relation => Box::new(RelationModel::load(&file)?.0),
                };
                for &paradigm in &self.config.evaluation.paradigms {
                    let report = evaluate(
                        model.as_ref(),
                        &features,
                        &split,
                        &table,
                        paradigm,
                        &self.config.evaluation.ks,
                        self.config.echo(),
                    )?;
                    let path = path_iter.next().expect("one path per report");
                    report.save(&self.out.join(&path))?;
                    outputs.push(path);
                }
            }
        }
        Ok(outputs)
    }

    fn report(&self) -> Result<Vec<String>> {
        let reports = self
            .report_paths()
            .iter()
            .map(|p| EvalReport::load(&self.out.join(p)))
            .collect::<Result<Vec<_>>>()?;
        write_results(&ResultsTable::from_reports(&reports), self.out)?;
        Ok(vec![RESULTS_CSV.into(), RESULTS_MD.into()])
    }

    /// Confirms from the persisted artifacts that no unseen-class sample
    /// reached a training stage, and writes `hygiene.json`.
    fn audit(&self) -> Result<HygieneReport> {
        let split = self.split()?;
        let labels = self.reference_table()?.labels().to_vec();
        let mut checks = Vec::new();
        let dataset = self.dataset()?;
        let record: EncoderTrainRecord = io::read_json(&self.out.join(ENCODER_TRAIN_FILE))?;
        let unseen = record
            .ids
            .iter()
            .filter(|id| dataset.index_of_id(id).is_none_or(|i| split.is_unseen(dataset.samples[i].label_index())))
            .count();
        checks.push(HygieneCheck {
            stage: Stage::TrainEncoder.name().into(),
            input: ENCODER_TRAIN_FILE.into(),
            samples: record.ids.len(),
            unseen_samples: unseen,
        });
        let features = VisualFeatureMatrix::load(&self.out.join(TRAIN_FEATURES_FILE))?;
        let unseen = features.label_indices.iter().filter(|&&c| !split.is_seen(c)).count();
        for stage in [Stage::TrainDevise, Stage::TrainRelation] {
            if self.config.head_enabled(stage) {
                checks.push(HygieneCheck {
                    stage: stage.name().into(),
                    input: TRAIN_FEATURES_FILE.into(),
                    samples: features.len(),
                    unseen_samples: unseen,
                });
            }
        }
        let report = HygieneReport {
            unseen_classes: split.unseen().iter().map(|&c| labels[c].clone()).collect(),
            clean: checks.iter().all(|c| c.unseen_samples == 0),
            checks,
        };
        io::write_json(&self.out.join(HYGIENE_FILE), &report)?;
        if let Some(bad) = report.checks.iter().find(|c| c.unseen_samples > 0) {
            return Err(Error::contamination(
                &bad.stage,
                format!("{} unseen-class samples in {}", bad.unseen_samples, bad.input),
            ));
        }
        Ok(report)
    }
}

/// Writes `results.csv` and `results.md` into `dir`.
pub fn write_results(table: &ResultsTable, dir: &Path) -> Result<()> {
    io::write_bytes(&dir.join(RESULTS_CSV), table.to_csv()?.as_bytes())?;
    io::write_bytes(&dir.join(RESULTS_MD), table.to_markdown().as_bytes())
}

/// Every report found under the `reports/` directories of `runs`, in path order.
pub fn collect_reports(runs: &[PathBuf]) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for run in runs {
        let dir = run.join(REPORTS_DIR);
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
            .collect::<Result<_>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
        paths.sort();
        for p in paths {
            reports.push(EvalReport::load(&p)?);
        }
    }
    Ok(reports)
}
