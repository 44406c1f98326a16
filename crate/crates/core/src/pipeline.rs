//! Stage orchestration: run configuration, on-disk artifacts, per-stage
//! manifests with checksums, and resume.
//!
//! Every stage reads its inputs from disk and writes its outputs plus a
//! manifest under `<data_root>/manifests/<stage>.json`. A manifest lists
//! the sha256 of every file the stage wrote and a hash of the configuration
//! blocks the stage depends on, so a later stage (or a resumed pipeline)
//! can check that its inputs are intact and current.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TmudError};
use crate::experiment::{self, DifferenceSample, EvaluatorContext};
use crate::filtration::{self, DetectorConfig, DEFAULT_FILL};
use crate::image::ImageTensor;
use crate::ingest::{self, LabelAssignment, LabelScale, RaterPanel, RatingRecord, GENDER_LABEL};
use crate::latent::{self, EditRow, EditStats, EditedFace, EncoderConfig, Encoding, Origin, SemanticDirection};
use crate::mud::{self, Architecture, Classifier, LabeledDataset, TrainConfig};
use crate::numerics::SeparatorConfig;
use crate::report::{self, DecompositionDoc, ExperimentDoc};
use crate::rng;
use crate::synthworld::{LabelRule, LatentVector, RuleTerm, SampleConfig, SynthWorld};

const MANIFEST_FORMAT: &str = "tmud-manifest/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Ratings,
    Train,
    Filtrate,
    Direction,
    Edit,
    Experiment,
    Report,
}

impl Stage {
    /// Pipeline order.
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Ratings,
        Stage::Train,
        Stage::Filtrate,
        Stage::Direction,
        Stage::Edit,
        Stage::Experiment,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ratings => "ratings",
            Stage::Train => "train",
            Stage::Filtrate => "filtrate",
            Stage::Direction => "direction",
            Stage::Edit => "edit",
            Stage::Experiment => "experiment",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this stage reads directly.
    pub fn inputs(self) -> &'static [Stage] {
        match self {
            Stage::Synth => &[],
            Stage::Ratings => &[Stage::Synth],
            Stage::Train | Stage::Filtrate => &[Stage::Synth, Stage::Ratings],
            Stage::Direction => &[Stage::Synth, Stage::Train],
            Stage::Edit => &[Stage::Synth, Stage::Train, Stage::Direction],
            Stage::Experiment => &[Stage::Synth, Stage::Ratings, Stage::Train, Stage::Direction, Stage::Edit],
            Stage::Report => &[Stage::Filtrate, Stage::Experiment],
        }
    }

    /// This stage and everything upstream of it.
    pub fn upstream(self) -> BTreeSet<Stage> {
        let mut out = BTreeSet::from([self]);
        for s in self.inputs() {
            out.extend(s.upstream());
        }
        out
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = TmudError;

    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| TmudError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_root: PathBuf,
    pub model_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_root: "data".into(),
            model_dir: "models".into(),
            report_dir: "reports".into(),
        }
    }
}

impl Paths {
    /// All three directories under one root.
    pub fn under(root: &Path) -> Paths {
        Paths {
            data_root: root.join("data"),
            model_dir: root.join("models"),
            report_dir: root.join("reports"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub n: usize,
    /// Render from a randomly rotated latent frame instead of the native
    /// parameter axes.
    pub rotated: bool,
    /// Rotation seed; derived from the master seed when absent.
    pub rotation_seed: Option<u64>,
    pub gender_noise: f64,
    pub rules: Vec<LabelRule>,
    /// JSON array of rules, replacing `rules` when set.
    pub rules_file: Option<PathBuf>,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n: 2000,
            rotated: false,
            rotation_seed: None,
            gender_noise: 0.0,
            rules: default_rules(),
            rules_file: None,
        }
    }
}

/// Two illustrative perception labels: one driven by dimorphism, one
/// satisfied by either of two components.
pub fn default_rules() -> Vec<LabelRule> {
    vec![
        LabelRule {
            id: "dominance".into(),
            form: crate::synthworld::RuleForm::Logistic,
            terms: vec![RuleTerm::new("dimorphism", 3.0, 0.0)],
            noise: 0.0,
        },
        LabelRule {
            id: "friendliness".into(),
            form: crate::synthworld::RuleForm::Disjunctive,
            terms: vec![
                RuleTerm::new("mouth-width", 1.0, 0.0),
                RuleTerm::new("contour-aspect", 1.0, 0.0),
            ],
            noise: 0.0,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatingsParams {
    /// Ratings CSV to ingest; simulated from `panel` when absent.
    pub file: Option<PathBuf>,
    pub panel: RaterPanel,
    pub binary_labels: Vec<String>,
}

impl Default for RatingsParams {
    fn default() -> Self {
        RatingsParams {
            file: None,
            panel: RaterPanel::default(),
            binary_labels: ingest::default_binary_labels(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub architecture: Architecture,
    /// Hyperparameters; the seed inside is replaced by per-task seeds.
    pub config: TrainConfig,
    /// Labels to train; every rated label when absent.
    pub labels: Option<Vec<String>>,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            architecture: Architecture::Mlp { hidden: 64 },
            config: TrainConfig::default(),
            labels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiltrateParams {
    /// Labels to decompose; every rated label when absent.
    pub labels: Option<Vec<String>>,
    pub fill: f32,
    pub detector: DetectorConfig,
}

impl Default for FiltrateParams {
    fn default() -> Self {
        FiltrateParams {
            labels: None,
            fill: DEFAULT_FILL,
            detector: DetectorConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    /// Use the latent stored with each synthetic face.
    Stored,
    /// Recover latents from the images by black-box search.
    Search,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectionParams {
    pub feature: String,
    pub encoder: EncoderMode,
    pub search: EncoderConfig,
    pub separator: SeparatorConfig,
    /// Upper bound on edited origins, drawn by seeded sampling.
    pub max_origins: Option<usize>,
}

impl Default for DirectionParams {
    fn default() -> Self {
        DirectionParams {
            feature: GENDER_LABEL.into(),
            encoder: EncoderMode::Stored,
            search: EncoderConfig::default(),
            separator: SeparatorConfig::default(),
            max_origins: Some(200),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditParams {
    pub max_step: f64,
    pub increment: f64,
    pub interval_width: f64,
}

impl Default for EditParams {
    fn default() -> Self {
        EditParams {
            max_step: 1.0,
            increment: 0.25,
            interval_width: latent::INTERVAL_WIDTH,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentParams {
    /// Labels to analyse; every trained label except gender when absent.
    pub labels: Option<Vec<String>>,
    pub per_evaluator: bool,
    /// Evaluators for the per-evaluator analysis; when absent, every
    /// evaluator with reliable ratings on all analysed labels.
    pub evaluators: Option<Vec<String>>,
    pub min_face_edits: usize,
    pub quadratic_per_face: bool,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            labels: None,
            per_evaluator: true,
            evaluators: None,
            min_face_edits: experiment::MIN_FACE_EDITS,
            quadratic_per_face: false,
        }
    }
}

/// Everything a run needs. Every field has a default, so `{}` is a valid
/// configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub size: usize,
    pub paths: Paths,
    pub synth: SynthParams,
    pub ratings: RatingsParams,
    pub train: TrainParams,
    pub filtrate: FiltrateParams,
    pub direction: DirectionParams,
    pub edit: EditParams,
    pub experiment: ExperimentParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            threads: 0,
            size: crate::synthworld::DEFAULT_SIZE,
            paths: Paths::default(),
            synth: SynthParams::default(),
            ratings: RatingsParams::default(),
            train: TrainParams::default(),
            filtrate: FiltrateParams::default(),
            direction: DirectionParams::default(),
            edit: EditParams::default(),
            experiment: ExperimentParams::default(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    pub fn from_json(text: &str, source: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| TmudError::Config(format!("{source}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| TmudError::io(path, e))?;
        RunConfig::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(crate::synthworld::MIN_SIZE..=crate::synthworld::MAX_SIZE).contains(&self.size) {
            return Err(TmudError::Config(format!(
                "image size {} outside {}..={}",
                self.size,
                crate::synthworld::MIN_SIZE,
                crate::synthworld::MAX_SIZE
            )));
        }
        if self.synth.n == 0 {
            return Err(TmudError::Config("synth.n must be positive".into()));
        }
        for rule in &self.synth.rules {
            rule.validate()?;
            check_label_id(&rule.id).map_err(|e| TmudError::Config(e.to_string()))?;
        }
        self.train.config.validate()?;
        if self.direction.feature != GENDER_LABEL {
            return Err(TmudError::Config(format!(
                "unsupported direction feature {:?}; only {GENDER_LABEL:?} is available",
                self.direction.feature
            )));
        }
        if !(self.edit.increment > 0.0 && self.edit.max_step >= 0.0) {
            return Err(TmudError::Config("edit grid needs increment > 0 and max_step >= 0".into()));
        }
        if !(self.edit.interval_width > 0.0 && self.edit.interval_width <= 1.0) {
            return Err(TmudError::Config("interval width outside (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.filtrate.fill) {
            return Err(TmudError::Config("fill value outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Reproducibility-relevant part of the configuration: everything but
    /// the thread count and the output locations.
    fn hashed_value(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let map = v.as_object_mut().expect("object");
        map.remove("threads");
        map.remove("paths");
        v
    }

    /// sha256 of the canonical JSON of [`Self::hashed_value`]. Object keys
    /// serialize in sorted order, so the hash is independent of field order
    /// in the source file.
    pub fn config_hash(&self) -> String {
        sha256_hex(self.hashed_value().to_string().as_bytes())
    }

    /// Hash of the configuration blocks `stage` and its upstream stages
    /// read, plus the global fields.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let full = self.hashed_value();
        let mut picked = serde_json::Map::new();
        for key in ["seed", "size"] {
            picked.insert(key.into(), full[key].clone());
        }
        for s in stage.upstream() {
            if let Some(block) = full.get(s.name()) {
                picked.insert(s.name().into(), block.clone());
            }
        }
        sha256_hex(serde_json::Value::Object(picked).to_string().as_bytes())
    }

    pub fn effective_threads(&self) -> usize {
        if self.threads == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.threads
        }
    }

    fn seed_for(&self, task: &str) -> u64 {
        rng::derive_seed(self.seed, task, 0)
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.paths.data_root.join("manifests").join(format!("{stage}.json"))
    }
}

/// Label ids become file names.
fn check_label_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(TmudError::Data(format!(
            "label id {id:?} must be non-empty ASCII letters, digits, '-' or '_'"
        )));
    }
    Ok(())
}

/// Runs `f` on a worker pool of the configured size.
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| TmudError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R>(_threads: usize, f: impl FnOnce() -> R) -> Result<R> {
    Ok(f())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub format: String,
    pub stage: Stage,
    pub config_hash: String,
    pub stage_hash: String,
    /// Effective configuration of the run that wrote the stage.
    pub config: RunConfig,
    pub outputs: Vec<FileRecord>,
    pub summary: serde_json::Value,
}

impl StageManifest {
    pub fn load(path: &Path) -> Result<StageManifest> {
        let text = fs::read_to_string(path).map_err(|e| TmudError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TmudError::json(path, e))
    }
}

/// Collects the files a stage writes, stamping each with the config hash.
struct Outputs {
    hash: String,
    files: Vec<FileRecord>,
}

impl Outputs {
    fn new(cfg: &RunConfig) -> Outputs {
        Outputs {
            hash: cfg.config_hash(),
            files: Vec::new(),
        }
    }

    fn bytes(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| TmudError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| TmudError::io(&path, e))?;
        self.files.push(FileRecord {
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
            path,
        });
        Ok(())
    }

    /// Pretty JSON with a top-level `config_hash` key set to the run's hash.
    fn json<T: Serialize>(&mut self, path: PathBuf, body: &T) -> Result<()> {
        let mut value = serde_json::to_value(body).map_err(|e| TmudError::json(&path, e))?;
        if let Some(map) = value.as_object_mut() {
            map.insert("config_hash".into(), self.hash.clone().into());
        }
        let mut text = serde_json::to_string_pretty(&value).map_err(|e| TmudError::json(&path, e))?;
        text.push('\n');
        self.bytes(path, text.as_bytes())
    }

    fn ppm(&mut self, path: PathBuf, image: &ImageTensor) -> Result<()> {
        let bytes = image.to_ppm_with_comment(Some(&format!("config-hash {}", self.hash)));
        self.bytes(path, &bytes)
    }

    fn pgm(&mut self, path: PathBuf, mask: &crate::image::Mask) -> Result<()> {
        let bytes = mask.to_pgm_with_comment(Some(&format!("config-hash {}", self.hash)));
        self.bytes(path, &bytes)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| TmudError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| TmudError::json(path, e))
}

/// Checks that `stage` has a manifest written under the current
/// configuration and that every listed file still has its recorded hash.
pub fn validate_stage(cfg: &RunConfig, stage: Stage) -> Result<StageManifest> {
    let path = cfg.manifest_path(stage);
    if !path.exists() {
        return Err(TmudError::Data(format!(
            "stage {stage} has not been run (no {}); run `tmud {stage}` first",
            path.display()
        )));
    }
    let manifest = StageManifest::load(&path)?;
    if manifest.format != MANIFEST_FORMAT || manifest.stage != stage {
        return Err(TmudError::Data(format!("{} is not a {stage} manifest", path.display())));
    }
    if manifest.stage_hash != cfg.stage_hash(stage) {
        return Err(TmudError::Data(format!(
            "stage {stage} was produced under a different configuration ({}); rerun it",
            path.display()
        )));
    }
    for f in &manifest.outputs {
        let bytes = fs::read(&f.path).map_err(|e| TmudError::io(&f.path, e))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(TmudError::Checksum { path: f.path.clone() });
        }
    }
    Ok(manifest)
}

/// Runs one stage after validating everything upstream of it.
pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<StageManifest> {
    let upstream: Vec<Stage> = stage.upstream().into_iter().filter(|s| *s != stage).collect();
    let missing: Vec<&str> = upstream
        .iter()
        .filter(|s| !cfg.manifest_path(**s).exists())
        .map(|s| s.name())
        .collect();
    if !missing.is_empty() {
        return Err(TmudError::Data(format!(
            "missing inputs for {stage}; run these stages first: {}",
            missing.join(", ")
        )));
    }
    for s in upstream {
        validate_stage(cfg, s)?;
    }
    execute(cfg, stage)
}

/// Runs the whole pipeline, or from `resume_from` onwards after the earlier
/// stages validate. The first failing stage aborts the run.
pub fn run_pipeline(cfg: &RunConfig, resume_from: Option<Stage>) -> Result<Vec<StageManifest>> {
    cfg.validate()?;
    let start = resume_from.unwrap_or(Stage::Synth);
    let mut last_good = None;
    for stage in Stage::ALL.into_iter().filter(|s| *s < start) {
        validate_stage(cfg, stage).map_err(|e| TmudError::Stage {
            stage: stage.to_string(),
            last_good: last_good.clone(),
            source: Box::new(e),
        })?;
        info!("{stage}: reusing validated outputs");
        last_good = Some(cfg.manifest_path(stage));
    }
    let mut manifests = Vec::new();
    for stage in Stage::ALL.into_iter().filter(|s| *s >= start) {
        info!("{stage}: running");
        let m = execute(cfg, stage).map_err(|e| TmudError::Stage {
            stage: stage.to_string(),
            last_good: last_good.clone(),
            source: Box::new(e),
        })?;
        last_good = Some(cfg.manifest_path(stage));
        manifests.push(m);
    }
    Ok(manifests)
}

fn execute(cfg: &RunConfig, stage: Stage) -> Result<StageManifest> {
    cfg.validate()?;
    let mut out = Outputs::new(cfg);
    let summary = match stage {
        Stage::Synth => synth(cfg, &mut out)?,
        Stage::Ratings => ratings(cfg, &mut out)?,
        Stage::Train => train(cfg, &mut out)?,
        Stage::Filtrate => filtrate(cfg, &mut out)?,
        Stage::Direction => direction(cfg, &mut out)?,
        Stage::Edit => edit(cfg, &mut out)?,
        Stage::Experiment => experiment_stage(cfg, &mut out)?,
        Stage::Report => report_stage(cfg, &mut out)?,
    };
    let mut outputs = out.files;
    outputs.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = StageManifest {
        format: MANIFEST_FORMAT.into(),
        stage,
        config_hash: cfg.config_hash(),
        stage_hash: cfg.stage_hash(stage),
        config: cfg.clone(),
        outputs,
        summary,
    };
    let path = cfg.manifest_path(stage);
    let parent = path.parent().expect("manifest dir");
    fs::create_dir_all(parent).map_err(|e| TmudError::io(parent, e))?;
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| TmudError::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| TmudError::io(&path, e))?;
    Ok(manifest)
}

// ---- on-disk documents ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceEntry {
    pub face_id: String,
    /// Relative to the data root.
    pub image: String,
    pub latent: LatentVector,
    /// Ground-truth label of every rule.
    pub labels: BTreeMap<String, bool>,
    pub gender: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDoc {
    pub config_hash: String,
    pub size: usize,
    pub world: SynthWorld,
    pub rules: Vec<LabelRule>,
    pub faces: Vec<FaceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentsDoc {
    pub config_hash: String,
    pub labels: Vec<String>,
    pub records: usize,
    pub exclusions: Vec<ingest::Exclusion>,
    pub assignments: Vec<LabelAssignment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedEntry {
    pub label_id: String,
    pub model: String,
    pub accuracy: f64,
    pub correct: usize,
    pub test_size: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingDoc {
    pub config_hash: String,
    pub labels: Vec<TrainedEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginEntry {
    pub face_id: String,
    pub latent: LatentVector,
    pub p_male: f64,
    pub male: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginsDoc {
    pub config_hash: String,
    pub encoder: EncoderMode,
    pub accepted: usize,
    pub rejected: usize,
    pub unambiguous: usize,
    pub origins: Vec<OriginEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditsDoc {
    pub config_hash: String,
    pub grid: Vec<f64>,
    pub stats: EditStats,
    pub generated: usize,
    pub retained: usize,
    pub rows: Vec<EditRow>,
}

fn dataset_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_root.join("dataset.json")
}

fn masks_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_root.join("masks")
}

fn ratings_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_root.join("ratings.csv")
}

fn assignments_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_root.join("assignments.json")
}

fn training_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.model_dir.join("training.json")
}

fn model_path(cfg: &RunConfig, label: &str) -> PathBuf {
    cfg.paths.model_dir.join(format!("{label}.json"))
}

fn direction_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.model_dir.join("direction.json")
}

fn origins_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.model_dir.join("origins.json")
}

fn edits_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_root.join("edits.json")
}

fn decomposition_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.report_dir.join("decomposition.json")
}

fn experiment_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.report_dir.join("experiment.json")
}

struct LoadedDataset {
    doc: DatasetDoc,
    images: BTreeMap<String, Arc<ImageTensor>>,
}

fn load_dataset(cfg: &RunConfig) -> Result<LoadedDataset> {
    let doc: DatasetDoc = read_json(&dataset_path(cfg))?;
    let loaded = crate::par::try_map(&doc.faces, |_, f| {
        let img = ImageTensor::read_ppm(&cfg.paths.data_root.join(&f.image))?;
        Ok((f.face_id.clone(), Arc::new(img)))
    })?;
    Ok(LoadedDataset {
        images: loaded.into_iter().collect(),
        doc,
    })
}

fn resolve_rules(cfg: &RunConfig) -> Result<Vec<LabelRule>> {
    let rules: Vec<LabelRule> = match &cfg.synth.rules_file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| TmudError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| TmudError::Config(format!("{}: {e}", p.display())))?
        }
        None => cfg.synth.rules.clone(),
    };
    let mut seen = BTreeSet::new();
    for r in &rules {
        r.validate()?;
        check_label_id(&r.id).map_err(|e| TmudError::Config(e.to_string()))?;
        if r.id == GENDER_LABEL || !seen.insert(r.id.clone()) {
            return Err(TmudError::Config(format!("duplicate or reserved rule id {:?}", r.id)));
        }
    }
    Ok(rules)
}

fn synth(cfg: &RunConfig, out: &mut Outputs) -> Result<serde_json::Value> {
    let world = if cfg.synth.rotated {
        SynthWorld::rotated(cfg.synth.rotation_seed.unwrap_or_else(|| cfg.seed_for("frame")))
    } else {
        SynthWorld::axis_aligned()
    };
    let rules = resolve_rules(cfg)?;
    let sample = SampleConfig {
        size: cfg.size,
        gender_noise: cfg.synth.gender_noise,
    };
    let data = world.sample_dataset(cfg.synth.n, &rules, cfg.seed_for("synth"), &sample)?;
    let masks = filtration::synthetic_masks(&data);
    let root = &cfg.paths.data_root;
    let mut faces = Vec::with_capacity(data.faces.len());
    for f in &data.faces {
        let rel = format!("images/{}.ppm", f.face_id);
        out.ppm(root.join(&rel), &f.image)?;
        for (kind, mask) in &masks[&f.face_id] {
            out.pgm(masks_dir(cfg).join(&f.face_id).join(format!("{kind}.pgm")), mask)?;
        }
        faces.push(FaceEntry {
            face_id: f.face_id.clone(),
            image: rel,
            latent: f.latent.clone(),
            labels: rules.iter().zip(&f.labels).map(|(r, l)| (r.id.clone(), *l)).collect(),
            gender: f.gender,
        });
    }
    let doc = DatasetDoc {
        config_hash: out.hash.clone(),
        size: cfg.size,
        world,
        rules: rules.clone(),
        faces,
    };
    out.json(dataset_path(cfg), &doc)?;
    Ok(serde_json::json!({
        "faces": doc.faces.len(),
        "rules": rules.iter().map(|r| r.id.clone()).collect::<Vec<_>>(),
    }))
}

fn ratings(cfg: &RunConfig, out: &mut Outputs) -> Result<serde_json::Value> {
    let doc: DatasetDoc = read_json(&dataset_path(cfg))?;
    let binary = &cfg.ratings.binary_labels;
    let records = match &cfg.ratings.file {
        Some(path) => ingest::load_ratings(path, binary)?,
        None => {
            let faces = doc
                .faces
                .iter()
                .map(|f| Ok((f.face_id.clone(), doc.world.native(&f.latent)?)))
                .collect::<Result<Vec<_>>>()?;
            ingest::simulate_ratings(&faces, &doc.rules, &cfg.ratings.panel, cfg.seed_for("ratings"))?
        }
    };
    let known: BTreeSet<&str> = doc.faces.iter().map(|f| f.face_id.as_str()).collect();
    if let Some(r) = records.iter().find(|r| !known.contains(r.face_id.as_str())) {
        return Err(TmudError::Data(format!("ratings reference unknown face {}", r.face_id)));
    }
    let mut csv = format!("# config-hash {}\n", out.hash);
    csv.push_str(&ingest::ratings_to_csv(&records));
    out.bytes(ratings_path(cfg), csv.as_bytes())?;

    let (reliable, exclusions) = ingest::filter_reliable(&records);
    let assignments = ingest::aggregate_binarize(&reliable, binary);
    let labels: Vec<String> = assignments
        .iter()
        .map(|a| a.label_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    for l in &labels {
        check_label_id(l)?;
    }
    let summary = serde_json::json!({
        "records": records.len(),
        "exclusions": exclusions.len(),
        "labels": labels,
    });
    out.json(
        assignments_path(cfg),
        &AssignmentsDoc {
            config_hash: out.hash.clone(),
            labels,
            records: records.len(),
            exclusions,
            assignments,
        },
    )?;
    Ok(summary)
}

fn pick_labels(requested: &Option<Vec<String>>, available: &[String], what: &str) -> Result<Vec<String>> {
    match requested {
        None => Ok(available.to_vec()),
        Some(list) => {
            for l in list {
                if !available.contains(l) {
                    return Err(TmudError::Config(format!("{what}: label {l:?} is not available")));
                }
            }
            Ok(list.clone())
        }
    }
}

fn scale_of(cfg: &RunConfig, label: &str) -> LabelScale {
    LabelScale::of(label, &cfg.ratings.binary_labels)
}

fn train(cfg: &RunConfig, out: &mut Outputs) -> Result<serde_json::Value> {
    let data = load_dataset(cfg)?;
    let doc: AssignmentsDoc = read_json(&assignments_path(cfg))?;
    let labels = pick_labels(&cfg.train.labels, &doc.labels, "train")?;
    let trained = crate::par::try_map(&labels, |_, label| {
        let d = LabeledDataset::from_assignments(label, scale_of(cfg, label), &doc.assignments, &data.images)?;
        experiment::train_label(&d, cfg.train.architecture, &cfg.train.config, cfg.seed_for("train"), "pooled")
    })?;
    let mut entries = Vec::new();
    for (label, mut t) in labels.iter().zip(trained) {
        t.classifier.meta.config_hash = Some(out.hash.clone());
        let path = model_path(cfg, label);
        out.bytes(path, t.classifier.to_json().as_bytes())?;
        entries.push(TrainedEntry {
            label_id: label.clone(),
            model: format!("{label}.json"),
            accuracy: t.correct as f64 / t.test_size as f64,
            correct: t.correct,
            test_size: t.test_size,
            epochs_run: t.classifier.meta.epochs_run,
            best_epoch: t.classifier.meta.best_epoch,
        });
    }
    let summary = serde_json::json!({
        "labels": entries.iter().map(|e| serde_json::json!({"label": e.label_id, "accuracy": e.accuracy})).collect::<Vec<_>>(),
    });
    out.json(
        training_path(cfg),
        &TrainingDoc {
            config_hash: out.hash.clone(),
            labels: entries,
        },
    )?;
    Ok(summary)
}

fn filtrate(cfg: &RunConfig, out: &mut Outputs) -> Result<serde_json::Value> {
    let data = load_dataset(cfg)?;
    let doc: AssignmentsDoc = read_json(&assignments_path(cfg))?;
    let labels = pick_labels(&cfg.filtrate.labels, &doc.labels, "filtrate")?;
    let face_ids: Vec<String> = data.doc.faces.iter().map(|f| f.face_id.clone()).collect();
    let masks = filtration::read_mask_dir(&masks_dir(cfg), &face_ids)?;
    let train_cfg = TrainConfig {
        seed: cfg.seed_for("filtrate"),
        ..cfg.train.config.clone()
    };
    let mut report = filtration::DecompositionReport::default();
    let mut detections = Vec::new();
    for label in &labels {
        let d = LabeledDataset::from_assignments(label, scale_of(cfg, label), &doc.assignments, &data.images)?;
        let split_seed = rng::derive_seed(cfg.seed, &format!("filtrate-split:{label}"), 0);
        let phenomenon = mud::balance(&mud::split(&d, split_seed)?)?;
        let components = filtration::build_component_datasets(&phenomenon, &masks, cfg.filtrate.fill)?;
        let dec = filtration::decomposition_table(&phenomenon, &components, cfg.train.architecture, &train_cfg)?;
        detections.push(filtration::detect_disjunctive(&dec, &cfg.filtrate.detector)?);
        report.labels.push(dec);
    }
    let summary = serde_json::json!({
        "labels": labels,
        "verdicts": detections.iter().map(|d| serde_json::json!({"label": d.label_id, "verdict": d.verdict})).collect::<Vec<_>>(),
    });
    out.json(
        decomposition_path(cfg),
        &DecompositionDoc {
            config_hash: out.hash.clone(),
            report,
            detections,
        },
    )?;
    Ok(summary)
}

fn load_model(cfg: &RunConfig, label: &str) -> Result<Classifier> {
    let path = model_path(cfg, label);
    if !path.exists() {
        return Err(TmudError::Data(format!(
            "no trained model for label {label} ({}); include it in train.labels",
            path.display()
        )));
    }
    Classifier::load(&path)
}

fn direction(cfg: &RunConfig, out: &mut Outputs) -> Result<serde_json::Value> {
    let data = load_dataset(cfg)?;
    let gender = load_model(cfg, GENDER_LABEL)?;
    let p = &cfg.direction;
    let encodings = crate::par::try_map(&data.doc.faces, |i, f| match p.encoder {
        EncoderMode::Stored => Ok(latent::encode_stored(&f.latent)),
        EncoderMode::Search => {
            let ec = EncoderConfig {
                seed: rng::derive_seed(cfg.seed, "encode", i as u64),
                ..p.search.clone()
            };
            latent::encode_search(&data.doc.world, &data.images[&f.face_id], &ec)
        }
    })?;
    let accepted: Vec<(String, LatentVector, Arc<ImageTensor>)> = data
        .doc
        .faces
        .iter()
        .zip(&encodings)
        .filter_map(|(f, e)| match e {
            Encoding::Accepted { latent, .. } => Some((f.face_id.clone(), latent.clone(), data.images[&f.face_id].clone())),
            Encoding::Rejected { .. } => None,
        })
        .collect();
    let rejected = encodings.len() - accepted.len();

    let images: Vec<&ImageTensor> = accepted.iter().map(|a| a.2.as_ref()).collect();
    let probs = gender.predict_batch(&images)?;
    let latents: Vec<LatentVector> = accepted.iter().map(|a| a.1.clone()).collect();
    let labels: Vec<bool> = probs.iter().map(|&q| q > 0.5).collect();
    let sep = SeparatorConfig {
        seed: cfg.seed_for("separator"),
        ..p.separator.clone()
    };
    let dir = latent::fit_direction(&p.feature, &latents, &labels, &sep)?;

    let mut origins = latent::select_unambiguous(&accepted, &gender)?;
    let unambiguous = origins.len();
    if let Some(cap) = p.max_origins {
        if origins.len() > cap {
            let mut r = rng::stream(cfg.seed, "origins", 0);
            let mut keep = rand::seq::index::sample(&mut r, origins.len(), cap).into_vec();
            keep.sort_unstable();
            origins = keep.into_iter().map(|i| origins[i].clone()).collect();
        }
    }
    let summary = serde_json::json!({
        "accepted": accepted.len(),
        "rejected": rejected,
        "train_accuracy": dir.train_accuracy,
        "unambiguous": unambiguous,
        "origins": origins.len(),
    });
    out.json(direction_path(cfg), &dir)?;
    out.json(
        origins_path(cfg),
        &OriginsDoc {
            config_hash: out.hash.clone(),
            encoder: p.encoder,
            accepted: accepted.len(),
            rejected,
            unambiguous,
            origins: origins
                .iter()
                .map(|o| OriginEntry {
                    face_id: o.face_id.clone(),
                    latent: o.latent.clone(),
                    p_male: o.p_male,
                    male: o.male,
                })
                .collect(),
        },
    )?;
    Ok(summary)
}

fn load_origins(cfg: &RunConfig, images: &BTreeMap<String, Arc<ImageTensor>>) -> Result<Vec<Origin>> {
    let doc: OriginsDoc = read_json(&origins_path(cfg))?;
    doc.origins
        .into_iter()
        .map(|o| {
            let image = images
                .get(&o.face_id)
                .ok_or_else(|| TmudError::Data(format!("origin {} is not in the dataset", o.face_id)))?
                .clone();
            Ok(Origin {
                face_id: o.face_id,
                latent: o.latent,
                image,
                p_male: o.p_male,
                male: o.male,
            })
        })
        .collect()
}

fn edit(cfg: &RunConfig, out: &mut Outputs) -> Result<serde_json::Value> {
    let data = load_dataset(cfg)?;
    let gender = load_model(cfg, GENDER_LABEL)?;
    let dir = SemanticDirection::load(&direction_path(cfg))?;
    let origins = load_origins(cfg, &data.images)?;
    let grid = latent::step_grid(cfg.edit.max_step, cfg.edit.increment);
    let (edits, stats) = latent::generate_edits(&data.doc.world, &origins, &dir, &grid, &gender, data.doc.size)?;
    let generated = edits.len();
    let male: BTreeMap<String, bool> = origins.iter().map(|o| (o.face_id.clone(), o.male)).collect();
    let retained = latent::retain_same_gender(edits, &male)?;
    let n_retained = retained.len();
    // interval balancing runs within each origin-gender group
    let (m, f): (Vec<EditedFace>, Vec<EditedFace>) = retained.into_iter().partition(|e| male[&e.origin_id]);
    let mut kept = latent::balance_intervals(m, cfg.edit.interval_width, rng::derive_seed(cfg.seed, "balance", 1));
    kept.extend(latent::balance_intervals(f, cfg.edit.interval_width, rng::derive_seed(cfg.seed, "balance", 0)));
    kept.sort_by(|a, b| a.origin_id.cmp(&b.origin_id).then(a.step.total_cmp(&b.step)));

    let mut rows = Vec::with_capacity(kept.len());
    for e in &kept {
        let rel = format!("edits/{}", latent::edit_file_name(&e.origin_id, e.step));
        out.ppm(cfg.paths.data_root.join(&rel), &e.image)?;
        rows.push(EditRow {
            origin_id: e.origin_id.clone(),
            step: e.step,
            p_male: e.p_male,
            image_path: rel,
            latent: e.latent.coords.clone(),
        });
    }
    let summary = serde_json::json!({
        "requested": stats.requested,
        "out_of_domain": stats.out_of_domain,
        "retained": n_retained,
        "kept": rows.len(),
    });
    out.json(
        edits_path(cfg),
        &EditsDoc {
            config_hash: out.hash.clone(),
            grid,
            stats,
            generated,
            retained: n_retained,
            rows,
        },
    )?;
    Ok(summary)
}

fn load_edits(cfg: &RunConfig, frame: crate::synthworld::Frame) -> Result<Vec<EditedFace>> {
    let doc: EditsDoc = read_json(&edits_path(cfg))?;
    crate::par::try_map(&doc.rows, |_, r| {
        let image = ImageTensor::read_ppm(&cfg.paths.data_root.join(&r.image_path))?;
        Ok(EditedFace {
            origin_id: r.origin_id.clone(),
            step: r.step,
            latent: LatentVector::new(r.latent.clone(), frame),
            p_male: r.p_male,
            image: Arc::new(image),
        })
    })
}

fn samples_csv(samples: &[DifferenceSample], hash: &str) -> String {
    let mut s = format!("# config-hash {hash}\norigin_id,origin_male,step,label_id,x,y\n");
    for d in samples {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            d.origin_id,
            u8::from(d.origin_male),
            d.step,
            d.label_id,
            d.x,
            d.y
        ));
    }
    s
}

fn experiment_stage(cfg: &RunConfig, out: &mut Outputs) -> Result<serde_json::Value> {
    let data = load_dataset(cfg)?;
    let training: TrainingDoc = read_json(&training_path(cfg))?;
    let trained: Vec<String> = training
        .labels
        .iter()
        .map(|e| e.label_id.clone())
        .filter(|l| l != GENDER_LABEL)
        .collect();
    let labels = pick_labels(&cfg.experiment.labels, &trained, "experiment")?;
    if labels.is_empty() {
        return Err(TmudError::Config("experiment has no labels to analyse".into()));
    }
    let gender = load_model(cfg, GENDER_LABEL)?;
    let classifiers = labels.iter().map(|l| load_model(cfg, l)).collect::<Result<Vec<_>>>()?;
    let origins = load_origins(cfg, &data.images)?;
    let edits = load_edits(cfg, data.doc.world.frame())?;

    let named: Vec<(&str, &Classifier)> = labels.iter().map(String::as_str).zip(&classifiers).collect();
    let samples = experiment::difference_samples(&origins, &edits, &named, &gender)?;
    out.bytes(
        cfg.paths.data_root.join("samples.csv"),
        samples_csv(&samples, &out.hash).as_bytes(),
    )?;
    let aggregate = experiment::fit_all(&samples, &labels)?;

    let mut evaluators = Vec::new();
    if cfg.experiment.per_evaluator {
        let records = ingest::load_ratings(&ratings_path(cfg), &cfg.ratings.binary_labels)?;
        let (reliable, _) = ingest::filter_reliable(&records);
        let ids = match &cfg.experiment.evaluators {
            Some(list) => list.clone(),
            None => eligible_evaluators(&reliable, &labels),
        };
        let ctx = EvaluatorContext {
            faces: &data.images,
            origins: &origins,
            edits: &edits,
            gender: &gender,
            labels: &labels,
            binary_labels: &cfg.ratings.binary_labels,
            arch: cfg.train.architecture,
            train: cfg.train.config.clone(),
            seed: cfg.seed_for("per-evaluator"),
        };
        evaluators = crate::par::try_map(&ids, |_, id| experiment::fit_per_evaluator(id, &reliable, &ctx))?;
    }
    let per_face = experiment::fit_per_face(&samples, cfg.experiment.min_face_edits, cfg.experiment.quadratic_per_face);
    let summary = serde_json::json!({
        "samples": samples.len(),
        "fits": aggregate.fits.len(),
        "skipped_fits": aggregate.skipped.len(),
        "evaluators": evaluators.len(),
    });
    out.json(
        experiment_path(cfg),
        &ExperimentDoc {
            config_hash: out.hash.clone(),
            labels,
            samples: samples.len(),
            aggregate,
            evaluators,
            min_face_edits: cfg.experiment.min_face_edits,
            quadratic_per_face: cfg.experiment.quadratic_per_face,
            per_face,
        },
    )?;
    Ok(summary)
}

/// Evaluators with reliable ratings on every label, in id order.
pub fn eligible_evaluators(reliable: &[RatingRecord], labels: &[String]) -> Vec<String> {
    let mut rated: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in reliable {
        rated.entry(&r.evaluator_id).or_default().insert(&r.label_id);
    }
    rated
        .into_iter()
        .filter(|(_, ls)| labels.iter().all(|l| ls.contains(l.as_str())))
        .map(|(e, _)| e.to_string())
        .collect()
}

fn report_stage(cfg: &RunConfig, out: &mut Outputs) -> Result<serde_json::Value> {
    let decomposition: DecompositionDoc = read_json(&decomposition_path(cfg))?;
    let experiment: ExperimentDoc = read_json(&experiment_path(cfg))?;
    let files = report::render(&decomposition, &experiment, &out.hash);
    let names: Vec<String> = files.iter().map(|f| f.name.clone()).collect();
    for f in files {
        out.bytes(cfg.paths.report_dir.join(&f.name), f.contents.as_bytes())?;
    }
    Ok(serde_json::json!({ "files": names }))
}
