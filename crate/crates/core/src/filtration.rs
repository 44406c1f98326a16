//! Ex-ante filtration: isolate facial components before training, measure
//! how much each one supports the label, and test for disjunctive use.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TmudError};
use crate::image::{ImageTensor, Mask};
use crate::ingest::LabelScale;
use crate::mud::{self, Architecture, LabeledDataset, LabeledItem, Level, TrainConfig};
use crate::numerics::binomial_upper_tail_half;
use crate::rng;
use crate::synthworld::{component_mask_params, ComponentKind, SyntheticDataset};

pub const DEFAULT_FILL: f32 = 0.5;

/// Significance level of the per-level informativeness flag.
pub const INFORMATIVE_ALPHA: f64 = 0.05;

/// Part masks of one face, keyed by kind (composite is derived).
pub type FaceMasks = BTreeMap<ComponentKind, Mask>;

fn check_mask(image: &ImageTensor, mask: &Mask) -> Result<()> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(TmudError::Domain(format!(
            "mask is {}x{} but image is {}x{}",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// Keeps pixels inside `mask` and sets everything else to `fill`.
pub fn extract_component(image: &ImageTensor, mask: &Mask, fill: f32) -> Result<ImageTensor> {
    check_mask(image, mask)?;
    let mut out = ImageTensor::filled(image.height(), image.width(), fill);
    for r in 0..image.height() {
        for c in 0..image.width() {
            if mask.get(r, c) {
                out.set_pixel(r, c, image.pixel(r, c));
            }
        }
    }
    Ok(out)
}

/// Extraction with the union of pairwise-disjoint part masks.
pub fn composite(image: &ImageTensor, masks: &[&Mask], fill: f32) -> Result<ImageTensor> {
    let mut union = Mask::empty(image.height(), image.width());
    for (i, m) in masks.iter().enumerate() {
        check_mask(image, m)?;
        if let Some(j) = masks[..i].iter().position(|prev| prev.intersects(m)) {
            return Err(TmudError::Domain(format!(
                "composite masks {j} and {i} overlap"
            )));
        }
        union = union.union(m);
    }
    extract_component(image, &union, fill)
}

/// Ground-truth part masks for every face of a synthetic dataset.
pub fn synthetic_masks(data: &SyntheticDataset) -> BTreeMap<String, FaceMasks> {
    let per_face = crate::par::map(&data.faces, |_, f| {
        let masks: FaceMasks = ComponentKind::PARTS
            .into_iter()
            .map(|k| (k, component_mask_params(k, &f.params, data.size)))
            .collect();
        (f.face_id.clone(), masks)
    });
    per_face.into_iter().collect()
}

/// Writes `<dir>/<face_id>/<kind>.pgm` for every part mask.
pub fn write_mask_dir(dir: &Path, masks: &BTreeMap<String, FaceMasks>) -> Result<()> {
    for (face, kinds) in masks {
        let sub = dir.join(face);
        std::fs::create_dir_all(&sub).map_err(|e| TmudError::io(&sub, e))?;
        for (kind, mask) in kinds {
            mask.write_pgm(&sub.join(format!("{kind}.pgm")))?;
        }
    }
    Ok(())
}

/// Reads whatever part masks exist for the given faces. Absent files are
/// left out; [`build_component_datasets`] reports them.
pub fn read_mask_dir(dir: &Path, face_ids: &[String]) -> Result<BTreeMap<String, FaceMasks>> {
    let mut out = BTreeMap::new();
    for face in face_ids {
        let mut kinds = FaceMasks::new();
        for kind in ComponentKind::PARTS {
            let path = dir.join(face).join(format!("{kind}.pgm"));
            if path.exists() {
                kinds.insert(kind, Mask::read_pgm(&path)?);
            }
        }
        out.insert(face.clone(), kinds);
    }
    Ok(out)
}

/// Phenomenon-level dataset of a synthetic world's ground-truth label,
/// with the 0/1 label itself as the mean score.
pub fn synthetic_phenomenon(data: &SyntheticDataset, label_id: &str) -> Result<LabeledDataset> {
    let idx = data
        .rule_index(label_id)
        .ok_or_else(|| TmudError::Config(format!("no rule named {label_id:?}")))?;
    Ok(LabeledDataset {
        label_id: label_id.to_string(),
        level: Level::Phenomenon,
        scale: LabelScale::Binary,
        items: data
            .faces
            .iter()
            .map(|f| LabeledItem {
                face_id: f.face_id.clone(),
                image: Arc::new(f.image.clone()),
                label: f.labels[idx],
                mean_score: if f.labels[idx] { 1.0 } else { 0.0 },
                split: None,
            })
            .collect(),
    })
}

#[derive(Clone, Debug)]
pub struct ComponentDatasetSet {
    pub source_label: String,
    pub datasets: BTreeMap<ComponentKind, LabeledDataset>,
}

fn masks_for<'a>(masks: &'a BTreeMap<String, FaceMasks>, face: &str) -> Result<[&'a Mask; 5]> {
    let kinds = masks
        .get(face)
        .ok_or_else(|| TmudError::Data(format!("no masks for face {face}")))?;
    let mut out = Vec::with_capacity(5);
    for kind in ComponentKind::PARTS {
        out.push(
            kinds
                .get(&kind)
                .ok_or_else(|| TmudError::Data(format!("missing {kind} mask for face {face}")))?,
        );
    }
    Ok(out.try_into().expect("five parts"))
}

/// One component-level copy of the phenomenon dataset. Labels, scores and
/// split tags carry over unchanged.
pub fn build_component_dataset(
    phenomenon: &LabeledDataset,
    masks: &BTreeMap<String, FaceMasks>,
    kind: ComponentKind,
    fill: f32,
) -> Result<LabeledDataset> {
    for it in &phenomenon.items {
        masks_for(masks, &it.face_id)?;
    }
    let images = crate::par::try_map(&phenomenon.items, |_, it| {
        let parts = masks_for(masks, &it.face_id)?;
        match kind {
            ComponentKind::Composite => composite(&it.image, &parts, fill),
            _ => {
                let idx = ComponentKind::PARTS.iter().position(|k| *k == kind).expect("part");
                extract_component(&it.image, parts[idx], fill)
            }
        }
    })?;
    let mut images = images.into_iter();
    phenomenon.map_images(Level::Component(kind), |_| Ok(images.next().expect("one per item")))
}

pub fn build_component_datasets(
    phenomenon: &LabeledDataset,
    masks: &BTreeMap<String, FaceMasks>,
    fill: f32,
) -> Result<ComponentDatasetSet> {
    let mut datasets = BTreeMap::new();
    for kind in ComponentKind::ALL {
        datasets.insert(kind, build_component_dataset(phenomenon, masks, kind, fill)?);
    }
    Ok(ComponentDatasetSet {
        source_label: phenomenon.label_id.clone(),
        datasets,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub level: String,
    pub accuracy: f64,
    pub correct: usize,
    pub test_size: usize,
    /// One-sided exact binomial p-value against 0.5.
    pub p_value: f64,
    pub informative: bool,
    pub epochs_run: usize,
}

impl LevelResult {
    pub fn from_counts(level: Level, correct: usize, test_size: usize, epochs_run: usize) -> LevelResult {
        let p_value = binomial_upper_tail_half(correct, test_size);
        LevelResult {
            level: level.to_string(),
            accuracy: correct as f64 / test_size as f64,
            correct,
            test_size,
            p_value,
            informative: p_value < INFORMATIVE_ALPHA,
            epochs_run,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDecomposition {
    pub label_id: String,
    pub rows: Vec<LevelResult>,
}

impl LabelDecomposition {
    pub fn row(&self, level: Level) -> Option<&LevelResult> {
        let name = level.to_string();
        self.rows.iter().find(|r| r.level == name)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub labels: Vec<LabelDecomposition>,
}

/// Training seed for one (label, level) cell.
pub fn level_seed(seed: u64, label_id: &str, level: Level) -> u64 {
    rng::derive_seed(seed, &format!("train:{label_id}:{level}"), 0)
}

/// Trains and scores one classifier per level (phenomenon plus the six
/// component datasets). Levels train concurrently.
pub fn decomposition_table(
    phenomenon: &LabeledDataset,
    components: &ComponentDatasetSet,
    arch: Architecture,
    config: &TrainConfig,
) -> Result<LabelDecomposition> {
    let mut levels: Vec<&LabeledDataset> = vec![phenomenon];
    for kind in ComponentKind::ALL {
        levels.push(components.datasets.get(&kind).ok_or_else(|| {
            TmudError::Data(format!("component set for {} lacks {kind}", phenomenon.label_id))
        })?);
    }
    let rows = crate::par::try_map(&levels, |_, d| {
        let cfg = TrainConfig {
            seed: level_seed(config.seed, &d.label_id, d.level),
            ..config.clone()
        };
        let clf = mud::train(d, arch, &cfg)?;
        let (correct, n) = clf.test_counts(d)?;
        Ok(LevelResult::from_counts(d.level, correct, n, clf.meta.epochs_run))
    })?;
    Ok(LabelDecomposition {
        label_id: phenomenon.label_id.clone(),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    /// Sum of informative component accuracies exceeds the phenomenon's.
    Literal,
    /// At least two informative components and the sum of their accuracy
    /// over chance exceeds the phenomenon's.
    Excess,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Disjunctive,
    NotDisjunctive,
    Indeterminate,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Disjunctive => "disjunctive",
            Verdict::NotDisjunctive => "not-disjunctive",
            Verdict::Indeterminate => "indeterminate",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub criterion: Criterion,
    /// Family-wise significance level over the five components.
    pub family_alpha: f64,
    /// Split `family_alpha` evenly over the five components (Bonferroni).
    pub correct_for_multiplicity: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            criterion: Criterion::Excess,
            family_alpha: 0.05,
            correct_for_multiplicity: true,
        }
    }
}

impl DetectorConfig {
    pub fn per_component_alpha(&self) -> f64 {
        if self.correct_for_multiplicity {
            self.family_alpha / ComponentKind::PARTS.len() as f64
        } else {
            self.family_alpha
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisjunctiveResult {
    pub label_id: String,
    pub verdict: Verdict,
    pub criterion: Criterion,
    pub informative: Vec<ComponentKind>,
    pub gate_alpha: f64,
    pub literal_sum: f64,
    pub literal_verdict: Verdict,
    pub excess_sum: f64,
    pub phenomenon_accuracy: f64,
    pub phenomenon_excess: f64,
    pub excess_verdict: Verdict,
}

/// Applies both criteria to one label's decomposition. Composite is never
/// part of the sum.
pub fn detect_disjunctive(report: &LabelDecomposition, config: &DetectorConfig) -> Result<DisjunctiveResult> {
    let missing = |level: Level| {
        TmudError::Data(format!("decomposition of {} has no {level} row", report.label_id))
    };
    let phen = report.row(Level::Phenomenon).ok_or_else(|| missing(Level::Phenomenon))?;
    let gate = config.per_component_alpha();
    let mut informative = Vec::new();
    let (mut literal_sum, mut excess_sum) = (0.0, 0.0);
    for kind in ComponentKind::PARTS {
        let row = report
            .row(Level::Component(kind))
            .ok_or_else(|| missing(Level::Component(kind)))?;
        if row.p_value < gate {
            informative.push(kind);
            literal_sum += row.accuracy;
            excess_sum += row.accuracy - 0.5;
        }
    }
    let phenomenon_excess = phen.accuracy - 0.5;
    let (literal_verdict, excess_verdict) = if informative.is_empty() {
        (Verdict::Indeterminate, Verdict::Indeterminate)
    } else {
        let lit = if literal_sum > phen.accuracy {
            Verdict::Disjunctive
        } else {
            Verdict::NotDisjunctive
        };
        let exc = if informative.len() >= 2 && excess_sum > phenomenon_excess {
            Verdict::Disjunctive
        } else {
            Verdict::NotDisjunctive
        };
        (lit, exc)
    };
    Ok(DisjunctiveResult {
        label_id: report.label_id.clone(),
        verdict: match config.criterion {
            Criterion::Literal => literal_verdict,
            Criterion::Excess => excess_verdict,
        },
        criterion: config.criterion,
        informative,
        gate_alpha: gate,
        literal_sum,
        literal_verdict,
        excess_sum,
        phenomenon_accuracy: phen.accuracy,
        phenomenon_excess,
        excess_verdict,
    })
}

fn level_title(level: &str) -> String {
    match level {
        "phenomenon" => "Full face".into(),
        "composite" => "Composite face".into(),
        other => {
            let mut c = other.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
        }
    }
}

impl DecompositionReport {
    /// Table with one column per label and one row per level. Test-set
    /// sizes come from the full-face rows.
    pub fn to_markdown(&self, detections: &[DisjunctiveResult]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Predictive performance by level\n");
        let header: Vec<&str> = self.labels.iter().map(|l| l.label_id.as_str()).collect();
        let _ = writeln!(s, "| Level | {} |", header.join(" | "));
        let _ = writeln!(s, "|---|{}", "---:|".repeat(header.len()));
        let blank = " |".repeat(header.len());
        let cell = |label: &LabelDecomposition, level: Level| match label.row(level) {
            Some(r) => format!(
                "{:.1}%{}",
                100.0 * r.accuracy,
                if r.informative { "" } else { "†" }
            ),
            None => "n/a".into(),
        };
        let line = |s: &mut String, level: Level| {
            let cells: Vec<String> = self.labels.iter().map(|l| cell(l, level)).collect();
            let _ = writeln!(s, "| {} | {} |", level_title(&level.to_string()), cells.join(" | "));
        };
        let _ = writeln!(s, "| **Phenomenon level** |{blank}");
        line(&mut s, Level::Phenomenon);
        let _ = writeln!(s, "| **Component level** |{blank}");
        line(&mut s, Level::Component(ComponentKind::Composite));
        for kind in ComponentKind::PARTS {
            line(&mut s, Level::Component(kind));
        }
        let sizes: Vec<String> = self
            .labels
            .iter()
            .map(|l| l.row(Level::Phenomenon).map_or("n/a".into(), |r| r.test_size.to_string()))
            .collect();
        let _ = writeln!(s, "| Test set size | {} |", sizes.join(" | "));
        let _ = writeln!(
            s,
            "\n† not significantly above 50% (one-sided exact binomial test, p < {INFORMATIVE_ALPHA}).\n"
        );
        if !detections.is_empty() {
            let _ = writeln!(s, "## Disjunctive-rule detection\n");
            let _ = writeln!(
                s,
                "| Label | Verdict | Informative components | Literal sum | Full face | Excess sum | Full-face excess |"
            );
            let _ = writeln!(s, "|---|---|---|---:|---:|---:|---:|");
            for d in detections {
                let inf: Vec<&str> = d.informative.iter().map(|k| k.name()).collect();
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} |",
                    d.label_id,
                    d.verdict,
                    if inf.is_empty() { "none".into() } else { inf.join(", ") },
                    d.literal_sum,
                    d.phenomenon_accuracy,
                    d.excess_sum,
                    d.phenomenon_excess
                );
            }
            let gate = detections[0].gate_alpha;
            let _ = writeln!(s, "\nComponents count as informative at p < {gate} per component.");
        }
        s
    }
}
