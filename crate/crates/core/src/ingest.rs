//! Evaluator ratings: CSV loading, test-retest reliability exclusion,
//! aggregation and binarization into labels. Also hosts the simulated
//! rater panel used with the synthetic face world.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TmudError};
use crate::numerics;
use crate::rng;
use crate::synthworld::{sigmoid, FaceParams, LabelRule};

pub const GENDER_LABEL: &str = "gender";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RatingRecord {
    pub evaluator_id: String,
    pub questionnaire_id: String,
    pub face_id: String,
    pub label_id: String,
    pub score: i64,
    /// Marks the repeated copy of a reliability probe; the unflagged copy
    /// is the first occurrence.
    pub duplicate_flag: bool,
}

/// Score range of a label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelScale {
    /// 1 (does not look like the label) to 5.
    Likert,
    /// 0 = female, 1 = male.
    Binary,
}

impl LabelScale {
    pub fn of(label_id: &str, binary_labels: &[String]) -> LabelScale {
        if binary_labels.iter().any(|b| b == label_id) {
            LabelScale::Binary
        } else {
            LabelScale::Likert
        }
    }

    pub fn range(self) -> (i64, i64) {
        match self {
            LabelScale::Likert => (1, 5),
            LabelScale::Binary => (0, 1),
        }
    }

    /// Strict-threshold binarization of an averaged score.
    pub fn binarize(self, mean: f64) -> bool {
        match self {
            LabelScale::Likert => mean > 3.0,
            LabelScale::Binary => mean > 0.5,
        }
    }

    /// Maps a mean score onto `[0, 1]`.
    pub fn normalize(self, mean: f64) -> f64 {
        match self {
            LabelScale::Likert => (mean - 1.0) / 4.0,
            LabelScale::Binary => mean,
        }
    }
}

pub fn default_binary_labels() -> Vec<String> {
    vec![GENDER_LABEL.to_string()]
}

#[derive(Deserialize)]
struct CsvRow {
    evaluator_id: String,
    questionnaire_id: String,
    face_id: String,
    label_id: String,
    score: String,
    duplicate_flag: String,
}

const COLUMNS: [&str; 6] = [
    "evaluator_id",
    "questionnaire_id",
    "face_id",
    "label_id",
    "score",
    "duplicate_flag",
];

/// Parses a ratings CSV. Every malformed row is reported with its line
/// number; an empty input yields no records and a warning.
pub fn parse_ratings(text: &str, source_name: &str, binary_labels: &[String]) -> Result<Vec<RatingRecord>> {
    // leading `#` lines carry provenance and are skipped
    let mut skipped = 0;
    let mut body = text;
    while body.starts_with('#') {
        body = body.split_once('\n').map_or("", |(_, rest)| rest);
        skipped += 1;
    }
    if body.trim().is_empty() {
        warn!("{source_name}: empty ratings file");
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let headers = reader.headers().map_err(|e| TmudError::Parse {
        source_name: source_name.to_string(),
        lines: vec![(skipped + 1, e.to_string())],
    })?;
    let missing: Vec<&str> = COLUMNS
        .iter()
        .filter(|c| !headers.iter().any(|h| h == **c))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(TmudError::Parse {
            source_name: source_name.to_string(),
            lines: vec![(skipped + 1, format!("missing columns: {}", missing.join(", ")))],
        });
    }

    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        let line = skipped + i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                problems.push((line, e.to_string()));
                continue;
            }
        };
        let scale = LabelScale::of(&row.label_id, binary_labels);
        let (lo, hi) = scale.range();
        let score = match row.score.parse::<i64>() {
            Ok(s) if (lo..=hi).contains(&s) => s,
            Ok(s) => {
                problems.push((
                    line,
                    format!("score {s} outside {lo}..={hi} for label {}", row.label_id),
                ));
                continue;
            }
            Err(_) => {
                problems.push((line, format!("score {:?} is not an integer", row.score)));
                continue;
            }
        };
        let duplicate_flag = match row.duplicate_flag.as_str() {
            "0" | "false" => false,
            "1" | "true" => true,
            other => {
                problems.push((line, format!("duplicate_flag {other:?} is not 0/1")));
                continue;
            }
        };
        if [&row.evaluator_id, &row.questionnaire_id, &row.face_id, &row.label_id]
            .iter()
            .any(|s| s.is_empty())
        {
            problems.push((line, "empty identifier".to_string()));
            continue;
        }
        records.push(RatingRecord {
            evaluator_id: row.evaluator_id,
            questionnaire_id: row.questionnaire_id,
            face_id: row.face_id,
            label_id: row.label_id,
            score,
            duplicate_flag,
        });
    }
    if !problems.is_empty() {
        return Err(TmudError::Parse {
            source_name: source_name.to_string(),
            lines: problems,
        });
    }
    Ok(records)
}

pub fn load_ratings(path: &Path, binary_labels: &[String]) -> Result<Vec<RatingRecord>> {
    let text = fs::read_to_string(path).map_err(|e| TmudError::io(path, e))?;
    parse_ratings(&text, &path.display().to_string(), binary_labels)
}

pub fn ratings_to_csv(records: &[RatingRecord]) -> String {
    let mut out = String::from("evaluator_id,questionnaire_id,face_id,label_id,score,duplicate_flag\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.evaluator_id,
            r.questionnaire_id,
            r.face_id,
            r.label_id,
            r.score,
            u8::from(r.duplicate_flag)
        ));
    }
    out
}

pub fn write_ratings(path: &Path, records: &[RatingRecord]) -> Result<()> {
    fs::write(path, ratings_to_csv(records)).map_err(|e| TmudError::io(path, e))
}

/// Test-retest correlation of one evaluator on one label: Pearson
/// correlation between the original and repeated scores of every probe
/// face, paired in face-id order.
pub fn test_retest(records: &[RatingRecord], label_id: &str, evaluator_id: &str) -> Result<f64> {
    let mut originals: BTreeMap<&str, i64> = BTreeMap::new();
    let mut repeats: BTreeMap<&str, i64> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.label_id == label_id && r.evaluator_id == evaluator_id)
    {
        let slot = if r.duplicate_flag {
            &mut repeats
        } else {
            &mut originals
        };
        // keep the lowest score when a copy is present twice so the result
        // does not depend on record order
        slot.entry(r.face_id.as_str())
            .and_modify(|s| *s = (*s).min(r.score))
            .or_insert(r.score);
    }
    let (first, second): (Vec<f64>, Vec<f64>) = repeats
        .iter()
        .filter_map(|(face, rep)| originals.get(face).map(|o| (*o as f64, *rep as f64)))
        .unzip();
    if first.len() < 2 {
        return Err(TmudError::InsufficientData(format!(
            "evaluator {evaluator_id} has {} duplicate pairs for label {label_id}",
            first.len()
        )));
    }
    numerics::pearson(&first, &second)
}

/// One excluded (evaluator, questionnaire) block and why.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub evaluator_id: String,
    pub questionnaire_id: String,
    pub label_id: String,
    pub reason: String,
}

/// Drops every (evaluator, questionnaire) block in which any label's
/// test-retest correlation is non-positive or cannot be computed.
pub fn filter_reliable(records: &[RatingRecord]) -> (Vec<RatingRecord>, Vec<Exclusion>) {
    let mut blocks: BTreeMap<(&str, &str), Vec<&RatingRecord>> = BTreeMap::new();
    for r in records {
        blocks
            .entry((r.evaluator_id.as_str(), r.questionnaire_id.as_str()))
            .or_default()
            .push(r);
    }
    let mut excluded: BTreeSet<(String, String)> = BTreeSet::new();
    let mut report = Vec::new();
    for ((evaluator, questionnaire), rows) in &blocks {
        let block: Vec<RatingRecord> = rows.iter().map(|r| (*r).clone()).collect();
        let labels: BTreeSet<&str> = rows.iter().map(|r| r.label_id.as_str()).collect();
        for label in labels {
            let reason = match test_retest(&block, label, evaluator) {
                Ok(r) if r > 0.0 => continue,
                Ok(r) => format!("test-retest correlation {r:.4} <= 0"),
                Err(e) => e.to_string(),
            };
            excluded.insert((evaluator.to_string(), questionnaire.to_string()));
            report.push(Exclusion {
                evaluator_id: evaluator.to_string(),
                questionnaire_id: questionnaire.to_string(),
                label_id: label.to_string(),
                reason,
            });
            break;
        }
    }
    let kept = records
        .iter()
        .filter(|r| !excluded.contains(&(r.evaluator_id.clone(), r.questionnaire_id.clone())))
        .cloned()
        .collect();
    (kept, report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub face_id: String,
    pub label_id: String,
    pub mean_score: f64,
    pub binary_label: bool,
    pub rating_count: usize,
}

/// Per (face, label) mean over evaluators of the unflagged scores,
/// binarized with a strict threshold. Output is sorted by (face, label).
pub fn aggregate_binarize(records: &[RatingRecord], binary_labels: &[String]) -> Vec<LabelAssignment> {
    let mut groups: BTreeMap<(&str, &str), (i64, usize)> = BTreeMap::new();
    for r in records {
        let entry = groups
            .entry((r.face_id.as_str(), r.label_id.as_str()))
            .or_insert((0, 0));
        if !r.duplicate_flag {
            entry.0 += r.score;
            entry.1 += 1;
        }
    }
    groups
        .into_iter()
        .filter_map(|((face, label), (sum, count))| {
            if count == 0 {
                warn!("face {face} has no ratings for label {label}; excluded");
                return None;
            }
            let mean = sum as f64 / count as f64;
            Some(LabelAssignment {
                face_id: face.to_string(),
                label_id: label.to_string(),
                mean_score: mean,
                binary_label: LabelScale::of(label, binary_labels).binarize(mean),
                rating_count: count,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentEntry {
    pub mean_score: f64,
    pub binary_label: bool,
    pub rating_count: usize,
}

/// Assignments keyed by face id, then label id.
pub fn assignments_by_face(assignments: &[LabelAssignment]) -> BTreeMap<String, BTreeMap<String, AssignmentEntry>> {
    let mut out: BTreeMap<String, BTreeMap<String, AssignmentEntry>> = BTreeMap::new();
    for a in assignments {
        out.entry(a.face_id.clone()).or_default().insert(
            a.label_id.clone(),
            AssignmentEntry {
                mean_score: a.mean_score,
                binary_label: a.binary_label,
                rating_count: a.rating_count,
            },
        );
    }
    out
}

/// An evaluator whose scores on one label additionally depend on the
/// dimorphism parameter with the given weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedBias {
    pub evaluator_id: String,
    pub label_id: String,
    pub dimorphism_weight: f64,
}

/// Simulated rater panel. A consistent rater scores a Likert label as
/// `clamp(round(1 + 4 sigmoid(k (rule score + bias + w g)) + noise), 1, 5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaterPanel {
    pub evaluators: usize,
    pub random_evaluators: usize,
    pub questionnaires: usize,
    pub duplicates: usize,
    pub bias_sd: f64,
    pub slope: f64,
    pub score_noise: f64,
    pub gender_noise: f64,
    pub planted: Vec<PlantedBias>,
}

impl Default for RaterPanel {
    fn default() -> Self {
        RaterPanel {
            evaluators: 6,
            random_evaluators: 0,
            questionnaires: 4,
            duplicates: 20,
            bias_sd: 0.1,
            slope: 4.0,
            score_noise: 0.5,
            gender_noise: 0.05,
            planted: Vec::new(),
        }
    }
}

pub fn evaluator_id(index: usize) -> String {
    format!("ra{:02}", index + 1)
}

/// Generates ratings for every face, label and evaluator. Faces are dealt
/// round-robin into questionnaires; each evaluator rates every
/// questionnaire and re-rates `duplicates` probe faces per questionnaire.
pub fn simulate_ratings(
    faces: &[(String, FaceParams)],
    rules: &[LabelRule],
    panel: &RaterPanel,
    seed: u64,
) -> Result<Vec<RatingRecord>> {
    for rule in rules {
        rule.validate()?;
    }
    if panel.questionnaires == 0 {
        return Err(TmudError::Config("rater panel needs at least one questionnaire".into()));
    }
    let total = panel.evaluators + panel.random_evaluators;
    let bias_dist = Normal::new(0.0, panel.bias_sd.max(0.0))
        .map_err(|e| TmudError::Config(format!("bias sd: {e}")))?;
    let noise_dist = Normal::new(0.0, panel.score_noise.max(0.0))
        .map_err(|e| TmudError::Config(format!("score noise: {e}")))?;
    let gender_dist = Normal::new(0.0, panel.gender_noise.max(0.0))
        .map_err(|e| TmudError::Config(format!("gender noise: {e}")))?;

    let mut records = Vec::new();
    for e in 0..total {
        let eval_id = evaluator_id(e);
        let random = e >= panel.evaluators;
        let bias = bias_dist.sample(&mut rng::stream(seed, "rater-bias", e as u64));
        for q in 0..panel.questionnaires {
            let members: Vec<usize> = (q..faces.len()).step_by(panel.questionnaires).collect();
            let mut probe_rng = rng::stream(seed, &format!("probes:{eval_id}"), q as u64);
            let mut probes = members.clone();
            rand::seq::SliceRandom::shuffle(probes.as_mut_slice(), &mut probe_rng);
            probes.truncate(panel.duplicates);
            probes.sort_unstable();
            let qid = format!("q{}", q + 1);

            let mut labels: Vec<&str> = vec![GENDER_LABEL];
            labels.extend(rules.iter().map(|r| r.id.as_str()));
            for label in labels {
                let rule = rules.iter().find(|r| r.id == label);
                let weight = panel
                    .planted
                    .iter()
                    .filter(|p| p.evaluator_id == eval_id && p.label_id == label)
                    .map(|p| p.dimorphism_weight)
                    .sum::<f64>();
                let copies = members
                    .iter()
                    .map(|&i| (i, false))
                    .chain(probes.iter().map(|&i| (i, true)));
                for (i, dup) in copies {
                    let (face_id, params) = &faces[i];
                    let mut r = rng::stream(
                        seed,
                        &format!("rate:{eval_id}:{label}:{}", u8::from(dup)),
                        i as u64,
                    );
                    let score = if random {
                        match rule {
                            None => r.random_range(0..=1),
                            Some(_) => r.random_range(1..=5),
                        }
                    } else {
                        match rule {
                            None => {
                                let g = params.dimorphism() + 0.1 * bias + gender_dist.sample(&mut r);
                                i64::from(g > 0.0)
                            }
                            Some(rule) => {
                                let latent =
                                    panel.slope * (rule.score(params) + bias + weight * params.dimorphism());
                                let raw = 1.0 + 4.0 * sigmoid(latent) + noise_dist.sample(&mut r);
                                (raw.round() as i64).clamp(1, 5)
                            }
                        }
                    };
                    records.push(RatingRecord {
                        evaluator_id: eval_id.clone(),
                        questionnaire_id: qid.clone(),
                        face_id: face_id.clone(),
                        label_id: label.to_string(),
                        score,
                        duplicate_flag: dup,
                    });
                }
            }
        }
    }
    Ok(records)
}
