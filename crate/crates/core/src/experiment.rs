//! Ex-post analysis: difference samples between edited and original faces,
//! linear and quadratic fits at aggregate, per-evaluator and per-face
//! granularity, and the corresponding report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TmudError};
use crate::image::ImageTensor;
use crate::ingest::{self, LabelScale, RatingRecord};
use crate::latent::{EditedFace, Origin};
use crate::mud::{self, Architecture, Classifier, LabeledDataset, TrainConfig};
use crate::numerics::{ols, RegressionFit};
use crate::rng;

pub const STAR_FOOTNOTE: &str = "* p < 0.05, ** p < 0.01, *** p < 0.001";

pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// One (edit, label) observation. `x` is the change in the probability of
/// the opposite gender (feminization for male origins, masculinization for
/// female origins); `y` is the change in the label probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferenceSample {
    pub origin_id: String,
    pub origin_male: bool,
    pub step: f64,
    pub label_id: String,
    pub x: f64,
    pub y: f64,
}

/// Builds one sample per (edit, label). Edit gender probabilities are
/// taken from the edits; original and label probabilities are computed
/// here.
pub fn difference_samples(
    origins: &[Origin],
    edits: &[EditedFace],
    labels: &[(&str, &Classifier)],
    gender: &Classifier,
) -> Result<Vec<DifferenceSample>> {
    let index: BTreeMap<&str, usize> = origins.iter().enumerate().map(|(i, o)| (o.face_id.as_str(), i)).collect();
    let origin_probs = crate::par::try_map(origins, |_, o| {
        let male = gender.predict_proba(&o.image)?;
        let per_label = labels
            .iter()
            .map(|(_, c)| c.predict_proba(&o.image))
            .collect::<Result<Vec<_>>>()?;
        Ok((male, per_label))
    })?;
    let per_edit = crate::par::try_map(edits, |_, e| {
        let &oi = index
            .get(e.origin_id.as_str())
            .ok_or_else(|| TmudError::Data(format!("edit of unknown origin {}", e.origin_id)))?;
        let origin = &origins[oi];
        let (male0, label0) = &origin_probs[oi];
        let dmale = e.p_male - male0;
        let x = if origin.male { -dmale } else { dmale };
        labels
            .iter()
            .zip(label0)
            .map(|((id, clf), p0)| {
                Ok(DifferenceSample {
                    origin_id: e.origin_id.clone(),
                    origin_male: origin.male,
                    step: e.step,
                    label_id: id.to_string(),
                    x,
                    y: clf.predict_proba(&e.image)? - p0,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_edit.into_iter().flatten().collect())
}

/// Negates every `x`: feminization extent becomes masculinization extent
/// and vice versa.
pub fn flip_orientation(samples: &[DifferenceSample]) -> Vec<DifferenceSample> {
    samples
        .iter()
        .map(|s| DifferenceSample { x: -s.x, ..s.clone() })
        .collect()
}

pub const MIN_AGGREGATE_SAMPLES: usize = 10;

/// Linear and quadratic fits for one (label, origin gender) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateFit {
    pub label_id: String,
    pub origin_male: bool,
    pub n: usize,
    pub linear: RegressionFit,
    pub quadratic: RegressionFit,
}

fn group_xy<'a>(samples: &'a [DifferenceSample], label: &'a str, male: bool) -> impl Iterator<Item = &'a DifferenceSample> {
    samples
        .iter()
        .filter(move |s| s.label_id == label && s.origin_male == male && s.step != 0.0)
}

/// Pooled fits `y = a0 + a1 x` and `y = b0 + b1 x + b2 x^2` over the
/// group's non-zero-step samples, each sample weighted equally.
pub fn fit_aggregate(samples: &[DifferenceSample], label: &str, male: bool) -> Result<AggregateFit> {
    let (x, y): (Vec<f64>, Vec<f64>) = group_xy(samples, label, male).map(|s| (s.x, s.y)).unzip();
    if x.len() < MIN_AGGREGATE_SAMPLES {
        return Err(TmudError::InsufficientData(format!(
            "{} samples for label {label} ({} origins); need {MIN_AGGREGATE_SAMPLES}",
            x.len(),
            group_name(male)
        )));
    }
    let lin: Vec<Vec<f64>> = x.iter().map(|v| vec![*v]).collect();
    let quad: Vec<Vec<f64>> = x.iter().map(|v| vec![*v, v * v]).collect();
    Ok(AggregateFit {
        label_id: label.to_string(),
        origin_male: male,
        n: x.len(),
        linear: ols(&lin, &y)?,
        quadratic: ols(&quad, &y)?,
    })
}

fn group_name(male: bool) -> &'static str {
    if male {
        "male"
    } else {
        "female"
    }
}

/// Dataset of one label binarized from a subset of ratings.
pub fn label_dataset(
    records: &[RatingRecord],
    label: &str,
    faces: &BTreeMap<String, Arc<ImageTensor>>,
    binary_labels: &[String],
) -> Result<LabeledDataset> {
    let assignments = ingest::aggregate_binarize(records, binary_labels);
    LabeledDataset::from_assignments(label, LabelScale::of(label, binary_labels), &assignments, faces)
}

/// A trained label classifier with its held-out counts.
#[derive(Clone, Debug)]
pub struct TrainedLabel {
    pub classifier: Classifier,
    pub correct: usize,
    pub test_size: usize,
}

/// Split, balance and train one label classifier. `tag` keeps the seeds of
/// different training contexts (pooled, per evaluator) apart.
pub fn train_label(dataset: &LabeledDataset, arch: Architecture, train: &TrainConfig, seed: u64, tag: &str) -> Result<TrainedLabel> {
    let split_seed = rng::derive_seed(seed, &format!("split:{tag}:{}", dataset.label_id), 0);
    let prepared = mud::balance(&mud::split(dataset, split_seed)?)?;
    let cfg = TrainConfig {
        seed: rng::derive_seed(seed, &format!("train:{tag}:{}", dataset.label_id), 0),
        ..train.clone()
    };
    let classifier = mud::train(&prepared, arch, &cfg)?;
    let (correct, test_size) = classifier.test_counts(&prepared)?;
    Ok(TrainedLabel {
        classifier,
        correct,
        test_size,
    })
}

/// A (label, origin gender) group that could not be fitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedFit {
    pub label_id: String,
    pub origin_male: bool,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub fits: Vec<AggregateFit>,
    pub skipped: Vec<SkippedFit>,
}

/// Aggregate fits for every label, male origins first. Groups with too
/// few samples or a degenerate design are listed as skipped.
pub fn fit_all(samples: &[DifferenceSample], labels: &[String]) -> Result<AggregateTable> {
    let mut table = AggregateTable::default();
    for male in [true, false] {
        for label in labels {
            match fit_aggregate(samples, label, male) {
                Ok(f) => table.fits.push(f),
                Err(e @ (TmudError::InsufficientData(_) | TmudError::SingularDesign(_))) => table.skipped.push(SkippedFit {
                    label_id: label.clone(),
                    origin_male: male,
                    reason: e.to_string(),
                }),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(table)
}

/// Everything the per-evaluator analysis needs besides the ratings.
pub struct EvaluatorContext<'a> {
    /// Training corpus images by face id.
    pub faces: &'a BTreeMap<String, Arc<ImageTensor>>,
    pub origins: &'a [Origin],
    pub edits: &'a [EditedFace],
    /// Pooled gender classifier, reused as is.
    pub gender: &'a Classifier,
    pub labels: &'a [String],
    pub binary_labels: &'a [String],
    pub arch: Architecture,
    pub train: TrainConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorReport {
    pub evaluator_id: String,
    pub table: AggregateTable,
}

/// Retrains the label classifiers on one evaluator's own scores
/// (mean of that evaluator's unflagged scores, strict threshold) and refits
/// both groups. `records` must already be reliability-filtered.
pub fn fit_per_evaluator(evaluator_id: &str, records: &[RatingRecord], ctx: &EvaluatorContext<'_>) -> Result<EvaluatorReport> {
    let own: Vec<RatingRecord> = records
        .iter()
        .filter(|r| r.evaluator_id == evaluator_id)
        .cloned()
        .collect();
    if own.is_empty() {
        return Err(TmudError::Domain(format!(
            "evaluator {evaluator_id} has no reliable ratings"
        )));
    }
    let classifiers = crate::par::try_map(ctx.labels, |_, label| {
        let d = label_dataset(&own, label, ctx.faces, ctx.binary_labels)?;
        if d.is_empty() {
            return Err(TmudError::Domain(format!(
                "evaluator {evaluator_id} has no reliable ratings for label {label}"
            )));
        }
        Ok(train_label(&d, ctx.arch, &ctx.train, ctx.seed, evaluator_id)?.classifier)
    })?;
    let named: Vec<(&str, &Classifier)> = ctx.labels.iter().map(String::as_str).zip(&classifiers).collect();
    let samples = difference_samples(ctx.origins, ctx.edits, &named, ctx.gender)?;
    Ok(EvaluatorReport {
        evaluator_id: evaluator_id.to_string(),
        table: fit_all(&samples, ctx.labels)?,
    })
}

pub const MIN_FACE_EDITS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignClass {
    Negative,
    Positive,
    NonSignificant,
}

/// Negative or positive when the slope's p-value is at most 0.05,
/// otherwise non-significant.
pub fn sign_class(fit: &RegressionFit) -> SignClass {
    if fit.slope_p() > 0.05 {
        SignClass::NonSignificant
    } else if fit.slope() < 0.0 {
        SignClass::Negative
    } else {
        SignClass::Positive
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceFit {
    pub origin_id: String,
    pub n: usize,
    pub slope: Option<f64>,
    pub p_value: Option<f64>,
    pub class: SignClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignSummary {
    pub label_id: String,
    pub origin_male: bool,
    pub negative: usize,
    pub positive: usize,
    pub non_significant: usize,
    /// Faces with fewer than the minimum number of edits.
    pub skipped: usize,
    pub faces: Vec<FaceFit>,
}

impl SignSummary {
    pub fn analyzed(&self) -> usize {
        self.negative + self.positive + self.non_significant
    }

    pub fn percent(&self, count: usize) -> f64 {
        if self.analyzed() == 0 {
            0.0
        } else {
            100.0 * count as f64 / self.analyzed() as f64
        }
    }
}

/// Per-origin fits for every (label, origin gender) present in `samples`.
/// The sign comes from the linear slope, or with `quadratic` from the
/// first-order coefficient of the quadratic model. Faces with fewer than
/// `min_edits` non-zero edits are skipped; a face whose fit is degenerate
/// counts as non-significant.
pub fn fit_per_face(samples: &[DifferenceSample], min_edits: usize, quadratic: bool) -> Vec<SignSummary> {
    let mut groups: BTreeMap<(String, bool), BTreeMap<String, Vec<&DifferenceSample>>> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.step != 0.0) {
        groups
            .entry((s.label_id.clone(), s.origin_male))
            .or_default()
            .entry(s.origin_id.clone())
            .or_default()
            .push(s);
    }
    let mut out = Vec::new();
    // male rows first, then female, each in label order
    for male in [true, false] {
        for ((label, _), faces) in groups.iter().filter(|((_, m), _)| *m == male) {
            let mut summary = SignSummary {
                label_id: label.clone(),
                origin_male: male,
                negative: 0,
                positive: 0,
                non_significant: 0,
                skipped: 0,
                faces: Vec::new(),
            };
            let entries: Vec<(&String, &Vec<&DifferenceSample>)> = faces.iter().collect();
            let fits = crate::par::map(&entries, |_, (id, rows)| {
                if rows.len() < min_edits {
                    return None;
                }
                let design: Vec<Vec<f64>> = rows
                    .iter()
                    .map(|s| if quadratic { vec![s.x, s.x * s.x] } else { vec![s.x] })
                    .collect();
                let y: Vec<f64> = rows.iter().map(|s| s.y).collect();
                Some(match ols(&design, &y) {
                    Ok(fit) => FaceFit {
                        origin_id: (*id).clone(),
                        n: rows.len(),
                        slope: Some(fit.slope()),
                        p_value: Some(fit.slope_p()),
                        class: sign_class(&fit),
                    },
                    Err(_) => FaceFit {
                        origin_id: (*id).clone(),
                        n: rows.len(),
                        slope: None,
                        p_value: None,
                        class: SignClass::NonSignificant,
                    },
                })
            });
            for f in fits {
                match f {
                    None => summary.skipped += 1,
                    Some(f) => {
                        match f.class {
                            SignClass::Negative => summary.negative += 1,
                            SignClass::Positive => summary.positive += 1,
                            SignClass::NonSignificant => summary.non_significant += 1,
                        }
                        summary.faces.push(f);
                    }
                }
            }
            out.push(summary);
        }
    }
    out
}

fn coef(fit: &RegressionFit, i: usize) -> String {
    format!("{:.3}{}", fit.coefficients[i], stars(fit.p_values[i]))
}

fn group_heading(male: bool) -> &'static str {
    if male {
        "Male faces (x = feminization extent)"
    } else {
        "Female faces (x = masculinization extent)"
    }
}

#[derive(Clone, Copy)]
enum Row<'a> {
    Fit(&'a AggregateFit),
    Skipped,
}

fn fit_table(s: &mut String, first_column: &str, rows: &[(String, Row<'_>)]) {
    let _ = writeln!(
        s,
        "| {first_column} | a₁ | Adj. R² (linear) | b₁ | b₂ | Adj. R² (quadratic) | n |"
    );
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|");
    for (name, row) in rows {
        match row {
            Row::Fit(f) => {
                let _ = writeln!(
                    s,
                    "| {name} | {} | {:.3} | {} | {} | {:.3} | {} |",
                    coef(&f.linear, 1),
                    f.linear.adj_r_squared,
                    coef(&f.quadratic, 1),
                    coef(&f.quadratic, 2),
                    f.quadratic.adj_r_squared,
                    f.n
                );
            }
            Row::Skipped => {
                let _ = writeln!(s, "| {name} | n/a | n/a | n/a | n/a | n/a | n/a |");
            }
        }
    }
}

fn table_rows<'a>(table: &'a AggregateTable, male: bool, suffix: &str) -> Vec<(String, String, Row<'a>)> {
    let fits = table
        .fits
        .iter()
        .filter(|f| f.origin_male == male)
        .map(|f| (f.label_id.clone(), format!("{}{suffix}", f.label_id), Row::Fit(f)));
    let skipped = table
        .skipped
        .iter()
        .filter(|f| f.origin_male == male)
        .map(|f| (f.label_id.clone(), format!("{}{suffix}", f.label_id), Row::Skipped));
    fits.chain(skipped).collect()
}

fn fit_document(title: &str, note: &str, first_column: &str, blocks: &[Vec<(String, String, Row<'_>)>; 2]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {title}\n");
    let _ = writeln!(
        s,
        "Linear: y = a₀ + a₁x. Quadratic: y = b₀ + b₁x + b₂x². {note} Zero-step edits are excluded. n/a marks groups too small to fit.\n"
    );
    for (male, rows) in [true, false].into_iter().zip(blocks) {
        if rows.is_empty() {
            continue;
        }
        let _ = writeln!(s, "## {}\n", group_heading(male));
        let rows: Vec<(String, Row<'_>)> = rows
            .iter()
            .map(|(_, name, row)| (name.clone(), *row))
            .collect();
        fit_table(&mut s, first_column, &rows);
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "{STAR_FOOTNOTE}");
    s
}

/// Aggregate-level table, one block per origin gender.
pub fn aggregate_markdown(table: &AggregateTable) -> String {
    let blocks = [true, false].map(|male| {
        let mut rows = table_rows(table, male, "");
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        rows
    });
    fit_document(
        "Effect of sexual dimorphism at the aggregate level",
        "Every edited face is weighted equally.",
        "Label",
        &blocks,
    )
}

/// Per-evaluator table: the aggregate layout with one row per
/// (label, evaluator).
pub fn evaluator_markdown(reports: &[EvaluatorReport]) -> String {
    let blocks = [true, false].map(|male| {
        let mut rows: Vec<(String, String, Row<'_>)> = reports
            .iter()
            .flat_map(|r| table_rows(&r.table, male, &format!(" / {}", r.evaluator_id)))
            .collect();
        // label first, then evaluator
        rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        rows
    });
    fit_document(
        "Effect of sexual dimorphism by evaluator",
        "Label classifiers are retrained on each evaluator's own scores; the pooled gender classifier is reused.",
        "Label / evaluator",
        &blocks,
    )
}

/// Per-face sign table: counts and shares of negative, positive and
/// non-significant slopes.
pub fn per_face_markdown(summaries: &[SignSummary], min_edits: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Signs of the per-face linear effect\n");
    let _ = writeln!(
        s,
        "Faces with at least {min_edits} edited copies; non-significant means p > 0.05.\n"
    );
    for male in [true, false] {
        let rows: Vec<&SignSummary> = summaries.iter().filter(|r| r.origin_male == male).collect();
        if rows.is_empty() {
            continue;
        }
        let _ = writeln!(s, "## {}\n", group_heading(male));
        let _ = writeln!(s, "| Label | Negative | % | Positive | % | Non-significant | % | Faces | Skipped |");
        let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|---:|---:|");
        for r in rows {
            let _ = writeln!(
                s,
                "| {} | {} | {:.1} | {} | {:.1} | {} | {:.1} | {} | {} |",
                r.label_id,
                r.negative,
                r.percent(r.negative),
                r.positive,
                r.percent(r.positive),
                r.non_significant,
                r.percent(r.non_significant),
                r.analyzed(),
                r.skipped
            );
        }
        let _ = writeln!(s);
    }
    s
}
