//! Persisted analysis documents and the Markdown/JSON report set rendered
//! from them.

use serde::{Deserialize, Serialize};

use crate::experiment::{self, AggregateTable, EvaluatorReport, SignSummary};
use crate::filtration::{DecompositionReport, DisjunctiveResult};

/// Output of the filtration stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionDoc {
    pub config_hash: String,
    pub report: DecompositionReport,
    pub detections: Vec<DisjunctiveResult>,
}

/// Output of the experimentation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDoc {
    pub config_hash: String,
    pub labels: Vec<String>,
    pub samples: usize,
    pub aggregate: AggregateTable,
    pub evaluators: Vec<EvaluatorReport>,
    pub min_face_edits: usize,
    pub quadratic_per_face: bool,
    pub per_face: Vec<SignSummary>,
}

#[derive(Serialize)]
struct Table<'a, T: Serialize> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: T,
}

/// One rendered report file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFile {
    pub name: String,
    pub contents: String,
}

fn stamp_markdown(mut md: String, hash: &str) -> String {
    if !md.ends_with('\n') {
        md.push('\n');
    }
    md.push_str(&format!("\n<!-- config-hash: {hash} -->\n"));
    md
}

fn json<T: Serialize>(hash: &str, body: T) -> String {
    let mut s = serde_json::to_string_pretty(&Table { config_hash: hash, body }).expect("report serializes");
    s.push('\n');
    s
}

/// Renders tables 3 to 6 as Markdown plus JSON. The output depends only on
/// the two documents and the hash, so equal inputs give equal bytes.
pub fn render(decomposition: &DecompositionDoc, experiment: &ExperimentDoc, hash: &str) -> Vec<ReportFile> {
    let mut files = Vec::new();
    let mut push = |name: &str, contents: String| {
        files.push(ReportFile {
            name: name.to_string(),
            contents,
        })
    };

    push(
        "table3.md",
        stamp_markdown(decomposition.report.to_markdown(&decomposition.detections), hash),
    );
    push(
        "table3.json",
        json(
            hash,
            serde_json::json!({
                "report": decomposition.report,
                "detections": decomposition.detections,
            }),
        ),
    );

    push("table4.md", stamp_markdown(experiment::aggregate_markdown(&experiment.aggregate), hash));
    push("table4.json", json(hash, serde_json::json!({ "aggregate": experiment.aggregate })));

    let table5 = if experiment.evaluators.is_empty() {
        "# Effect of sexual dimorphism by evaluator\n\nPer-evaluator analysis was not run.\n".to_string()
    } else {
        experiment::evaluator_markdown(&experiment.evaluators)
    };
    push("table5.md", stamp_markdown(table5, hash));
    push("table5.json", json(hash, serde_json::json!({ "evaluators": experiment.evaluators })));

    push(
        "table6.md",
        stamp_markdown(
            experiment::per_face_markdown(&experiment.per_face, experiment.min_face_edits),
            hash,
        ),
    );
    push(
        "table6.json",
        json(
            hash,
            serde_json::json!({
                "min_face_edits": experiment.min_face_edits,
                "quadratic": experiment.quadratic_per_face,
                "per_face": experiment.per_face,
            }),
        ),
    );
    files
}
