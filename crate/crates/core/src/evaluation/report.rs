//! Report assembly: per-backend rows, the cross-backend mean, and the two
//! percentage annotations attached to every non-skyline group — improvement
//! over the in-dialect baseline and degradation against the skyline, the
//! latter measured relative to the method's own score.
//!
//! When published annotation values are supplied, each recomputed annotation
//! is reconciled against them; entries further than the tolerance are marked
//! UNRECONCILED instead of being silently matched.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{relative_difference, EvalError};

/// Reconciliation band for published annotation values, which were rounded
/// from unpublished unrounded means.
pub const RECONCILE_TOLERANCE: f64 = 1.0;

/// One evaluated configuration on one backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub training_data: String,
    pub test_dialect: String,
    pub backend_id: String,
    pub similarity: f64,
    pub accuracy: f64,
}

/// Backend-agnostic identity of a report group.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub method: String,
    pub training_data: String,
    pub test_dialect: String,
}

impl GroupKey {
    pub fn new(
        method: impl Into<String>,
        training_data: impl Into<String>,
        test_dialect: impl Into<String>,
    ) -> Self {
        GroupKey {
            method: method.into(),
            training_data: training_data.into(),
            test_dialect: test_dialect.into(),
        }
    }

    fn of_row(row: &ReportRow) -> Self {
        GroupKey {
            method: row.method.clone(),
            training_data: row.training_data.clone(),
            test_dialect: row.test_dialect.clone(),
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}|{}|{}",
            self.method, self.training_data, self.test_dialect
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Similarity,
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    Improvement,
    Degradation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AnnotationStatus {
    Reconciled,
    Unreconciled,
    Unpublished,
    /// The relative difference has a zero reference (a zero score), so the
    /// percentage does not exist.
    Undefined,
}

/// A recomputed annotation, optionally reconciled against a published value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub computed: Option<f64>,
    pub published: Option<f64>,
    pub status: AnnotationStatus,
}

/// A published annotation value to reconcile against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedAnnotation {
    pub method: String,
    pub training_data: String,
    pub test_dialect: String,
    pub metric: Metric,
    pub kind: AnnotationKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendScore {
    pub backend_id: String,
    pub similarity: f64,
    pub accuracy: f64,
}

/// Per-metric annotations of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAnnotations {
    pub improvement: Annotation,
    pub degradation: Annotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportGroup {
    pub method: String,
    pub training_data: String,
    pub test_dialect: String,
    pub per_backend: Vec<BackendScore>,
    pub mu_similarity: f64,
    pub mu_accuracy: f64,
    pub similarity_annotations: MetricAnnotations,
    pub accuracy_annotations: MetricAnnotations,
}

impl ReportGroup {
    pub fn key(&self) -> GroupKey {
        GroupKey::new(
            self.method.clone(),
            self.training_data.clone(),
            self.test_dialect.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub skyline: GroupKey,
    pub in_dialect: Vec<GroupKey>,
    pub reconcile_tolerance: f64,
    pub groups: Vec<ReportGroup>,
}

fn method_order(method: &str) -> usize {
    match method {
        "skyline" => 0,
        "in_dialect" => 1,
        "cross_dialect" => 2,
        "lordd" => 3,
        "ablation" => 4,
        _ => 5,
    }
}

/// Builds the full report: groups rows by (method, training data, test
/// dialect), averages each metric across backends, and attaches both
/// annotations to every group. The skyline group carries 0.0 annotations.
pub fn build_report(
    rows: &[ReportRow],
    skyline: &GroupKey,
    in_dialect: &[GroupKey],
    published: &[PublishedAnnotation],
) -> Result<EvalReport, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let mut grouped: BTreeMap<GroupKey, Vec<BackendScore>> = BTreeMap::new();
    for row in rows {
        grouped
            .entry(GroupKey::of_row(row))
            .or_default()
            .push(BackendScore {
                backend_id: row.backend_id.clone(),
                similarity: row.similarity,
                accuracy: row.accuracy,
            });
    }
    for scores in grouped.values_mut() {
        scores.sort_by(|a, b| a.backend_id.cmp(&b.backend_id));
    }
    let mu = |scores: &[BackendScore]| {
        let n = scores.len() as f64;
        (
            scores.iter().map(|s| s.similarity).sum::<f64>() / n,
            scores.iter().map(|s| s.accuracy).sum::<f64>() / n,
        )
    };

    if !grouped.contains_key(skyline) {
        return Err(EvalError::MissingKey(skyline.to_string()));
    }
    let mut in_dialect_mu: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for key in in_dialect {
        let scores = grouped
            .get(key)
            .ok_or_else(|| EvalError::MissingKey(key.to_string()))?;
        in_dialect_mu.insert(key.test_dialect.clone(), mu(scores));
    }
    let (skyline_sim, skyline_acc) = mu(&grouped[skyline]);

    let published_value = |key: &GroupKey, metric: Metric, kind: AnnotationKind| {
        published
            .iter()
            .find(|p| {
                p.method == key.method
                    && p.training_data == key.training_data
                    && p.test_dialect == key.test_dialect
                    && p.metric == metric
                    && p.kind == kind
            })
            .map(|p| p.value)
    };
    let annotate = |key: &GroupKey, metric: Metric, kind: AnnotationKind, computed: Option<f64>| {
        let published = published_value(key, metric, kind);
        let status = match (computed, published) {
            (None, _) => AnnotationStatus::Undefined,
            (Some(_), None) => AnnotationStatus::Unpublished,
            (Some(c), Some(p)) if (c - p).abs() <= RECONCILE_TOLERANCE => {
                AnnotationStatus::Reconciled
            }
            (Some(_), Some(_)) => AnnotationStatus::Unreconciled,
        };
        Annotation {
            computed,
            published,
            status,
        }
    };

    let mut groups = Vec::with_capacity(grouped.len());
    for (key, scores) in &grouped {
        let (mu_sim, mu_acc) = mu(scores);
        let is_skyline = key == skyline;
        let annotations_for = |metric: Metric,
                               value: f64,
                               skyline_value: f64|
         -> Result<MetricAnnotations, EvalError> {
            let (improvement, degradation) = if is_skyline {
                (Some(0.0), Some(0.0))
            } else {
                let (in_sim, in_acc) =
                    in_dialect_mu.get(&key.test_dialect).copied().ok_or_else(|| {
                        EvalError::MissingKey(format!(
                            "in_dialect reference for test dialect {}",
                            key.test_dialect
                        ))
                    })?;
                let reference = match metric {
                    Metric::Similarity => in_sim,
                    Metric::Accuracy => in_acc,
                };
                // a zero reference means the percentage does not exist;
                // record the annotation as undefined instead of failing
                (
                    relative_difference(value, reference).ok(),
                    relative_difference(skyline_value, value).ok(),
                )
            };
            Ok(MetricAnnotations {
                improvement: annotate(key, metric, AnnotationKind::Improvement, improvement),
                degradation: annotate(key, metric, AnnotationKind::Degradation, degradation),
            })
        };
        groups.push(ReportGroup {
            method: key.method.clone(),
            training_data: key.training_data.clone(),
            test_dialect: key.test_dialect.clone(),
            per_backend: scores.clone(),
            mu_similarity: mu_sim,
            mu_accuracy: mu_acc,
            similarity_annotations: annotations_for(Metric::Similarity, mu_sim, skyline_sim)?,
            accuracy_annotations: annotations_for(Metric::Accuracy, mu_acc, skyline_acc)?,
        });
    }
    groups.sort_by(|a, b| {
        let key = |g: &ReportGroup| {
            (
                if g.method == "skyline" { 0 } else { 1 },
                g.test_dialect.clone(),
                method_order(&g.method),
                g.training_data.clone(),
            )
        };
        key(a).cmp(&key(b))
    });
    Ok(EvalReport {
        skyline: skyline.clone(),
        in_dialect: in_dialect.to_vec(),
        reconcile_tolerance: RECONCILE_TOLERANCE,
        groups,
    })
}

fn annotation_cell(a: &Annotation) -> String {
    match (a.status, a.computed) {
        (_, None) => "n/a".to_string(),
        (AnnotationStatus::Unreconciled, Some(c)) => format!("{c:.1}!"),
        (_, Some(c)) => format!("{c:.1}"),
    }
}

/// Renders the aligned plain-text table: one panel per test dialect, the
/// skyline first, plus an UNRECONCILED note per flagged annotation.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let header = format!(
        "{:<14} {:<22} {:<34} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "method", "training_data", "backends (sim/acc)", "mu_sim", "deg%", "imp%", "mu_acc", "deg%", "imp%"
    );
    let mut panels: BTreeMap<String, Vec<&ReportGroup>> = BTreeMap::new();
    for group in &report.groups {
        panels.entry(group.test_dialect.clone()).or_default().push(group);
    }
    let mut notes = Vec::new();
    // skyline panel first
    let skyline_dialect = report.skyline.test_dialect.clone();
    let mut ordered: Vec<(&String, &Vec<&ReportGroup>)> = panels.iter().collect();
    ordered.sort_by_key(|(dialect, _)| (**dialect != skyline_dialect, (*dialect).clone()));
    for (dialect, groups) in ordered {
        out.push_str(&format!("== Tested on {dialect} ==\n"));
        out.push_str(&header);
        for group in groups {
            let backends = group
                .per_backend
                .iter()
                .map(|s| format!("{} {:.1}/{:.1}", s.backend_id, s.similarity, s.accuracy))
                .collect::<Vec<_>>()
                .join("  ");
            out.push_str(&format!(
                "{:<14} {:<22} {:<34} {:>7.1} {:>7} {:>7} {:>7.1} {:>7} {:>7}\n",
                group.method,
                group.training_data,
                backends,
                group.mu_similarity,
                annotation_cell(&group.similarity_annotations.degradation),
                annotation_cell(&group.similarity_annotations.improvement),
                group.mu_accuracy,
                annotation_cell(&group.accuracy_annotations.degradation),
                annotation_cell(&group.accuracy_annotations.improvement),
            ));
            for (metric, annotations) in [
                (Metric::Similarity, &group.similarity_annotations),
                (Metric::Accuracy, &group.accuracy_annotations),
            ] {
                for (kind, a) in [
                    (AnnotationKind::Improvement, &annotations.improvement),
                    (AnnotationKind::Degradation, &annotations.degradation),
                ] {
                    if a.status == AnnotationStatus::Unreconciled {
                        notes.push(format!(
                            "UNRECONCILED: {}/{} on {}: {:?} {:?} computed {:.1}, published {:.1}",
                            group.method,
                            group.training_data,
                            group.test_dialect,
                            metric,
                            kind,
                            a.computed.expect("unreconciled implies computed"),
                            a.published.expect("unreconciled implies published"),
                        ));
                    }
                }
            }
        }
        out.push('\n');
    }
    if !notes.is_empty() {
        out.push_str("Notes:\n");
        for note in notes {
            out.push_str(&note);
            out.push('\n');
        }
    }
    out
}
