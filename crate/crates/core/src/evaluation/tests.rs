use ndarray::Array2;

use crate::corpus::fixtures::table6_fisherman;
use crate::corpus::{mask_conversation, PromptTemplate};
use crate::lm::{Backend, BackendDescriptor, ForwardPass, LmError, TokenSequence};

use super::*;

#[test]
fn normalize_answer_examples() {
    assert_eq!(normalize_answer("Fisherman."), "fisherman");
    assert_eq!(normalize_answer("  washing   machine "), "washing machine");
    assert_eq!(normalize_answer(""), "");
    assert_eq!(normalize_answer("Planet!?"), "planet");
}

fn result(id: &str, prediction: &str, reference: &str) -> EvalResult {
    let correct = !normalize_answer(reference).is_empty()
        && normalize_answer(prediction) == normalize_answer(reference);
    EvalResult {
        example_id: id.into(),
        prediction: prediction.into(),
        reference: reference.into(),
        correct,
        similarity: 0.0,
        flags: vec![],
    }
}

#[test]
fn accuracy_counts_normalized_matches() {
    let all: Vec<EvalResult> = (0..4).map(|i| result(&i.to_string(), "Cat.", "cat")).collect();
    assert_eq!(accuracy(&all).unwrap(), 100.0);
    let none: Vec<EvalResult> = (0..4).map(|i| result(&i.to_string(), "dog", "cat")).collect();
    assert_eq!(accuracy(&none).unwrap(), 0.0);
    // 72 of 160 correct at the en-IN test size
    let mut mixed = Vec::new();
    for i in 0..160 {
        if i < 72 {
            mixed.push(result(&i.to_string(), "kettle", "Kettle"));
        } else {
            mixed.push(result(&i.to_string(), "wrong", "kettle"));
        }
    }
    assert_eq!(accuracy(&mixed).unwrap(), 45.0);
    // independent recount: re-derive correctness from the stored strings
    let recount = 100.0
        * mixed
            .iter()
            .filter(|r| normalize_answer(&r.prediction) == normalize_answer(&r.reference))
            .count() as f64
        / mixed.len() as f64;
    assert_eq!(accuracy(&mixed).unwrap(), recount);
    assert!(matches!(accuracy(&[]), Err(EvalError::EmptyResults)));
}

#[test]
fn embedder_is_deterministic_and_unit_norm() {
    let embedder = TrigramHashEmbedder::default();
    for text in ["fisherman", "washing machine", "ab", ""] {
        let a = embedder.embed(text);
        let b = embedder.embed(text);
        assert_eq!(a.vector, b.vector);
        let norm = a.vector.dot(&a.vector).sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm} for {text:?}");
    }
    assert!(embedder.embed("").fallback);
    assert!(!embedder.embed("cat").fallback);
}

#[test]
fn similarity_identical_orthogonal_and_mixture() {
    let embedder = TrigramHashEmbedder::default();
    let identical: Vec<EvalResult> =
        (0..4).map(|i| result(&i.to_string(), "kettle", "kettle")).collect();
    let sim = similarity(&identical, &embedder, true).unwrap();
    assert!((sim - 100.0).abs() < 1e-9, "sim {sim}");

    // disjoint character trigram sets embed orthogonally
    let a = embedder.embed("aaaa");
    let b = embedder.embed("bbbb");
    assert_eq!(a.vector.dot(&b.vector), 0.0, "hash collision in test strings");
    let orthogonal: Vec<EvalResult> =
        (0..4).map(|i| result(&i.to_string(), "aaaa", "bbbb")).collect();
    let sim = similarity(&orthogonal, &embedder, true).unwrap();
    assert!(sim.abs() < 1e-9, "sim {sim}");

    let mixture = vec![
        result("0", "kettle", "kettle"),
        result("1", "kettle", "kettle"),
        result("2", "aaaa", "bbbb"),
        result("3", "aaaa", "bbbb"),
    ];
    let sim = similarity(&mixture, &embedder, true).unwrap();
    assert!((sim - 50.0).abs() < 1e-9, "sim {sim}");

    // permutation invariance
    let mut reversed = mixture.clone();
    reversed.reverse();
    assert_eq!(
        similarity(&mixture, &embedder, true).unwrap(),
        similarity(&reversed, &embedder, true).unwrap()
    );
}

#[test]
fn relative_difference_matches_published_arithmetic() {
    // skyline vs in-dialect gaps, and the improvement column
    assert!((relative_difference(67.2, 52.8).unwrap() - 27.3).abs() < 0.1);
    assert!((relative_difference(44.8, 27.2).unwrap() - 64.7).abs() < 0.1);
    assert!((relative_difference(59.9, 52.8).unwrap() - 13.4).abs() < 0.1);
    assert!(matches!(
        relative_difference(1.0, 0.0),
        Err(EvalError::ZeroReference)
    ));
    assert_eq!(relative_difference(5.0, 5.0).unwrap(), 0.0);
    let up = relative_difference(6.0, 5.0).unwrap();
    let down = relative_difference(4.0, 5.0).unwrap();
    assert!(up > 0.0 && down < 0.0);
}

/// Stub that always emits the stop token immediately.
struct StopStub {
    descriptor: BackendDescriptor,
}

impl StopStub {
    fn new() -> Self {
        StopStub {
            descriptor: BackendDescriptor {
                vocab_size: 16,
                hidden_dim: 8,
                context_len: 4096,
                linear_layers: vec![],
                mask_token_id: 1,
                end_token_id: 0,
            },
        }
    }
}

impl Backend for StopStub {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence, LmError> {
        Ok(TokenSequence::new(
            text.bytes().map(|b| 2 + (b % 14) as u32).collect(),
        ))
    }

    fn detokenize(&self, _tokens: &TokenSequence) -> String {
        String::new()
    }

    fn forward(&self, tokens: &TokenSequence) -> Result<ForwardPass, LmError> {
        let mut logits = Array2::zeros((tokens.len(), 16));
        logits[[tokens.len() - 1, 0]] = 10.0;
        Ok(ForwardPass {
            logits,
            hidden: Array2::zeros((tokens.len(), 8)),
        })
    }
}

#[test]
fn empty_continuation_is_flagged_and_incorrect() {
    let stub = StopStub::new();
    let example = mask_conversation(&table6_fisherman()).unwrap();
    let outcome =
        predict_target(&stub, &example, &PromptTemplate::default(), DEFAULT_MAX_NEW).unwrap();
    assert_eq!(outcome.prediction, "");
    assert!(outcome.flags.contains(&"empty_prediction".to_string()));

    let embedder = TrigramHashEmbedder::default();
    let results = evaluate(
        &stub,
        &[example],
        &PromptTemplate::default(),
        &embedder,
        &EvalOptions::default(),
    )
    .unwrap();
    assert!(!results[0].correct);
    assert!(results[0].flags.contains(&"embed_fallback".to_string()));
}

#[test]
fn predict_rejects_zero_max_new() {
    let stub = StopStub::new();
    let example = mask_conversation(&table6_fisherman()).unwrap();
    assert!(matches!(
        predict_target(&stub, &example, &PromptTemplate::default(), 0),
        Err(EvalError::Config(_))
    ));
}

#[test]
fn predictions_jsonl_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("predictions.jsonl");
    let results = vec![
        result("a", "cat", "cat"),
        EvalResult {
            flags: vec!["truncated_prompt".into()],
            ..result("b", "", "kettle")
        },
    ];
    write_predictions(&path, &results).unwrap();
    assert_eq!(read_predictions(&path).unwrap(), results);
}

pub(crate) fn table3_rows() -> Vec<ReportRow> {
    let row = |method: &str, data: &str, dialect: &str, backend: &str, sim: f64, acc: f64| {
        ReportRow {
            method: method.into(),
            training_data: data.into(),
            test_dialect: dialect.into(),
            backend_id: backend.into(),
            similarity: sim,
            accuracy: acc,
        }
    };
    vec![
        row("skyline", "en-US", "en-US", "mistral", 64.7, 44.3),
        row("skyline", "en-US", "en-US", "gemma", 69.7, 45.3),
        row("in_dialect", "en-IN", "en-IN", "mistral", 51.0, 24.4),
        row("in_dialect", "en-IN", "en-IN", "gemma", 54.6, 30.0),
        row("cross_dialect", "en-US", "en-IN", "mistral", 54.6, 25.6),
        row("cross_dialect", "en-US", "en-IN", "gemma", 61.3, 35.0),
        row("cross_dialect", "IN-MV", "en-IN", "mistral", 52.4, 24.4),
        row("cross_dialect", "IN-MV", "en-IN", "gemma", 58.2, 30.0),
        row("cross_dialect", "IN-TR", "en-IN", "mistral", 50.4, 24.3),
        row("cross_dialect", "IN-TR", "en-IN", "gemma", 53.0, 26.9),
        row("lordd", "en-US + en-IN", "en-IN", "mistral", 55.9, 30.0),
        row("lordd", "en-US + en-IN", "en-IN", "gemma", 63.9, 41.3),
        row("in_dialect", "en-NG", "en-NG", "mistral", 53.0, 27.2),
        row("in_dialect", "en-NG", "en-NG", "gemma", 60.9, 35.3),
        row("cross_dialect", "en-US", "en-NG", "mistral", 58.9, 31.4),
        row("cross_dialect", "en-US", "en-NG", "gemma", 62.8, 40.7),
        row("cross_dialect", "NG-MV", "en-NG", "mistral", 55.7, 28.4),
        row("cross_dialect", "NG-MV", "en-NG", "gemma", 61.4, 38.6),
        row("lordd", "en-US + en-NG", "en-NG", "mistral", 62.4, 40.5),
        row("lordd", "en-US + en-NG", "en-NG", "gemma", 64.5, 43.2),
    ]
}

pub(crate) fn table3_published() -> Vec<PublishedAnnotation> {
    let entry = |method: &str,
                 data: &str,
                 dialect: &str,
                 metric: Metric,
                 kind: AnnotationKind,
                 value: f64| PublishedAnnotation {
        method: method.into(),
        training_data: data.into(),
        test_dialect: dialect.into(),
        metric,
        kind,
        value,
    };
    use AnnotationKind::{Degradation, Improvement};
    use Metric::{Accuracy, Similarity};
    vec![
        entry("in_dialect", "en-IN", "en-IN", Similarity, Degradation, 27.3),
        entry("in_dialect", "en-IN", "en-IN", Accuracy, Degradation, 64.7),
        entry("in_dialect", "en-IN", "en-IN", Similarity, Improvement, 0.0),
        entry("in_dialect", "en-IN", "en-IN", Accuracy, Improvement, 0.0),
        entry("lordd", "en-US + en-IN", "en-IN", Similarity, Improvement, 13.4),
        entry("lordd", "en-US + en-IN", "en-IN", Similarity, Degradation, 12.0),
        entry("lordd", "en-US + en-IN", "en-IN", Accuracy, Improvement, 28.1),
        entry("lordd", "en-US + en-IN", "en-IN", Accuracy, Degradation, 25.0),
        entry("in_dialect", "en-NG", "en-NG", Similarity, Degradation, 17.9),
        entry("in_dialect", "en-NG", "en-NG", Accuracy, Degradation, 43.1),
        entry("lordd", "en-US + en-NG", "en-NG", Similarity, Improvement, 11.4),
        entry("lordd", "en-US + en-NG", "en-NG", Similarity, Degradation, 5.8),
        entry("lordd", "en-US + en-NG", "en-NG", Accuracy, Improvement, 33.8),
        entry("lordd", "en-US + en-NG", "en-NG", Accuracy, Degradation, 4.5),
    ]
}

fn group<'r>(report: &'r EvalReport, method: &str, dialect: &str) -> &'r ReportGroup {
    report
        .groups
        .iter()
        .find(|g| g.method == method && g.test_dialect == dialect)
        .unwrap()
}

#[test]
fn report_reproduces_published_annotations() {
    let rows = table3_rows();
    let skyline = GroupKey::new("skyline", "en-US", "en-US");
    let in_dialect = vec![
        GroupKey::new("in_dialect", "en-IN", "en-IN"),
        GroupKey::new("in_dialect", "en-NG", "en-NG"),
    ];
    let report = build_report(&rows, &skyline, &in_dialect, &table3_published()).unwrap();

    let sky = group(&report, "skyline", "en-US");
    assert!((sky.mu_similarity - 67.2).abs() < 1e-9);
    assert!((sky.mu_accuracy - 44.8).abs() < 1e-9);
    assert_eq!(sky.similarity_annotations.improvement.computed, Some(0.0));
    assert_eq!(sky.accuracy_annotations.degradation.computed, Some(0.0));

    let in_in = group(&report, "in_dialect", "en-IN");
    assert!((in_in.similarity_annotations.degradation.computed.unwrap() - 27.3).abs() < 0.1);
    assert!((in_in.accuracy_annotations.degradation.computed.unwrap() - 64.7).abs() < 0.1);
    assert_eq!(
        in_in.similarity_annotations.degradation.status,
        AnnotationStatus::Reconciled
    );

    let lordd_in = group(&report, "lordd", "en-IN");
    assert!((lordd_in.similarity_annotations.improvement.computed.unwrap() - 13.4).abs() < 0.1);
    assert!((lordd_in.similarity_annotations.degradation.computed.unwrap() - 12.0).abs() < 0.3);
    assert!((lordd_in.accuracy_annotations.degradation.computed.unwrap() - 25.0).abs() < 1.0);
    // the published 28.1 does not reproduce; computed is ~31.1
    let imp = &lordd_in.accuracy_annotations.improvement;
    assert_eq!(imp.status, AnnotationStatus::Unreconciled);
    assert!((imp.computed.unwrap() - 31.1).abs() < 0.1, "computed {:?}", imp.computed);

    let in_ng = group(&report, "in_dialect", "en-NG");
    assert!((in_ng.similarity_annotations.degradation.computed.unwrap() - 17.9).abs() < 0.3);
    assert!((in_ng.accuracy_annotations.degradation.computed.unwrap() - 43.1).abs() < 0.3);

    let lordd_ng = group(&report, "lordd", "en-NG");
    assert!((lordd_ng.similarity_annotations.improvement.computed.unwrap() - 11.4).abs() < 0.3);
    assert!((lordd_ng.accuracy_annotations.improvement.computed.unwrap() - 33.8).abs() < 0.3);
    assert!((lordd_ng.similarity_annotations.degradation.computed.unwrap() - 5.8).abs() < 0.3);
    // the published 4.5 does not reproduce; computed is ~7.0
    let deg = &lordd_ng.accuracy_annotations.degradation;
    assert_eq!(deg.status, AnnotationStatus::Unreconciled);
    assert!((deg.computed.unwrap() - 7.0).abs() < 0.1, "computed {:?}", deg.computed);

    let text = render_text(&report);
    assert!(text.contains("UNRECONCILED"));
    assert!(text.contains("Tested on en-IN"));
    // exactly the two known-unreconcilable entries are flagged
    let flagged = report
        .groups
        .iter()
        .flat_map(|g| {
            [
                &g.similarity_annotations.improvement,
                &g.similarity_annotations.degradation,
                &g.accuracy_annotations.improvement,
                &g.accuracy_annotations.degradation,
            ]
        })
        .filter(|a| a.status == AnnotationStatus::Unreconciled)
        .count();
    assert_eq!(flagged, 2);
}

#[test]
fn report_single_backend_mu_is_identity() {
    let rows = vec![
        ReportRow {
            method: "skyline".into(),
            training_data: "en-US".into(),
            test_dialect: "en-US".into(),
            backend_id: "tiny".into(),
            similarity: 80.0,
            accuracy: 60.0,
        },
        ReportRow {
            method: "in_dialect".into(),
            training_data: "en-IN".into(),
            test_dialect: "en-IN".into(),
            backend_id: "tiny".into(),
            similarity: 40.0,
            accuracy: 30.0,
        },
    ];
    let report = build_report(
        &rows,
        &GroupKey::new("skyline", "en-US", "en-US"),
        &[GroupKey::new("in_dialect", "en-IN", "en-IN")],
        &[],
    )
    .unwrap();
    let in_d = group(&report, "in_dialect", "en-IN");
    assert_eq!(in_d.mu_similarity, 40.0);
    assert_eq!(in_d.mu_accuracy, 30.0);
    assert_eq!(
        in_d.similarity_annotations.degradation.status,
        AnnotationStatus::Unpublished
    );
    assert!((in_d.similarity_annotations.degradation.computed.unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn report_missing_key_is_an_error() {
    let rows = table3_rows();
    let err = build_report(
        &rows,
        &GroupKey::new("skyline", "nope", "en-US"),
        &[],
        &[],
    )
    .unwrap_err();
    assert!(matches!(err, EvalError::MissingKey(k) if k.contains("nope")));

    let err = build_report(
        &rows,
        &GroupKey::new("skyline", "en-US", "en-US"),
        &[GroupKey::new("in_dialect", "en-IN", "en-IN")],
        &[],
    )
    .unwrap_err();
    // en-NG rows lack an in-dialect reference
    assert!(matches!(err, EvalError::MissingKey(k) if k.contains("en-NG")));
}
