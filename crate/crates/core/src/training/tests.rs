use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use crate::adapters::{AdapterConfig, AdapterKind, AdapterSet};
use crate::corpus::fixtures::overfit_corpus;
use crate::corpus::{
    build_parallel_pairs, mask_conversation, PairLabel, PromptTemplate, Split,
};
use crate::lm::{Backend, TinyDecoder, TinyDecoderConfig};

use super::*;

fn batch_of(ids: Vec<u32>, span: (usize, usize)) -> TrainBatch {
    TrainBatch::new(vec![BatchExample {
        id: "ex".into(),
        ids,
        span_start: span.0,
        span_end: span.1,
    }])
    .unwrap()
}

#[test]
fn uniform_logits_cost_is_span_times_log_vocab() {
    // |x| = 3, |t| = 2, vocab 4, all-zero logits
    let batch = batch_of(vec![0, 1, 2, 3, 1, 0], (4, 5));
    let logits = vec![Array2::<f64>::zeros((6, 4))];
    let loss = task_loss(&logits, &batch).unwrap();
    assert!((loss - 2.0 * 4f64.ln()).abs() < 1e-12, "loss {loss}");
}

#[test]
fn perfect_model_has_zero_loss() {
    let ids = vec![0u32, 1, 2, 3, 1, 0];
    let batch = batch_of(ids.clone(), (4, 6));
    // logit row i strongly favors ids[i+1]
    let mut logits = Array2::<f64>::zeros((6, 4));
    for i in 0..5 {
        logits[[i, ids[i + 1] as usize]] = 200.0;
    }
    let loss = task_loss(&[logits], &batch).unwrap();
    assert!(loss.abs() < 1e-9, "loss {loss}");
}

#[test]
fn loss_is_mean_over_examples() {
    let ex = BatchExample {
        id: "a".into(),
        ids: vec![0, 1, 2, 3, 1],
        span_start: 3,
        span_end: 4,
    };
    let one = TrainBatch::new(vec![ex.clone()]).unwrap();
    let two = TrainBatch::new(vec![ex.clone(), ex]).unwrap();
    let logits = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.25);
    let l1 = task_loss(std::slice::from_ref(&logits), &one).unwrap();
    let l2 = task_loss(&[logits.clone(), logits], &two).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
}

/// Independent oracle: per span position, materialize the softmax by direct
/// exponentiation and sum -ln p.
fn brute_force_task_loss(logits: &[Array2<f64>], batch: &TrainBatch) -> f64 {
    let mut total = 0.0;
    for (m, ex) in logits.iter().zip(batch.examples()) {
        for i in ex.span_start..=ex.span_end {
            let row = m.row(i - 2);
            let denom: f64 = row.iter().map(|&v| v.exp()).sum();
            let p = row[ex.ids[i - 1] as usize].exp() / denom;
            total -= p.ln();
        }
    }
    total / batch.n() as f64
}

#[test]
fn task_loss_matches_brute_force_oracle_on_random_instances() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    for _ in 0..50 {
        let vocab = rng.gen_range(4..=16usize);
        let x_len = rng.gen_range(1..=12usize);
        let t_len = rng.gen_range(1..=3usize);
        let len = x_len + t_len + 1;
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let batch = batch_of(ids, (x_len + 1, x_len + t_len));
        let logits =
            vec![Array2::from_shape_fn((len, vocab), |_| rng.gen_range(-4.0..4.0))];
        let got = task_loss(&logits, &batch).unwrap();
        let want = brute_force_task_loss(&logits, &batch);
        assert!((got - want).abs() < 1e-6, "got {got}, want {want}");
    }
}

#[test]
fn span_out_of_bounds_is_rejected() {
    let bad = BatchExample {
        id: "bad".into(),
        ids: vec![0, 1, 2],
        span_start: 3,
        span_end: 4,
    };
    assert!(matches!(
        TrainBatch::new(vec![bad]),
        Err(TrainError::SpanOutOfBounds { .. })
    ));
}

#[test]
fn dialect_loss_fixed_cases() {
    let u = Array1::from_vec(vec![0.3, -0.7, 0.2, 0.9]);
    // identical vectors, positive pair
    let loss = dialect_loss(u.view(), u.view(), PairLabel::Positive, 0.25).unwrap();
    assert!(loss.abs() < 1e-9);
    // orthogonal vectors, negative pair, margin 0.25
    let v = Array1::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
    let w = Array1::from_vec(vec![0.0, 1.0, 0.0, 0.0]);
    let loss = dialect_loss(v.view(), w.view(), PairLabel::Negative, 0.25).unwrap();
    assert!(loss.abs() < 1e-9);
    // sim 0.5, negative pair: max(0, 0.5 - 0.25)
    let a = Array1::from_vec(vec![1.0, 0.0]);
    let b = Array1::from_vec(vec![0.5, 3f64.sqrt() / 2.0]);
    let loss = dialect_loss(a.view(), b.view(), PairLabel::Negative, 0.25).unwrap();
    assert!((loss - 0.25).abs() < 1e-9, "loss {loss}");
}

#[test]
fn dialect_loss_rejects_zero_vectors_and_dim_mismatch() {
    let u = Array1::from_vec(vec![1.0, 2.0]);
    let z = Array1::from_vec(vec![0.0, 0.0]);
    assert!(matches!(
        dialect_loss(u.view(), z.view(), PairLabel::Positive, 0.25),
        Err(TrainError::ZeroVector)
    ));
    let short = Array1::from_vec(vec![1.0]);
    assert!(matches!(
        dialect_loss(u.view(), short.view(), PairLabel::Positive, 0.25),
        Err(TrainError::DimMismatch(2, 1))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    // scale invariance and the literal bounds: positives in [0,2], negatives
    // in [0, 1 - margin]
    #[test]
    fn dialect_loss_scale_invariant_and_bounded(
        u in proptest::collection::vec(-3.0f64..3.0, 6),
        v in proptest::collection::vec(-3.0f64..3.0, 6),
        c in 0.01f64..50.0,
        positive in proptest::bool::ANY,
    ) {
        let u = Array1::from_vec(u);
        let v = Array1::from_vec(v);
        prop_assume!(u.dot(&u) > 1e-6 && v.dot(&v) > 1e-6);
        let label = if positive { PairLabel::Positive } else { PairLabel::Negative };
        let margin = 0.25;
        let base = dialect_loss(u.view(), v.view(), label, margin).unwrap();
        let scaled = dialect_loss((c * &u).view(), v.view(), label, margin).unwrap();
        prop_assert!((base - scaled).abs() < 1e-6);
        let scaled = dialect_loss(u.view(), (c * &v).view(), label, margin).unwrap();
        prop_assert!((base - scaled).abs() < 1e-6);
        match label {
            PairLabel::Positive => prop_assert!((0.0..=2.0 + 1e-12).contains(&base)),
            PairLabel::Negative => prop_assert!((0.0..=1.0 - margin + 1e-12).contains(&base)),
        }
    }
}

#[test]
fn gradcheck_dialect_loss_at_smooth_points() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for trial in 0..3 {
        let u: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u_arr = Array1::from_vec(u.clone());
        let (_, grad) = dialect_loss_grad(
            u_arr.view(),
            Array1::from_vec(v.clone()).view(),
            PairLabel::Positive,
            0.25,
        )
        .unwrap();
        let f = move |point: &[f64]| {
            dialect_loss(
                u_arr.view(),
                Array1::from_vec(point.to_vec()).view(),
                PairLabel::Positive,
                0.25,
            )
            .unwrap()
        };
        let report = gradcheck(&f, &v, grad.as_slice().unwrap(), 1e-4, 64, trial).unwrap();
        assert!(report.skipped.is_empty());
        assert!(
            report.max_rel_error < 1e-4,
            "trial {trial}: rel error {}",
            report.max_rel_error
        );
    }
}

#[test]
fn gradcheck_task_loss_wrt_logits() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for trial in 0..3 {
        let ids = vec![0u32, 1, 2, 3, 1, 2];
        let batch = batch_of(ids, (3, 5));
        let flat: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits = Array2::from_shape_vec((6, 4), flat.clone()).unwrap();
        let (_, grads) = task_loss_grads(&[logits], &batch).unwrap();
        let analytic: Vec<f64> = grads[0].iter().copied().collect();
        let batch_ref = &batch;
        let f = move |point: &[f64]| {
            let m = Array2::from_shape_vec((6, 4), point.to_vec()).unwrap();
            task_loss(&[m], batch_ref).unwrap()
        };
        let report = gradcheck(&f, &flat, &analytic, 1e-4, 64, trial).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "trial {trial}: rel error {}",
            report.max_rel_error
        );
    }
}

#[test]
fn gradcheck_guard_skips_hinge_kink() {
    // engineer sim == margin exactly: u = e1, v at angle with cos = 0.25
    let u = Array1::from_vec(vec![1.0, 0.0]);
    let margin = 0.25f64;
    let v = vec![margin, (1.0 - margin * margin).sqrt()];
    let (_, grad) = dialect_loss_grad(
        u.view(),
        Array1::from_vec(v.clone()).view(),
        PairLabel::Negative,
        margin,
    )
    .unwrap();
    let f = move |point: &[f64]| {
        dialect_loss(
            u.view(),
            Array1::from_vec(point.to_vec()).view(),
            PairLabel::Negative,
            margin,
        )
        .unwrap()
    };
    let report = gradcheck(&f, &v, grad.as_slice().unwrap(), 1e-4, 64, 0).unwrap();
    assert!(
        !report.skipped.is_empty(),
        "kink guard should trigger at the hinge"
    );
}

fn overfit_decoder() -> TinyDecoder {
    TinyDecoder::new(TinyDecoderConfig {
        layers: 2,
        hidden_dim: 32,
        heads: 4,
        vocab_size: crate::lm::CharTokenizer::VOCAB_SIZE,
        context_len: 192,
        seed: 13,
    })
    .unwrap()
}

fn overfit_examples(decoder: &TinyDecoder) -> Vec<TrainExample> {
    let masked: Vec<_> = overfit_corpus()
        .iter()
        .map(|c| mask_conversation(c).unwrap())
        .collect();
    prepare_examples(&masked, &PromptTemplate::default(), decoder).unwrap()
}

#[test]
fn task_training_decreases_loss_and_freezes_dialect() {
    let mut decoder = overfit_decoder();
    let mut dialect = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig { rank: 4, ..AdapterConfig::default() },
        AdapterKind::Dialect,
        21,
    )
    .unwrap();
    dialect.set_trainable(false);
    let mut task = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig { rank: 4, ..AdapterConfig::default() },
        AdapterKind::Task,
        22,
    )
    .unwrap();
    task.set_trainable(true);
    decoder.stack_mut().install(dialect);
    decoder.stack_mut().install(task);
    let dialect_before = decoder.stack().dialect().unwrap().snapshot();
    let base_before = decoder.base_snapshot();

    let examples = overfit_examples(&decoder);
    let config = TaskTrainConfig {
        epochs: 5,
        batch_size: 4,
        learning_rate: 2e-3,
        seed: 13,
        ..TaskTrainConfig::default()
    };
    let report = train_task(&mut decoder, &examples, None, &config).unwrap();
    assert_eq!(report.epochs.len(), 5);
    for window in report.epochs.windows(2) {
        assert!(
            window[1].train_loss < window[0].train_loss,
            "loss should fall: {} -> {}",
            window[0].train_loss,
            window[1].train_loss
        );
    }
    // frozen things stay bitwise identical
    assert_eq!(decoder.stack().dialect().unwrap().snapshot(), dialect_before);
    assert_eq!(decoder.base_snapshot(), base_before);
}

#[test]
fn task_training_rejects_bad_setups() {
    let mut decoder = overfit_decoder();
    let examples = overfit_examples(&decoder);
    // no task set installed
    assert!(matches!(
        train_task(&mut decoder, &examples, None, &TaskTrainConfig::default()),
        Err(TrainError::MissingSet(AdapterKind::Task))
    ));
    // frozen task set
    let task = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig::default(),
        AdapterKind::Task,
        1,
    )
    .unwrap();
    decoder.stack_mut().install(task);
    assert!(matches!(
        train_task(&mut decoder, &examples, None, &TaskTrainConfig::default()),
        Err(TrainError::SetMustBeTrainable(AdapterKind::Task))
    ));
    decoder.stack_mut().task_mut().unwrap().set_trainable(true);
    // empty dataset
    assert!(matches!(
        train_task(&mut decoder, &[], None, &TaskTrainConfig::default()),
        Err(TrainError::EmptyDataset)
    ));
    // zero epochs rejected by the config invariant
    let bad = TaskTrainConfig { epochs: 0, ..TaskTrainConfig::default() };
    assert!(matches!(
        train_task(&mut decoder, &examples, None, &bad),
        Err(TrainError::Config(_))
    ));
}

fn overfit_pairs(decoder: &TinyDecoder, max_negatives: usize) -> Vec<PairExample> {
    let corpus = overfit_corpus();
    let us: Vec<_> = corpus
        .iter()
        .filter(|c| c.id.starts_with("en-US"))
        .map(|c| mask_conversation(c).unwrap())
        .collect();
    let xs: Vec<_> = corpus
        .iter()
        .filter(|c| c.id.starts_with("en-IN"))
        .map(|c| mask_conversation(c).unwrap())
        .collect();
    let pairs = build_parallel_pairs(&us, &xs, max_negatives, 13).unwrap();
    prepare_pairs(&pairs, &us, &xs, &PromptTemplate::default(), decoder).unwrap()
}

#[test]
fn dialect_training_decreases_loss_and_leaves_base_untouched() {
    let mut decoder = overfit_decoder();
    let mut dialect = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig { rank: 4, ..AdapterConfig::default() },
        AdapterKind::Dialect,
        31,
    )
    .unwrap();
    dialect.set_trainable(true);
    decoder.stack_mut().install(dialect);
    let base_before = decoder.base_snapshot();

    let pairs = overfit_pairs(&decoder, 4);
    assert_eq!(pairs.len(), 8);
    let positives = pairs.iter().filter(|p| p.label == PairLabel::Positive).count();
    assert_eq!(positives, 4);
    let config = DialectTrainConfig {
        epochs: 10,
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 13,
        ..DialectTrainConfig::default()
    };
    let report = train_dialect(&mut decoder, &pairs, None, &config).unwrap();
    assert_eq!(report.epochs.len(), 10);
    let first = report.epochs.first().unwrap().train_loss;
    let last = report.epochs.last().unwrap().train_loss;
    assert!(last < first, "dialect loss should fall: {first} -> {last}");
    assert_eq!(decoder.base_snapshot(), base_before);
}

#[test]
fn dialect_training_identity_pair_stays_at_zero_loss() {
    let mut decoder = overfit_decoder();
    let mut dialect = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig::default(),
        AdapterKind::Dialect,
        5,
    )
    .unwrap();
    dialect.set_trainable(true);
    decoder.stack_mut().install(dialect);
    let ids = decoder.tokenize("the answer is [MASK]").unwrap().ids().to_vec();
    let pair = PairExample {
        a_id: "same".into(),
        b_id: "same-b".into(),
        a_ids: ids.clone(),
        b_ids: ids,
        label: PairLabel::Positive,
    };
    let config = DialectTrainConfig { epochs: 3, ..DialectTrainConfig::default() };
    let report = train_dialect(&mut decoder, &[pair], None, &config).unwrap();
    for record in &report.epochs {
        assert!(record.train_loss.abs() < 1e-12, "loss {}", record.train_loss);
    }
}

#[test]
fn dialect_training_all_negatives_below_margin_is_a_no_op() {
    let mut decoder = overfit_decoder();
    let mut dialect = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig::default(),
        AdapterKind::Dialect,
        6,
    )
    .unwrap();
    dialect.set_trainable(true);
    decoder.stack_mut().install(dialect);
    // find two prompts whose frozen representations already sit below margin
    let a_ids = decoder.tokenize("alpha beta [MASK]").unwrap().ids().to_vec();
    let candidates = [
        "zzz qqq [MASK] xx",
        "1234 [MASK] 5678",
        "!!!! [MASK]",
        "a completely different one [MASK] yes",
    ];
    let margin = 0.25;
    let rep_a = decoder
        .mask_representation_selected(
            &crate::lm::TokenSequence::new(a_ids.clone()),
            crate::lm::ForwardSelection::BaseOnly,
        )
        .unwrap();
    let mut chosen = None;
    for c in candidates {
        let ids = decoder.tokenize(c).unwrap().ids().to_vec();
        let rep_b = decoder
            .mask_representation_selected(
                &crate::lm::TokenSequence::new(ids.clone()),
                crate::lm::ForwardSelection::BaseOnly,
            )
            .unwrap();
        let sim = rep_a.dot(&rep_b) / (rep_a.dot(&rep_a).sqrt() * rep_b.dot(&rep_b).sqrt());
        if sim <= margin {
            chosen = Some(ids);
            break;
        }
    }
    let b_ids = chosen.expect("some candidate sits below the margin");
    let before = decoder.stack().dialect().unwrap().snapshot();
    let pair = PairExample {
        a_id: "a".into(),
        b_id: "b".into(),
        a_ids,
        b_ids,
        label: PairLabel::Negative,
    };
    let config = DialectTrainConfig { epochs: 2, margin, ..DialectTrainConfig::default() };
    train_dialect(&mut decoder, &[pair], None, &config).unwrap();
    assert_eq!(decoder.stack().dialect().unwrap().snapshot(), before);
}

#[test]
fn dialect_training_rejects_active_task_set() {
    let mut decoder = overfit_decoder();
    let mut dialect = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig::default(),
        AdapterKind::Dialect,
        7,
    )
    .unwrap();
    dialect.set_trainable(true);
    let task = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig::default(),
        AdapterKind::Task,
        8,
    )
    .unwrap();
    decoder.stack_mut().install(dialect);
    decoder.stack_mut().install(task);
    let pairs = overfit_pairs(&decoder, 2);
    assert!(matches!(
        train_dialect(&mut decoder, &pairs, None, &DialectTrainConfig::default()),
        Err(TrainError::TaskSetActive)
    ));
}

#[test]
fn missing_pair_example_is_reported_by_id() {
    let decoder = overfit_decoder();
    let corpus = overfit_corpus();
    let us: Vec<_> = corpus
        .iter()
        .filter(|c| c.id.starts_with("en-US"))
        .map(|c| mask_conversation(c).unwrap())
        .collect();
    let pair = crate::corpus::ContrastivePair {
        a_id: "ghost".into(),
        b_id: us[0].source_id.clone(),
        label: PairLabel::Positive,
    };
    let err = prepare_pairs(&[pair], &us, &us, &PromptTemplate::default(), &decoder).unwrap_err();
    assert!(matches!(err, TrainError::MissingExample { id } if id == "ghost"));
}

#[test]
fn training_is_deterministic_in_the_seed() {
    let run = || {
        let mut decoder = overfit_decoder();
        let mut task = AdapterSet::init(
            decoder.descriptor(),
            &AdapterConfig { rank: 4, ..AdapterConfig::default() },
            AdapterKind::Task,
            3,
        )
        .unwrap();
        task.set_trainable(true);
        decoder.stack_mut().install(task);
        let examples = overfit_examples(&decoder);
        let config = TaskTrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 2e-3,
            seed: 99,
            ..TaskTrainConfig::default()
        };
        let report = train_task(&mut decoder, &examples, None, &config).unwrap();
        (decoder.stack().task().unwrap().snapshot(), report.best_epoch)
    };
    let (snap_a, best_a) = run();
    let (snap_b, best_b) = run();
    assert_eq!(snap_a, snap_b);
    assert_eq!(best_a, best_b);
}

#[test]
fn metrics_jsonl_has_one_record_per_epoch_and_split() {
    let report = TrainReport {
        epochs: vec![
            EpochRecord { epoch: 1, train_loss: 2.0, valid_loss: Some(2.1), wall_seconds: 0.5 },
            EpochRecord { epoch: 2, train_loss: 1.5, valid_loss: Some(1.7), wall_seconds: 0.4 },
        ],
        best_epoch: 2,
        best_loss: 1.7,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    write_metrics_jsonl(&path, &report).unwrap();
    let body = std::fs::read_to_string(&path).unwrap();
    let records: Vec<EpochMetric> = body
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 4);
    assert_eq!(records[0].split, "train");
    assert_eq!(records[1].split, "valid");
    assert_eq!(records[3].epoch, 2);
    let _ = Split::Train; // corpus split enum stays the authority for split tags
}
