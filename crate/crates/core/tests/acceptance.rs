//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantity (visible with `-- --nocapture`).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lordd_core::adapters::{
    save_adapter_set, AdapterConfig, AdapterKind, AdapterSet, AdapterStack,
};
use lordd_core::corpus::fixtures::{
    generate_corpus, overfit_corpus, table2_pools, table6_fisherman, table6_planet,
};
use lordd_core::corpus::{
    build_parallel_pairs, mask_conversation, normalize_target, MaskedExample, PairLabel,
    PromptTemplate, Speaker, Split, MASK_TOKEN,
};
use lordd_core::evaluation::{
    accuracy, build_report, evaluate, similarity, write_predictions,
    Annotation, AnnotationKind, AnnotationStatus, EvalOptions, EvalReport, GroupKey, Metric,
    PublishedAnnotation, ReportRow, TrigramHashEmbedder,
};
use lordd_core::lm::{
    Backend, CharTokenizer, TinyDecoder, TinyDecoderConfig, TokenSequence,
};
use lordd_core::training::{
    dialect_loss, dialect_loss_grad, gradcheck, prepare_examples, prepare_pairs, task_loss,
    task_loss_grads, train_dialect, train_task, BatchExample, DialectTrainConfig, TrainBatch,
    TaskTrainConfig,
};

fn tiny_decoder(seed: u64) -> TinyDecoder {
    TinyDecoder::new(TinyDecoderConfig {
        layers: 2,
        hidden_dim: 32,
        heads: 4,
        vocab_size: CharTokenizer::VOCAB_SIZE,
        context_len: 64,
        seed,
    })
    .unwrap()
}

#[test]
fn c01_lora_identity_at_init() {
    let started = Instant::now();
    let mut decoder = tiny_decoder(13);
    let inputs: Vec<TokenSequence> = (0..8)
        .map(|i| TokenSequence::new(vec![(3 + i) as u32, 40, 9, (20 + 2 * i) as u32, 7]))
        .collect();
    let baseline: Vec<Array2<f64>> = inputs
        .iter()
        .map(|t| decoder.forward(t).unwrap().logits)
        .collect();
    let dialect = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig::default(),
        AdapterKind::Dialect,
        101,
    )
    .unwrap();
    let task = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig::default(),
        AdapterKind::Task,
        102,
    )
    .unwrap();
    decoder.set_stack(AdapterStack::stack(dialect, task).unwrap());
    let mut max_diff = 0.0f64;
    for (tokens, before) in inputs.iter().zip(&baseline) {
        let after = decoder.forward(tokens).unwrap().logits;
        for (a, b) in after.iter().zip(before.iter()) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(max_diff < 1e-6, "max abs logit diff {max_diff}");
    assert!(elapsed < 5.0, "took {elapsed:.2}s, budget 5s");
    println!(
        "ACCEPTANCE 1 PASS: identity at init, max |logit diff| = {max_diff:.2e} in {elapsed:.2}s"
    );
}

/// Independent oracle: enumerate target positions and sum -log softmax terms
/// with direct exponentiation.
fn oracle_task_loss(logits: &[Array2<f64>], batch: &TrainBatch) -> f64 {
    let mut total = 0.0;
    for (m, ex) in logits.iter().zip(batch.examples()) {
        for i in ex.span_start..=ex.span_end {
            let row = m.row(i - 2);
            let denom: f64 = row.iter().map(|&v| v.exp()).sum();
            total -= (row[ex.ids[i - 1] as usize].exp() / denom).ln();
        }
    }
    total / batch.n() as f64
}

#[test]
fn c02_task_loss_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let vocab = rng.gen_range(4..=16usize);
        let x_len = rng.gen_range(1..=12usize);
        let t_len = rng.gen_range(1..=3usize);
        let len = x_len + t_len + 1;
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let batch = TrainBatch::new(vec![BatchExample {
            id: "oracle".into(),
            ids,
            span_start: x_len + 1,
            span_end: x_len + t_len,
        }])
        .unwrap();
        let logits = vec![Array2::from_shape_fn((len, vocab), |_| {
            rng.gen_range(-4.0..4.0)
        })];
        let got = task_loss(&logits, &batch).unwrap();
        let want = oracle_task_loss(&logits, &batch);
        worst = worst.max((got - want).abs());
    }
    assert!(worst < 1e-6, "worst |loss - oracle| = {worst}");

    // uniform logits: loss is exactly |t| * ln(vocab)
    let batch = TrainBatch::new(vec![BatchExample {
        id: "uniform".into(),
        ids: vec![0, 1, 2, 3, 1, 0],
        span_start: 4,
        span_end: 5,
    }])
    .unwrap();
    let logits = vec![Array2::<f64>::zeros((6, 4))];
    let got = task_loss(&logits, &batch).unwrap();
    let uniform_diff = (got - 2.0 * 4f64.ln()).abs();
    assert!(uniform_diff < 1e-6, "uniform case off by {uniform_diff}");
    println!(
        "ACCEPTANCE 2 PASS: task loss matches oracle on 50 instances (worst {worst:.2e}), uniform case off by {uniform_diff:.2e}"
    );
}

#[test]
fn c03_dialect_loss_table_and_scale_invariance() {
    let u = Array1::from_vec(vec![0.4, -0.1, 0.8, 0.2]);
    let identical = dialect_loss(u.view(), u.view(), PairLabel::Positive, 0.25).unwrap();
    assert!(identical.abs() < 1e-9, "identical positives: {identical}");

    let e1 = Array1::from_vec(vec![1.0, 0.0]);
    let e2 = Array1::from_vec(vec![0.0, 1.0]);
    let orthogonal = dialect_loss(e1.view(), e2.view(), PairLabel::Negative, 0.25).unwrap();
    assert!(orthogonal.abs() < 1e-9, "orthogonal negatives: {orthogonal}");

    let half = Array1::from_vec(vec![0.5, 3f64.sqrt() / 2.0]);
    let hinge = dialect_loss(e1.view(), half.view(), PairLabel::Negative, 0.25).unwrap();
    assert!((hinge - 0.25).abs() < 1e-9, "sim 0.5 negatives: {hinge}");

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let dim = rng.gen_range(2..16usize);
        let a: Array1<f64> = Array1::from_shape_fn(dim, |_| rng.gen_range(-2.0..2.0));
        let b: Array1<f64> = Array1::from_shape_fn(dim, |_| rng.gen_range(-2.0..2.0));
        if a.dot(&a) < 1e-6 || b.dot(&b) < 1e-6 {
            continue;
        }
        let c: f64 = rng.gen_range(0.01..40.0);
        let label = if k % 2 == 0 {
            PairLabel::Positive
        } else {
            PairLabel::Negative
        };
        let base = dialect_loss(a.view(), b.view(), label, 0.25).unwrap();
        let left = dialect_loss((c * &a).view(), b.view(), label, 0.25).unwrap();
        let right = dialect_loss(a.view(), (c * &b).view(), label, 0.25).unwrap();
        worst = worst.max((base - left).abs()).max((base - right).abs());
    }
    assert!(worst < 1e-6, "scale invariance violated by {worst}");
    println!(
        "ACCEPTANCE 3 PASS: dialect-loss table holds to 1e-9, scale invariance to {worst:.2e}"
    );
}

#[test]
fn c04_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_dialect = 0.0f64;
    for trial in 0..3 {
        let u: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u_arr = Array1::from_vec(u);
        let label = if trial % 2 == 0 {
            PairLabel::Positive
        } else {
            PairLabel::Negative
        };
        let (_, grad) = dialect_loss_grad(
            u_arr.view(),
            Array1::from_vec(v.clone()).view(),
            label,
            0.25,
        )
        .unwrap();
        let f = |point: &[f64]| {
            dialect_loss(
                u_arr.view(),
                Array1::from_vec(point.to_vec()).view(),
                label,
                0.25,
            )
            .unwrap()
        };
        let report = gradcheck(&f, &v, grad.as_slice().unwrap(), 1e-4, 64, trial as u64).unwrap();
        worst_dialect = worst_dialect.max(report.max_rel_error);
    }
    assert!(worst_dialect < 1e-4, "dialect loss rel error {worst_dialect}");

    let mut worst_task = 0.0f64;
    for trial in 0..3 {
        let vocab = 4 + trial;
        let len = 6;
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let batch = TrainBatch::new(vec![BatchExample {
            id: "gc".into(),
            ids,
            span_start: 3,
            span_end: 5,
        }])
        .unwrap();
        let flat: Vec<f64> = (0..len * vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits = Array2::from_shape_vec((len, vocab), flat.clone()).unwrap();
        let (_, grads) = task_loss_grads(&[logits], &batch).unwrap();
        let analytic: Vec<f64> = grads[0].iter().copied().collect();
        let f = |point: &[f64]| {
            let m = Array2::from_shape_vec((len, vocab), point.to_vec()).unwrap();
            task_loss(&[m], &batch).unwrap()
        };
        let report = gradcheck(&f, &flat, &analytic, 1e-4, 64, trial as u64).unwrap();
        worst_task = worst_task.max(report.max_rel_error);
    }
    assert!(worst_task < 1e-4, "task loss rel error {worst_task}");
    println!(
        "ACCEPTANCE 4 PASS: gradient checks, dialect rel err {worst_dialect:.2e}, task rel err {worst_task:.2e}"
    );
}

#[test]
fn c05_stacking_and_merge_equivalence() {
    let started = Instant::now();
    // 2x2 layer, rank 1, hand-computed composition
    let w0 = array![[0.5, -0.25], [0.75, 1.0]];
    let x = array![[0.4, -1.2], [2.0, 0.3]];
    let (a_d, b_d, s_d) = (array![[0.3, -0.2]], array![[0.9], [-0.4]], 2.0);
    let (a_t, b_t, s_t) = (array![[-0.6, 0.1]], array![[0.2], [0.7]], 2.0);
    let got = x.dot(&w0.t())
        + s_d * x.dot(&a_d.t()).dot(&b_d.t())
        + s_t * x.dot(&a_t.t()).dot(&b_t.t());
    let mut worst = 0.0f64;
    for r in 0..2 {
        for o in 0..2 {
            let mut want = 0.0;
            for i in 0..2 {
                want += w0[[o, i]] * x[[r, i]];
            }
            let adx: f64 = (0..2).map(|i| a_d[[0, i]] * x[[r, i]]).sum();
            let atx: f64 = (0..2).map(|i| a_t[[0, i]] * x[[r, i]]).sum();
            want += s_d * b_d[[o, 0]] * adx + s_t * b_t[[o, 0]] * atx;
            worst = worst.max((got[[r, o]] - want).abs());
        }
    }
    assert!(worst < 1e-6, "hand-computed stack off by {worst}");

    // merged backend matches the adapted one on 16 random inputs
    let mut decoder = tiny_decoder(55);
    let mut dialect = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig { rank: 4, ..AdapterConfig::default() },
        AdapterKind::Dialect,
        501,
    )
    .unwrap();
    let mut task = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig { rank: 4, ..AdapterConfig::default() },
        AdapterKind::Task,
        502,
    )
    .unwrap();
    for set in [&mut dialect, &mut task] {
        for (i, (_, adapter)) in set.entries_mut().iter_mut().enumerate() {
            adapter.b_mut().mapv_inplace(|_| 0.04 * ((i % 4) as f64 + 1.0));
        }
    }
    decoder.set_stack(AdapterStack::stack(dialect, task).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let inputs: Vec<TokenSequence> = (0..16)
        .map(|_| {
            let len = rng.gen_range(4..32usize);
            TokenSequence::new(
                (0..len)
                    .map(|_| rng.gen_range(0..CharTokenizer::VOCAB_SIZE as u32))
                    .collect(),
            )
        })
        .collect();
    let adapted: Vec<Array2<f64>> = inputs
        .iter()
        .map(|t| decoder.forward(t).unwrap().logits)
        .collect();
    decoder.merge_adapters();
    let mut max_diff = 0.0f64;
    for (tokens, before) in inputs.iter().zip(&adapted) {
        let after = decoder.forward(tokens).unwrap().logits;
        for (a, b) in after.iter().zip(before.iter()) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(max_diff < 1e-5, "merged vs adapted max diff {max_diff}");
    assert!(elapsed < 10.0, "took {elapsed:.2}s, budget 10s");
    println!(
        "ACCEPTANCE 5 PASS: stack matches hand computation ({worst:.2e}), merge matches adapted ({max_diff:.2e}) in {elapsed:.2}s"
    );
}

fn overfit_masked() -> (Vec<MaskedExample>, Vec<MaskedExample>) {
    let corpus = overfit_corpus();
    let us = corpus
        .iter()
        .filter(|c| c.id.starts_with("en-US"))
        .map(|c| mask_conversation(c).unwrap())
        .collect();
    let xs = corpus
        .iter()
        .filter(|c| c.id.starts_with("en-IN"))
        .map(|c| mask_conversation(c).unwrap())
        .collect();
    (us, xs)
}

#[test]
fn c06_freeze_soundness() {
    let mut decoder = TinyDecoder::new(TinyDecoderConfig {
        layers: 2,
        hidden_dim: 32,
        heads: 4,
        vocab_size: CharTokenizer::VOCAB_SIZE,
        context_len: 192,
        seed: 13,
    })
    .unwrap();
    let (us, xs) = overfit_masked();
    let template = PromptTemplate::default();

    // dialect training leaves base weights bitwise unchanged
    let mut dialect = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig { rank: 4, ..AdapterConfig::default() },
        AdapterKind::Dialect,
        601,
    )
    .unwrap();
    dialect.set_trainable(true);
    decoder.stack_mut().install(dialect);
    let base_before = decoder.base_snapshot();
    let pairs = build_parallel_pairs(&us, &xs, 4, 13).unwrap();
    let pair_examples = prepare_pairs(&pairs, &us, &xs, &template, &decoder).unwrap();
    let dialect_config = DialectTrainConfig {
        epochs: 3,
        learning_rate: 1e-3,
        ..DialectTrainConfig::default()
    };
    train_dialect(&mut decoder, &pair_examples, None, &dialect_config).unwrap();
    assert_eq!(decoder.base_snapshot(), base_before, "base weights moved");

    // task training leaves the frozen dialect set bitwise unchanged
    decoder.stack_mut().dialect_mut().unwrap().set_trainable(false);
    let dialect_before = decoder.stack().dialect().unwrap().snapshot();
    let mut task = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig { rank: 4, ..AdapterConfig::default() },
        AdapterKind::Task,
        602,
    )
    .unwrap();
    task.set_trainable(true);
    decoder.stack_mut().install(task);
    let all: Vec<MaskedExample> = us.iter().chain(xs.iter()).cloned().collect();
    let examples = prepare_examples(&all, &template, &decoder).unwrap();
    let task_config = TaskTrainConfig {
        epochs: 3,
        batch_size: 4,
        learning_rate: 2e-3,
        ..TaskTrainConfig::default()
    };
    train_task(&mut decoder, &examples, None, &task_config).unwrap();
    assert_eq!(
        decoder.stack().dialect().unwrap().snapshot(),
        dialect_before,
        "frozen dialect set moved"
    );
    assert_eq!(decoder.base_snapshot(), base_before, "base weights moved");
    println!("ACCEPTANCE 6 PASS: frozen dialect set and base weights bitwise unchanged");
}

/// The full desk-scale pipeline of criterion 7: pairs -> dialect stage ->
/// task stage -> eval, writing checkpoints and reports under `dir`.
/// Returns the train-split accuracy.
fn run_overfit_pipeline(dir: &Path, task_epochs: usize, seed: u64) -> f64 {
    let mut decoder = TinyDecoder::new(TinyDecoderConfig {
        layers: 2,
        hidden_dim: 64,
        heads: 4,
        vocab_size: CharTokenizer::VOCAB_SIZE,
        context_len: 192,
        seed,
    })
    .unwrap();
    let template = PromptTemplate::default();
    let (us, xs) = overfit_masked();

    // stage 1: pseudo-parallel pairs and the dialect adapter
    let pairs = build_parallel_pairs(&us, &xs, 4, seed).unwrap();
    let pair_examples = prepare_pairs(&pairs, &us, &xs, &template, &decoder).unwrap();
    let mut dialect = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig::default(),
        AdapterKind::Dialect,
        seed,
    )
    .unwrap();
    dialect.set_trainable(true);
    decoder.stack_mut().install(dialect);
    let dialect_config = DialectTrainConfig {
        epochs: 10,
        batch_size: 8,
        learning_rate: 1e-3,
        seed,
        ..DialectTrainConfig::default()
    };
    train_dialect(&mut decoder, &pair_examples, None, &dialect_config).unwrap();
    let extras = BTreeMap::from([
        ("stack_order".to_string(), "dialect".to_string()),
        ("seed".to_string(), seed.to_string()),
    ]);
    save_adapter_set(
        &dir.join("dialect-checkpoint"),
        decoder.stack().dialect().unwrap(),
        &extras,
    )
    .unwrap();

    // stage 2: task adapter on the augmented set with the dialect set frozen
    decoder.stack_mut().dialect_mut().unwrap().set_trainable(false);
    let mut task = AdapterSet::init(
        decoder.descriptor(),
        &AdapterConfig::default(),
        AdapterKind::Task,
        seed + 1,
    )
    .unwrap();
    task.set_trainable(true);
    decoder.stack_mut().install(task);
    let all: Vec<MaskedExample> = us.iter().chain(xs.iter()).cloned().collect();
    let examples = prepare_examples(&all, &template, &decoder).unwrap();
    let task_config = TaskTrainConfig {
        epochs: task_epochs,
        batch_size: 8,
        learning_rate: 3e-3,
        seed,
        ..TaskTrainConfig::default()
    };
    train_task(&mut decoder, &examples, None, &task_config).unwrap();
    let extras = BTreeMap::from([
        ("stack_order".to_string(), "dialect,task".to_string()),
        ("seed".to_string(), seed.to_string()),
    ]);
    save_adapter_set(
        &dir.join("task-checkpoint"),
        decoder.stack().task().unwrap(),
        &extras,
    )
    .unwrap();

    // stage 3: TWP evaluation on the train split
    let embedder = TrigramHashEmbedder::default();
    let results = evaluate(&decoder, &all, &template, &embedder, &EvalOptions::default()).unwrap();
    write_predictions(&dir.join("predictions.jsonl"), &results).unwrap();
    let acc = accuracy(&results).unwrap();
    let sim = similarity(&results, &embedder, true).unwrap();
    let row = ReportRow {
        method: "lordd".into(),
        training_data: "en-US + en-IN".into(),
        test_dialect: "en-IN".into(),
        backend_id: "tiny-64x2".into(),
        similarity: sim,
        accuracy: acc,
    };
    std::fs::write(
        dir.join("row.json"),
        serde_json::to_string_pretty(&row).unwrap(),
    )
    .unwrap();
    acc
}

#[test]
fn c07_end_to_end_overfit_smoke() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let acc = run_overfit_pipeline(dir.path(), 200, 13);
    let elapsed = started.elapsed().as_secs_f64();
    assert!(acc >= 90.0, "train accuracy {acc}");
    assert!(elapsed < 300.0, "took {elapsed:.1}s, budget 300s");
    println!(
        "ACCEPTANCE 7 PASS: overfit pipeline reaches {acc:.1}% train accuracy in {elapsed:.1}s (200 epochs)"
    );
}

#[test]
fn c08_masking_fidelity() {
    let fisherman = mask_conversation(&table6_fisherman()).unwrap();
    assert_eq!(fisherman.masked_turns.len(), 4);
    assert_eq!(fisherman.masked_turns[0].speaker, Speaker::Describer);
    assert_eq!(
        fisherman.masked_turns[0].text,
        "Uh. What do you call if we, what will be there in the water?"
    );
    assert_eq!(fisherman.masked_turns[1].text, "Fishes");
    assert_eq!(fisherman.masked_turns[2].text, "Who will catch that?");
    let last = fisherman.masked_turns.last().unwrap();
    assert_eq!((last.speaker, last.text.as_str()), (Speaker::Guesser, MASK_TOKEN));

    let planet = mask_conversation(&table6_planet()).unwrap();
    assert_eq!(planet.masked_turns.len(), 2, "trailing turn must be pruned");
    let last = planet.masked_turns.last().unwrap();
    assert_eq!((last.speaker, last.text.as_str()), (Speaker::Guesser, MASK_TOKEN));
    assert!(planet.masked_turns.iter().all(|t| t.text != "Yes."));
    println!("ACCEPTANCE 8 PASS: both published masking examples reproduce exactly");
}

#[test]
fn c09_pair_builder_soundness() {
    let corpus = generate_corpus();
    let masked_train = |dialect| -> Vec<MaskedExample> {
        corpus[&dialect]
            .iter()
            .filter(|c| c.split == Split::Train)
            .map(|c| mask_conversation(c).unwrap())
            .collect()
    };
    let mut checked_pairs = 0;
    for (da, db, want_pos, cap) in table2_pools() {
        let a = masked_train(da);
        let b = masked_train(db);
        let pairs = build_parallel_pairs(&a, &b, cap, 13).unwrap();
        // exhaustive same-target count over the full cross product
        let mut exhaustive = 0;
        for ea in &a {
            for eb in &b {
                if normalize_target(&ea.target_word) == normalize_target(&eb.target_word) {
                    exhaustive += 1;
                }
            }
        }
        let positives = pairs.iter().filter(|p| p.label == PairLabel::Positive).count();
        assert_eq!(positives, exhaustive, "{da} || {db} positives");
        assert_eq!(positives, want_pos, "{da} || {db} expected positives");
        // no mislabeled pair under exhaustive check
        let find = |pool: &[MaskedExample], id: &str| -> String {
            normalize_target(
                &pool
                    .iter()
                    .find(|e| e.source_id == id)
                    .expect("pair id resolves")
                    .target_word,
            )
        };
        for pair in &pairs {
            let same = find(&a, &pair.a_id) == find(&b, &pair.b_id);
            assert_eq!(
                pair.label == PairLabel::Positive,
                same,
                "mislabeled pair {} / {}",
                pair.a_id,
                pair.b_id
            );
        }
        checked_pairs += pairs.len();
    }
    println!("ACCEPTANCE 9 PASS: pair pools sound, {checked_pairs} pairs exhaustively checked");
}

fn table3_rows() -> Vec<ReportRow> {
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

fn published(
    method: &str,
    data: &str,
    dialect: &str,
    metric: Metric,
    kind: AnnotationKind,
    value: f64,
) -> PublishedAnnotation {
    PublishedAnnotation {
        method: method.into(),
        training_data: data.into(),
        test_dialect: dialect.into(),
        metric,
        kind,
        value,
    }
}

#[test]
fn c10_report_arithmetic() {
    use AnnotationKind::{Degradation, Improvement};
    use Metric::{Accuracy, Similarity};
    // the ten reconcilable published annotations plus the two that are not
    let published_values = vec![
        published("in_dialect", "en-IN", "en-IN", Similarity, Degradation, 27.3),
        published("in_dialect", "en-IN", "en-IN", Accuracy, Degradation, 64.7),
        published("lordd", "en-US + en-IN", "en-IN", Similarity, Improvement, 13.4),
        published("lordd", "en-US + en-IN", "en-IN", Similarity, Degradation, 12.0),
        published("lordd", "en-US + en-IN", "en-IN", Accuracy, Degradation, 25.0),
        published("lordd", "en-US + en-IN", "en-IN", Accuracy, Improvement, 28.1),
        published("in_dialect", "en-NG", "en-NG", Similarity, Degradation, 17.9),
        published("in_dialect", "en-NG", "en-NG", Accuracy, Degradation, 43.1),
        published("lordd", "en-US + en-NG", "en-NG", Similarity, Improvement, 11.4),
        published("lordd", "en-US + en-NG", "en-NG", Similarity, Degradation, 5.8),
        published("lordd", "en-US + en-NG", "en-NG", Accuracy, Improvement, 33.8),
        published("lordd", "en-US + en-NG", "en-NG", Accuracy, Degradation, 4.5),
    ];
    let report = build_report(
        &table3_rows(),
        &GroupKey::new("skyline", "en-US", "en-US"),
        &[
            GroupKey::new("in_dialect", "en-IN", "en-IN"),
            GroupKey::new("in_dialect", "en-NG", "en-NG"),
        ],
        &published_values,
    )
    .unwrap();

    let annotations = collect_annotations(&report);
    let mut reconciled = 0;
    let mut unreconciled = Vec::new();
    for (label, annotation) in &annotations {
        match annotation.status {
            AnnotationStatus::Reconciled => {
                let p = annotation.published.unwrap();
                let c = annotation.computed.unwrap();
                assert!(
                    (c - p).abs() <= 1.0,
                    "{label:?}: computed {c} vs published {p}"
                );
                reconciled += 1;
            }
            AnnotationStatus::Unreconciled => {
                unreconciled.push((label, annotation.published.unwrap()));
            }
            AnnotationStatus::Unpublished | AnnotationStatus::Undefined => {}
        }
    }
    assert_eq!(reconciled, 10, "ten published annotations reconcile");
    let mut bad: Vec<f64> = unreconciled.iter().map(|(_, p)| *p).collect();
    bad.sort_by(f64::total_cmp);
    assert_eq!(bad, vec![4.5, 28.1], "exactly the two known outliers flagged");
    println!(
        "ACCEPTANCE 10 PASS: 10 annotations reconcile within ±1.0; 28.1 and 4.5 flagged UNRECONCILED"
    );
}

type AnnotationLabel = (String, String, Metric, AnnotationKind);

fn collect_annotations(report: &EvalReport) -> Vec<(AnnotationLabel, Annotation)> {
    let mut out = Vec::new();
    for group in &report.groups {
        for (metric, annotations) in [
            (Metric::Similarity, &group.similarity_annotations),
            (Metric::Accuracy, &group.accuracy_annotations),
        ] {
            for (kind, annotation) in [
                (AnnotationKind::Improvement, &annotations.improvement),
                (AnnotationKind::Degradation, &annotations.degradation),
            ] {
                let label = (
                    group.method.clone(),
                    group.test_dialect.clone(),
                    metric,
                    kind,
                );
                out.push((label, annotation.clone()));
            }
        }
    }
    out
}

#[test]
fn c11_determinism_of_pipeline_outputs() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let acc_a = run_overfit_pipeline(dir_a.path(), 200, 13);
    let acc_b = run_overfit_pipeline(dir_b.path(), 200, 13);
    assert_eq!(acc_a, acc_b);
    let mut compared = 0;
    for rel in [
        "dialect-checkpoint",
        "task-checkpoint",
    ] {
        let left = dir_a.path().join(rel);
        for entry in std::fs::read_dir(&left).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(left.join(&name)).unwrap();
            let b = std::fs::read(dir_b.path().join(rel).join(&name)).unwrap();
            assert_eq!(a, b, "checkpoint file {rel}/{name:?} differs between runs");
            compared += 1;
        }
    }
    for rel in ["predictions.jsonl", "row.json"] {
        let a = std::fs::read(dir_a.path().join(rel)).unwrap();
        let b = std::fs::read(dir_b.path().join(rel)).unwrap();
        assert_eq!(a, b, "report file {rel} differs between runs");
        compared += 1;
    }
    println!(
        "ACCEPTANCE 11 PASS: {compared} checkpoint/report files byte-identical across reruns"
    );
}
