//! Shared pipeline steps behind the train/eval/ablate commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use lordd_core::adapters::{
    load_adapter_set, save_adapter_set, AdapterConfig, AdapterKind, AdapterSet,
};
use lordd_core::corpus::{
    augment, load_masked, load_pairs, ContrastivePair, Dialect, MaskedExample, PromptTemplate,
    Split,
};
use lordd_core::evaluation::{
    accuracy, evaluate, similarity, write_predictions, EvalOptions, ReportRow,
    TrigramHashEmbedder,
};
use lordd_core::lm::{Backend, CharTokenizer, TinyDecoder, TinyDecoderConfig};
use lordd_core::training::{
    prepare_examples, prepare_pairs, train_dialect, train_task, write_metrics_jsonl,
    DialectTrainConfig, TaskTrainConfig, TrainReport,
};

use crate::config::ExperimentConfig;
use crate::manifest::config_digest;
use crate::usage;

pub fn build_decoder(config: &ExperimentConfig) -> Result<TinyDecoder> {
    let decoder = TinyDecoder::new(TinyDecoderConfig {
        layers: config.backend.layers,
        hidden_dim: config.backend.hidden_dim,
        heads: config.backend.heads,
        vocab_size: CharTokenizer::VOCAB_SIZE,
        context_len: config.backend.context_len,
        seed: config.backend.seed,
    })?;
    Ok(decoder)
}

pub fn adapter_config(config: &ExperimentConfig) -> AdapterConfig {
    AdapterConfig {
        rank: config.adapter.rank,
        alpha: config.adapter.alpha,
        init_std: config.adapter.init_std,
        ..AdapterConfig::default()
    }
}

pub fn masked_dir(out: &Path) -> PathBuf {
    out.join("masked")
}

pub fn masked_path(out: &Path, dialect: Dialect) -> PathBuf {
    masked_dir(out).join(format!("{}.masked.jsonl", dialect.tag()))
}

pub fn pairs_path(out: &Path) -> PathBuf {
    out.join("pairs.jsonl")
}

pub fn dialect_checkpoint_dir(out: &Path) -> PathBuf {
    out.join("dialect-checkpoint")
}

pub fn task_checkpoint_dir(out: &Path) -> PathBuf {
    out.join("task-checkpoint")
}

fn parse_split(tag: &str) -> Result<Option<Split>> {
    Ok(match tag {
        "all" => None,
        "train" => Some(Split::Train),
        "valid" => Some(Split::Valid),
        "test" => Some(Split::Test),
        other => return Err(usage(format!("unknown split {other:?}"))),
    })
}

/// Loads a masked pool, optionally filtered to one split.
pub fn load_masked_split(path: &Path, split_tag: &str) -> Result<Vec<MaskedExample>> {
    let wanted = parse_split(split_tag)?;
    let all = load_masked(path)
        .with_context(|| format!("loading masked examples from {}", path.display()))?;
    Ok(match wanted {
        None => all,
        Some(split) => all.into_iter().filter(|e| e.split == split).collect(),
    })
}

/// The task-training pool per the experiment's training_data spec, plus the
/// validation pool (the test dialect's valid split).
pub fn resolve_training_pool(
    config: &ExperimentConfig,
    out: &Path,
) -> Result<(Vec<MaskedExample>, Vec<MaskedExample>)> {
    let load = |dialect: Dialect, split: &str| -> Result<Vec<MaskedExample>> {
        let path = masked_path(out, dialect);
        if !path.exists() {
            return Err(usage(format!(
                "missing masked file {}; run `lordd prepare` first",
                path.display()
            )));
        }
        load_masked_split(&path, split)
    };
    let train = match config.training_data {
        crate::config::TrainingData::Single(dialect) => load(dialect, "train")?,
        crate::config::TrainingData::Augmented { source, focus } => {
            let source_pool = load(source, "train")?;
            let focus_pool = load(focus, "train")?;
            augment(&source_pool, &focus_pool, config.us_fraction, config.seed)?
        }
    };
    let valid = load(config.test_dialect, "valid").unwrap_or_default();
    Ok((train, valid))
}

/// Loads the contrastive pairs plus their two pools, honoring the frozen-side
/// setting: with `frozen_side = b` the corpus sides swap roles in the loss.
pub fn load_pair_training_data(
    config: &ExperimentConfig,
    out: &Path,
) -> Result<(Vec<ContrastivePair>, Vec<MaskedExample>, Vec<MaskedExample>)> {
    let (side_a, side_b) = config
        .parallel_corpus
        .ok_or_else(|| usage("this command needs experiment.parallel_corpus".to_string()))?;
    let path = pairs_path(out);
    if !path.exists() {
        return Err(usage(format!(
            "missing pairs file {}; run `lordd pairs` first",
            path.display()
        )));
    }
    let pairs = load_pairs(&path)?;
    let pool = |dialect: Dialect| -> Result<Vec<MaskedExample>> {
        let path = masked_path(out, dialect);
        if !path.exists() {
            return Err(usage(format!(
                "missing masked file {}; run `lordd prepare` first",
                path.display()
            )));
        }
        load_masked_split(&path, &config.pairs.split)
    };
    let a_pool = pool(side_a)?;
    let b_pool = pool(side_b)?;
    if config.pairs.frozen_side == "b" {
        let swapped = pairs
            .into_iter()
            .map(|p| ContrastivePair {
                a_id: p.b_id,
                b_id: p.a_id,
                label: p.label,
            })
            .collect();
        Ok((swapped, b_pool, a_pool))
    } else {
        Ok((pairs, a_pool, b_pool))
    }
}

fn checkpoint_extras(
    config: &ExperimentConfig,
    stack_order: &str,
    stage_digest: String,
    report: &TrainReport,
    optimizer_note: &str,
) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("stack_order".to_string(), stack_order.to_string()),
        ("training_config_digest".to_string(), stage_digest),
        ("optimizer".to_string(), optimizer_note.to_string()),
        ("best_epoch".to_string(), report.best_epoch.to_string()),
        ("best_loss".to_string(), format!("{:.6}", report.best_loss)),
        ("backend_id".to_string(), config.backend_id.clone()),
        ("seed".to_string(), config.seed.to_string()),
    ])
}

/// Dialect stage: inject a trainable dialect set, run contrastive training,
/// save the checkpoint with metrics. Returns the checkpoint directory.
pub fn run_dialect_stage(config: &ExperimentConfig, out: &Path) -> Result<(PathBuf, TrainReport)> {
    let mut decoder = build_decoder(config)?;
    let (pairs, frozen_pool, focus_pool) = load_pair_training_data(config, out)?;
    let template = PromptTemplate::default();
    let pair_examples = prepare_pairs(&pairs, &frozen_pool, &focus_pool, &template, &decoder)?;
    let mut set = AdapterSet::init(
        decoder.descriptor(),
        &adapter_config(config),
        AdapterKind::Dialect,
        config.dialect_train.seed,
    )?;
    set.set_trainable(true);
    decoder.stack_mut().install(set);
    let train_config = DialectTrainConfig {
        epochs: config.dialect_train.epochs,
        batch_size: config.dialect_train.batch_size,
        learning_rate: config.dialect_train.learning_rate,
        weight_decay: config.dialect_train.weight_decay,
        margin: config.dialect_train.margin,
        seed: config.dialect_train.seed,
    };
    let report = train_dialect(&mut decoder, &pair_examples, None, &train_config)?;
    let dir = dialect_checkpoint_dir(out);
    let extras = checkpoint_extras(
        config,
        "dialect",
        config_digest(&config.dialect_train),
        &report,
        "adamw",
    );
    save_adapter_set(&dir, decoder.stack().dialect().expect("trained"), &extras)?;
    write_metrics_jsonl(&dir.join("metrics.jsonl"), &report)?;
    Ok((dir, report))
}

/// Task stage: optionally mount a frozen dialect checkpoint, inject a
/// trainable task set, train on the resolved pool, save the checkpoint.
pub fn run_task_stage(
    config: &ExperimentConfig,
    out: &Path,
    dialect_checkpoint: Option<&Path>,
) -> Result<(PathBuf, TrainReport)> {
    let mut decoder = build_decoder(config)?;
    if config.method.uses_dialect_adapter() {
        let dir = dialect_checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| dialect_checkpoint_dir(out));
        if !dir.join("manifest.txt").exists() {
            return Err(usage(format!(
                "method {} needs a dialect checkpoint at {}; run `lordd train --stage dialect` first",
                config.method,
                dir.display()
            )));
        }
        let (set, _) = load_adapter_set(&dir, decoder.descriptor())?;
        decoder.stack_mut().install(set);
    }
    let (train_pool, valid_pool) = resolve_training_pool(config, out)?;
    let template = PromptTemplate::default();
    let train_examples = prepare_examples(&train_pool, &template, &decoder)?;
    let valid_examples = prepare_examples(&valid_pool, &template, &decoder)?;
    let mut set = AdapterSet::init(
        decoder.descriptor(),
        &adapter_config(config),
        AdapterKind::Task,
        config.task_train.seed.wrapping_add(1),
    )?;
    set.set_trainable(true);
    decoder.stack_mut().install(set);
    let train_config = TaskTrainConfig {
        epochs: config.task_train.epochs,
        batch_size: config.task_train.batch_size,
        learning_rate: config.task_train.learning_rate,
        weight_decay: config.task_train.weight_decay,
        seed: config.task_train.seed,
        ..TaskTrainConfig::default()
    };
    let valid = (!valid_examples.is_empty()).then_some(valid_examples.as_slice());
    let report = train_task(&mut decoder, &train_examples, valid, &train_config)?;
    let dir = task_checkpoint_dir(out);
    let stack_order = if config.method.uses_dialect_adapter() {
        "dialect,task"
    } else {
        "task"
    };
    let extras = checkpoint_extras(
        config,
        stack_order,
        config_digest(&config.task_train),
        &report,
        "adamw (substituted for adamw-paged-8bit)",
    );
    save_adapter_set(&dir, decoder.stack().task().expect("trained"), &extras)?;
    write_metrics_jsonl(&dir.join("metrics.jsonl"), &report)?;
    Ok((dir, report))
}

pub struct EvalArtifacts {
    pub predictions_path: PathBuf,
    pub row_path: PathBuf,
    pub row: ReportRow,
    pub examples: usize,
}

/// Loads checkpoints, runs TWP over the configured split of the test dialect
/// and writes predictions.jsonl plus the aggregated row.
pub fn run_eval(
    config: &ExperimentConfig,
    out: &Path,
    task_checkpoint: Option<&Path>,
    dialect_checkpoint: Option<&Path>,
) -> Result<EvalArtifacts> {
    let mut decoder = build_decoder(config)?;
    let task_dir = task_checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| task_checkpoint_dir(out));
    if !task_dir.join("manifest.txt").exists() {
        return Err(usage(format!(
            "missing task checkpoint at {}; run `lordd train --stage task` first",
            task_dir.display()
        )));
    }
    if config.method.uses_dialect_adapter() {
        let dir = dialect_checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| dialect_checkpoint_dir(out));
        if !dir.join("manifest.txt").exists() {
            return Err(usage(format!(
                "method {} needs a dialect checkpoint at {}",
                config.method,
                dir.display()
            )));
        }
        let (set, _) = load_adapter_set(&dir, decoder.descriptor())?;
        decoder.stack_mut().install(set);
    }
    let (set, _) = load_adapter_set(&task_dir, decoder.descriptor())?;
    decoder.stack_mut().install(set);

    let test_path = masked_path(out, config.test_dialect);
    if !test_path.exists() {
        return Err(usage(format!(
            "missing masked file {}; run `lordd prepare` first",
            test_path.display()
        )));
    }
    let examples = load_masked_split(&test_path, &config.eval.split)?;
    let template = PromptTemplate::default();
    let embedder = TrigramHashEmbedder::default();
    let options = EvalOptions {
        max_new: config.eval.max_new,
        ..EvalOptions::default()
    };
    let results = evaluate(&decoder, &examples, &template, &embedder, &options)?;
    let predictions_path = out.join("predictions.jsonl");
    write_predictions(&predictions_path, &results)?;
    let row = ReportRow {
        method: config.method.tag().to_string(),
        training_data: config.training_data.label(),
        test_dialect: config.test_dialect.tag().to_string(),
        backend_id: config.backend_id.clone(),
        similarity: similarity(&results, &embedder, true)?,
        accuracy: accuracy(&results)?,
    };
    let row_path = out.join("row.json");
    std::fs::write(&row_path, serde_json::to_string_pretty(&row)? + "\n")?;
    Ok(EvalArtifacts {
        predictions_path,
        row_path,
        row,
        examples: results.len(),
    })
}
