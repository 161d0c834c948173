//! The lordd subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use lordd_core::corpus::{
    build_parallel_pairs, fixtures, load_conversations_lenient, mask_conversation, save_pairs,
    Dialect, MaskedExample, SplitCounts,
};
use lordd_core::evaluation::{
    build_report, render_text, GroupKey, PublishedAnnotation, ReportRow,
};

use crate::config::{ExperimentConfig, KeyValueFile};
use crate::manifest::{manifest_path, RunManifest};
use crate::pipeline;
use crate::usage;

pub fn cmd_fixture(out: &Path) -> Result<()> {
    let written = fixtures::write_fixture_files(out)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    println!("{} fixture files under {}", written.len(), out.display());
    Ok(())
}

fn split_counts_of(examples: &[MaskedExample]) -> SplitCounts {
    lordd_core::corpus::split_counts(examples.iter().map(|e| &e.split))
}

/// Masks every maskable conversation of every subset found under the data
/// root and reports per-split counts. Records that fail validation are
/// listed with their ids and excluded; malformed lines fail the run.
pub fn cmd_prepare(
    config: &ExperimentConfig,
    out: &Path,
    expect: Option<&Path>,
    started: Instant,
) -> Result<()> {
    let masked_dir = pipeline::masked_dir(out);
    std::fs::create_dir_all(&masked_dir)
        .with_context(|| format!("creating {}", masked_dir.display()))?;
    let mut manifest = RunManifest::new("prepare", config, config.seed);
    let mut counts: BTreeMap<Dialect, SplitCounts> = BTreeMap::new();
    let mut found_any = false;
    for dialect in Dialect::ALL {
        let input = config.conversations_path(dialect);
        if !input.exists() {
            continue;
        }
        found_any = true;
        manifest.record_input(&input)?;
        let (conversations, issues) = load_conversations_lenient(&input)?;
        let mut parse_failures = 0;
        for issue in &issues {
            match issue {
                lordd_core::corpus::CorpusError::Parse { .. } => {
                    eprintln!("error: {issue}");
                    parse_failures += 1;
                }
                other => eprintln!("warning: skipped record: {other}"),
            }
        }
        if parse_failures > 0 {
            return Err(usage(format!(
                "{parse_failures} malformed lines in {}",
                input.display()
            )));
        }
        let mut masked = Vec::with_capacity(conversations.len());
        for conversation in &conversations {
            match mask_conversation(conversation) {
                Ok(example) => masked.push(example),
                Err(e) => eprintln!("warning: skipped record: {e}"),
            }
        }
        let output = pipeline::masked_path(out, dialect);
        lordd_core::corpus::save_masked(&output, &masked)?;
        manifest.record_output(dialect.tag(), &output);
        counts.insert(dialect, split_counts_of(&masked));
    }
    if !found_any {
        return Err(usage(format!(
            "no <subset>.conversations.jsonl files under {}",
            config.data_root.display()
        )));
    }
    for (dialect, c) in &counts {
        println!("{} {} {} {}", dialect.tag(), c.train, c.valid, c.test);
    }
    if let Some(expect_path) = expect {
        check_expectations(expect_path, &counts)?;
    }
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.write(&manifest_path_for(out, "prepare"))?;
    Ok(())
}

fn check_expectations(path: &Path, counts: &BTreeMap<Dialect, SplitCounts>) -> Result<()> {
    let body = std::fs::read_to_string(path)
        .with_context(|| format!("reading expectation file {}", path.display()))?;
    let mut mismatches = Vec::new();
    for (idx, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(usage(format!(
                "{}:{}: expected `<subset> <train> <valid> <test>`",
                path.display(),
                idx + 1
            )));
        }
        let dialect = Dialect::parse(fields[0]).map_err(|e| usage(e.to_string()))?;
        let want = SplitCounts {
            train: fields[1].parse()?,
            valid: fields[2].parse()?,
            test: fields[3].parse()?,
        };
        match counts.get(&dialect) {
            Some(got) if *got == want => {}
            Some(got) => mismatches.push(format!(
                "{}: expected {}/{}/{}, got {}/{}/{}",
                dialect.tag(),
                want.train,
                want.valid,
                want.test,
                got.train,
                got.valid,
                got.test
            )),
            None => mismatches.push(format!("{}: expected but not prepared", dialect.tag())),
        }
    }
    if !mismatches.is_empty() {
        return Err(usage(format!(
            "split counts mismatch the expectation file:\n  {}",
            mismatches.join("\n  ")
        )));
    }
    println!("counts match {}", path.display());
    Ok(())
}

/// Builds the pseudo-parallel corpus and prints samples/positive/negative
/// counts in the published column order.
pub fn cmd_pairs(config: &ExperimentConfig, out: &Path, started: Instant) -> Result<()> {
    let (side_a, side_b) = config
        .parallel_corpus
        .ok_or_else(|| usage("`lordd pairs` needs experiment.parallel_corpus".to_string()))?;
    let mut manifest = RunManifest::new("pairs", config, config.pairs.seed);
    let pool = |dialect: Dialect| -> Result<Vec<MaskedExample>> {
        let path = pipeline::masked_path(out, dialect);
        if !path.exists() {
            return Err(usage(format!(
                "missing masked file {}; run `lordd prepare` first",
                path.display()
            )));
        }
        pipeline::load_masked_split(&path, &config.pairs.split)
    };
    let a_pool = pool(side_a)?;
    let b_pool = pool(side_b)?;
    manifest.record_input(&pipeline::masked_path(out, side_a))?;
    manifest.record_input(&pipeline::masked_path(out, side_b))?;
    let pairs = build_parallel_pairs(&a_pool, &b_pool, config.pairs.max_negatives, config.pairs.seed)?;
    let positives = pairs
        .iter()
        .filter(|p| p.label == lordd_core::corpus::PairLabel::Positive)
        .count();
    let negatives = pairs.len() - positives;
    if positives == 0 {
        eprintln!("warning: the two sides share no target words; zero positive pairs");
    }
    let path = pipeline::pairs_path(out);
    save_pairs(&path, &pairs)?;
    manifest.record_output("pairs", &path);
    println!(
        "{} || {} {} {} {}",
        side_a.tag(),
        side_b.tag(),
        pairs.len(),
        positives,
        negatives
    );
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.write(&manifest_path_for(out, "pairs"))?;
    Ok(())
}

pub fn cmd_train(
    config: &ExperimentConfig,
    out: &Path,
    stage: &str,
    dialect_checkpoint: Option<&Path>,
    started: Instant,
) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match stage {
        "dialect" => {
            if !config.method.uses_dialect_adapter() {
                return Err(usage(format!(
                    "method {} does not train a dialect adapter",
                    config.method
                )));
            }
            let mut manifest = RunManifest::new("train --stage dialect", config, config.seed);
            manifest.record_input(&pipeline::pairs_path(out)).ok();
            let (dir, report) = pipeline::run_dialect_stage(config, out)?;
            manifest.record_output("checkpoint", &dir);
            manifest.wall_seconds = started.elapsed().as_secs_f64();
            manifest.write(&manifest_path_for(out, "train-dialect"))?;
            println!(
                "dialect stage: {} epochs, best epoch {} (loss {:.4}), checkpoint {}",
                report.epochs.len(),
                report.best_epoch,
                report.best_loss,
                dir.display()
            );
        }
        "task" => {
            let mut manifest = RunManifest::new("train --stage task", config, config.seed);
            let (dir, report) = pipeline::run_task_stage(config, out, dialect_checkpoint)?;
            manifest.record_output("checkpoint", &dir);
            manifest.wall_seconds = started.elapsed().as_secs_f64();
            manifest.write(&manifest_path_for(out, "train-task"))?;
            println!(
                "task stage: {} epochs, best epoch {} (loss {:.4}), checkpoint {}",
                report.epochs.len(),
                report.best_epoch,
                report.best_loss,
                dir.display()
            );
        }
        other => return Err(usage(format!("unknown stage {other:?}"))),
    }
    Ok(())
}

pub struct EvalFlags<'a> {
    pub checkpoint: Option<&'a Path>,
    pub dialect_checkpoint: Option<&'a Path>,
    pub rows: &'a [PathBuf],
    pub skyline: Option<&'a str>,
    pub in_dialect: &'a [String],
}

pub fn cmd_eval(
    config: &ExperimentConfig,
    out: &Path,
    flags: &EvalFlags<'_>,
    started: Instant,
) -> Result<()> {
    let mut manifest = RunManifest::new("eval", config, config.seed);
    let artifacts = pipeline::run_eval(config, out, flags.checkpoint, flags.dialect_checkpoint)?;
    manifest.record_output("predictions", &artifacts.predictions_path);
    manifest.record_output("row", &artifacts.row_path);
    println!(
        "{} examples: similarity {:.1}, accuracy {:.1}",
        artifacts.examples, artifacts.row.similarity, artifacts.row.accuracy
    );
    if !flags.rows.is_empty() {
        let mut rows = vec![artifacts.row.clone()];
        for path in flags.rows {
            rows.extend(load_rows(path)?);
            manifest.record_input(path)?;
        }
        let skyline_key = parse_group_key(
            flags
                .skyline
                .ok_or_else(|| usage("--rows needs --skyline".to_string()))?,
        )?;
        let in_dialect_keys = flags
            .in_dialect
            .iter()
            .map(|s| parse_group_key(s))
            .collect::<Result<Vec<_>>>()?;
        write_report_files(out, &rows, &skyline_key, &in_dialect_keys, &[])?;
        manifest.record_output("report", &out.join("report.json"));
    }
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.write(&manifest_path_for(out, "eval"))?;
    Ok(())
}

fn parse_group_key(spec: &str) -> Result<GroupKey> {
    let parts: Vec<&str> = spec.split('|').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(usage(format!(
            "group key must be `method|training_data|test_dialect`, got {spec:?}"
        )));
    }
    Ok(GroupKey::new(parts[0], parts[1], parts[2]))
}

fn load_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let body = std::fs::read_to_string(path)
        .with_context(|| format!("reading rows from {}", path.display()))?;
    if let Ok(rows) = serde_json::from_str::<Vec<ReportRow>>(&body) {
        return Ok(rows);
    }
    let row: ReportRow = serde_json::from_str(&body)
        .with_context(|| format!("{} is neither a row nor a row array", path.display()))?;
    Ok(vec![row])
}

fn write_report_files(
    out: &Path,
    rows: &[ReportRow],
    skyline: &GroupKey,
    in_dialect: &[GroupKey],
    published: &[PublishedAnnotation],
) -> Result<()> {
    let report = build_report(rows, skyline, in_dialect, published)?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    let text = render_text(&report);
    std::fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn cmd_report(
    out: &Path,
    rows_paths: &[PathBuf],
    skyline: &str,
    in_dialect: &[String],
    published_path: Option<&Path>,
) -> Result<()> {
    if rows_paths.is_empty() {
        return Err(usage("`lordd report` needs at least one --rows file".to_string()));
    }
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for path in rows_paths {
        rows.extend(load_rows(path)?);
    }
    let published: Vec<PublishedAnnotation> = match published_path {
        None => vec![],
        Some(path) => {
            let body = std::fs::read_to_string(path)
                .with_context(|| format!("reading published annotations {}", path.display()))?;
            serde_json::from_str(&body)
                .with_context(|| format!("parsing published annotations {}", path.display()))?
        }
    };
    let skyline_key = parse_group_key(skyline)?;
    let in_dialect_keys = in_dialect
        .iter()
        .map(|s| parse_group_key(s))
        .collect::<Result<Vec<_>>>()?;
    write_report_files(out, &rows, &skyline_key, &in_dialect_keys, &published)
}

#[derive(Debug, Clone, Deserialize)]
struct GridSpec {
    base: PathBuf,
    us_fractions: Vec<f64>,
    dialect_adapter: Vec<bool>,
}

fn parse_grid(path: &Path) -> Result<GridSpec> {
    let file = KeyValueFile::load(path)?;
    let base_raw = file
        .get("grid.base")
        .ok_or_else(|| usage("grid file needs grid.base".to_string()))?;
    let base = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(base_raw);
    let fractions = file
        .get("grid.us_fractions")
        .unwrap_or("1.0")
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| usage(format!("us_fractions: {e}"))))
        .collect::<Result<Vec<f64>>>()?;
    let adapters = file
        .get("grid.dialect_adapter")
        .unwrap_or("on")
        .split(',')
        .map(|s| match s.trim() {
            "on" => Ok(true),
            "off" => Ok(false),
            other => Err(usage(format!("dialect_adapter entries are on/off, got {other:?}"))),
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(GridSpec {
        base,
        us_fractions: fractions,
        dialect_adapter: adapters,
    })
}

#[derive(Debug, Serialize)]
struct AblationCell {
    name: String,
    us_fraction: f64,
    dialect_adapter: bool,
    row: Option<ReportRow>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct AblationReport {
    grid: String,
    cells: Vec<AblationCell>,
}

/// Runs every grid cell end to end with shared seeds; failed cells are
/// recorded and the rest proceed. Returns the number of failed cells.
pub fn cmd_ablate(
    grid_path: &Path,
    out: &Path,
    jobs: usize,
    seed_override: Option<u64>,
    started: Instant,
) -> Result<usize> {
    let grid = parse_grid(grid_path)?;
    let base_file = KeyValueFile::load(&grid.base)?;
    // validate the base config before fanning out
    let base_config = ExperimentConfig::from_file(&base_file, seed_override)?;
    std::fs::create_dir_all(out)?;

    struct Cell {
        name: String,
        us_fraction: f64,
        dialect_adapter: bool,
        file: KeyValueFile,
        dir: PathBuf,
    }
    let mut cells = Vec::new();
    for &fraction in &grid.us_fractions {
        for &adapter_on in &grid.dialect_adapter {
            let name = format!(
                "us{:03}-dial-{}",
                (fraction * 100.0).round() as usize,
                if adapter_on { "on" } else { "off" }
            );
            let mut file = base_file.clone();
            file.set("experiment.us_fraction", format!("{fraction}"));
            if adapter_on {
                file.set("experiment.method", "lordd");
            } else {
                file.set("experiment.method", "ablation");
                file.set("experiment.parallel_corpus", "none");
            }
            cells.push(Cell {
                name: name.clone(),
                us_fraction: fraction,
                dialect_adapter: adapter_on,
                file,
                dir: out.join("cells").join(name),
            });
        }
    }

    let run_cell = |cell: &Cell| -> Result<ReportRow> {
        std::fs::create_dir_all(&cell.dir)?;
        let config = ExperimentConfig::from_file(&cell.file, seed_override)?;
        // cells reuse the parent's prepared masked files
        let masked_src = pipeline::masked_dir(out);
        let masked_dst = pipeline::masked_dir(&cell.dir);
        if !masked_src.exists() {
            return Err(usage(format!(
                "missing masked dir {}; run `lordd prepare --out {}` first",
                masked_src.display(),
                out.display()
            )));
        }
        copy_dir(&masked_src, &masked_dst)?;
        let cell_started = Instant::now();
        let mut manifest = RunManifest::new(format!("ablate-cell {}", cell.name), &config, config.seed);
        if config.method.uses_dialect_adapter() {
            cmd_pairs(&config, &cell.dir, cell_started)?;
            let (dir, _) = pipeline::run_dialect_stage(&config, &cell.dir)?;
            manifest.record_output("dialect_checkpoint", &dir);
        }
        let (dir, _) = pipeline::run_task_stage(&config, &cell.dir, None)?;
        manifest.record_output("task_checkpoint", &dir);
        let artifacts = pipeline::run_eval(&config, &cell.dir, None, None)?;
        manifest.record_output("row", &artifacts.row_path);
        manifest.wall_seconds = cell_started.elapsed().as_secs_f64();
        manifest.write(&manifest_path_for(&cell.dir, "cell"))?;
        Ok(artifacts.row)
    };

    let results: Vec<Option<Result<ReportRow>>> = {
        let slots: Vec<Mutex<Option<Result<ReportRow>>>> =
            cells.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = jobs.max(1).min(cells.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, Ordering::SeqCst);
                    if idx >= cells.len() {
                        break;
                    }
                    let outcome = run_cell(&cells[idx]);
                    *slots[idx].lock().unwrap() = Some(outcome);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().unwrap()).collect()
    };

    let mut report_cells = Vec::new();
    let mut failures = 0;
    for (cell, outcome) in cells.iter().zip(results) {
        match outcome.expect("every cell ran") {
            Ok(row) => {
                report_cells.push(AblationCell {
                    name: cell.name.clone(),
                    us_fraction: cell.us_fraction,
                    dialect_adapter: cell.dialect_adapter,
                    row: Some(row),
                    error: None,
                });
            }
            Err(e) => {
                failures += 1;
                eprintln!("cell {} failed: {e:#}", cell.name);
                report_cells.push(AblationCell {
                    name: cell.name.clone(),
                    us_fraction: cell.us_fraction,
                    dialect_adapter: cell.dialect_adapter,
                    row: None,
                    error: Some(format!("{e:#}")),
                });
            }
        }
    }
    let report = AblationReport {
        grid: grid_path.display().to_string(),
        cells: report_cells,
    };
    std::fs::write(
        out.join("ablation_report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    let mut text = format!(
        "{:<18} {:>11} {:>8} {:>8} {:>8}\n",
        "cell", "us_fraction", "dialect", "sim", "acc"
    );
    for cell in &report.cells {
        match &cell.row {
            Some(row) => text.push_str(&format!(
                "{:<18} {:>11.2} {:>8} {:>8.1} {:>8.1}\n",
                cell.name,
                cell.us_fraction,
                if cell.dialect_adapter { "on" } else { "off" },
                row.similarity,
                row.accuracy
            )),
            None => text.push_str(&format!(
                "{:<18} {:>11.2} {:>8} {:>8} {:>8}\n",
                cell.name,
                cell.us_fraction,
                if cell.dialect_adapter { "on" } else { "off" },
                "FAILED",
                "FAILED"
            )),
        }
    }
    std::fs::write(out.join("ablation_report.txt"), &text)?;
    print!("{text}");

    let mut manifest = RunManifest::new("ablate", &base_config, base_config.seed);
    manifest.record_input(grid_path)?;
    manifest.record_output("report", &out.join("ablation_report.json"));
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.write(&manifest_path_for(out, "ablate"))?;
    Ok(failures)
}

fn copy_dir(src: &Path, dst: &Path) -> Result<()> {
    std::fs::create_dir_all(dst)?;
    for entry in std::fs::read_dir(src)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            std::fs::copy(entry.path(), dst.join(entry.file_name()))?;
        }
    }
    Ok(())
}

fn manifest_path_for(out: &Path, command: &str) -> PathBuf {
    manifest_path(out).with_file_name(format!("{command}_manifest.json"))
}
