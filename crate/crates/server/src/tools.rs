//! Batch commands behind the `engine` CLI.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use obtod_core::dataset::{
    dataset_to_json, emit_augmentation_prompts, emit_training_examples, load_dataset, merge_implicit, parse_dataset,
    write_tsv, AugmentMethod, Completion, Dataset, EmitConfig, HiddenTarget, Regime, Split, Task,
};
use obtod_core::engine::BackendConfig;
use obtod_core::eval::{evaluate, RunOutput, Subset, TaskMode};
use obtod_core::knowledge::{EntityDatabase, InContextExamples};
use obtod_core::{Engine, EngineConfig, MetricReport};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn dataset(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn database(ds: &Dataset, explicit: Option<&Path>) -> Result<EntityDatabase> {
    let path = explicit.map(Path::to_path_buf).or_else(|| ds.database.clone());
    let Some(path) = path else { bail!("dataset names no database; pass --db") };
    EntityDatabase::load(&path).with_context(|| format!("loading database {}", path.display()))
}

fn engine(config: &Path) -> Result<Engine> {
    let cfg = EngineConfig::load(config).with_context(|| format!("loading config {}", config.display()))?;
    Ok(Engine::from_config(&cfg)?)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Teacher-forced replay of one split. With `oracle`, the configured backend
/// is replaced by one scripted from the gold annotations.
pub fn replay(config: &Path, dataset_path: &Path, split: Split, oracle: bool) -> Result<RunOutput> {
    let ds = dataset(dataset_path)?;
    let mut engine = engine(config)?;
    let dialogs = ds.split(split);
    if oracle {
        engine = engine.with_backend(Arc::new(engine.oracle_backend(dialogs)?));
    }
    Ok(engine.replay(dialogs)?)
}

/// Writes a scripted-backend file reproducing the gold states and responses
/// of a split under the config's knowledge routing.
pub fn oracle_script(config: &Path, dataset_path: &Path, split: Split, out: &Path) -> Result<usize> {
    let ds = dataset(dataset_path)?;
    let mut cfg = EngineConfig::load(config)?;
    cfg.backend = BackendConfig::Echo { output: String::new() };
    let script = Engine::from_config(&cfg)?.oracle_backend(ds.split(split))?;
    script.save(out).with_context(|| format!("writing {}", out.display()))?;
    Ok(script.len())
}

pub fn eval(
    run: &Path,
    dataset_path: &Path,
    split: Split,
    mode: TaskMode,
    subset: Subset,
    db: Option<&Path>,
) -> Result<MetricReport> {
    let ds = dataset(dataset_path)?;
    let db = database(&ds, db)?;
    let run = RunOutput::load(run).with_context(|| format!("loading run {}", run.display()))?;
    Ok(evaluate(&run, ds.split(split), &db, mode, subset)?)
}

pub fn stats(dataset_path: &Path) -> Result<String> {
    Ok(obtod_core::dataset::dataset_stats(&dataset(dataset_path)?).table())
}

pub fn emit_training(
    dataset_path: &Path,
    split: Split,
    task: Task,
    regime: Regime,
    hidden: HiddenTarget,
    out: &Path,
) -> Result<usize> {
    let ds = dataset(dataset_path)?;
    let db = database(&ds, None)?;
    let cfg = EmitConfig { hidden, ..EmitConfig::default() };
    let pairs = emit_training_examples(ds.split(split), &db, task, regime, &cfg)?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_tsv(&pairs, BufWriter::new(file))?;
    Ok(pairs.len())
}

pub fn emit_prompts(
    dataset_path: &Path,
    split: Split,
    method: AugmentMethod,
    examples: &Path,
    out: &Path,
) -> Result<usize> {
    let ds = dataset(dataset_path)?;
    let text = std::fs::read_to_string(examples).with_context(|| format!("reading {}", examples.display()))?;
    let examples: InContextExamples = serde_json::from_str(&text).with_context(|| examples.display().to_string())?;
    let prompts = emit_augmentation_prompts(ds.split(split), method, &examples)?;
    write_jsonl(&prompts, out)?;
    Ok(prompts.len())
}

/// Merges completions into a copy of the dataset. The database path is kept
/// as written in the input file.
pub fn merge(dataset_path: &Path, split: Split, completions: &Path, out: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(dataset_path).with_context(|| format!("reading {}", dataset_path.display()))?;
    let mut ds = parse_dataset(&text)?;
    let completions: Vec<Completion> = read_jsonl(completions)?;
    let n = merge_implicit(ds.split_mut(split), &completions)?;
    std::fs::write(out, dataset_to_json(&ds)).with_context(|| format!("writing {}", out.display()))?;
    Ok(n)
}

pub fn save_run(run: &RunOutput, out: &PathBuf) -> Result<()> {
    run.save(out).with_context(|| format!("writing {}", out.display()))
}
