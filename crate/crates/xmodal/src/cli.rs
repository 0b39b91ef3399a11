//! Command-line surface: preprocess raw text records, train adapters with a
//! named strategy, evaluate checkpoints on a test split, and run ad-hoc
//! retrieval queries.
//!
//! Exit codes: 0 success, 2 usage or data error, 3 numerical failure. Log
//! verbosity is controlled by the `XMODAL_LOG` environment variable.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::adapter::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMetadata};
use crate::data::{load_manifest, read_embedding_file, Dataset, Modality, NoiseTier, Split};
use crate::losses::{LossKind, PairMiningPolicy};
use crate::retrieval::{rank, AudioIndex, MetricReport};
use crate::text::{clean_description_report, join_tags};
use crate::training::{
    configure_strategy, ranked_results_for_split, run_training, Strategy, TrainConfig, TrainError,
};

#[derive(Parser)]
#[command(
    name = "xmodal",
    version,
    about = "Cross-modal audio/text retrieval: adapter training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Tsv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Clean raw text records: strip HTML, decode entities, cap length,
    /// and join tags into a single string.
    Preprocess {
        /// JSON-lines input, one {item_id, description, tags} object per line.
        #[arg(long)]
        input: PathBuf,
        /// JSON-lines output with cleaned description and joined tags.
        #[arg(long)]
        output: PathBuf,
    },
    /// Train adapters with a strategy and write checkpoints plus a report.
    Train {
        /// JSON config; dataset paths are resolved relative to its directory.
        #[arg(long)]
        config: PathBuf,
        /// One of ATAE, ATAE-ET, ATAE-EP-F, ATAE-NP-F.
        #[arg(long)]
        strategy: String,
        /// Output directory for checkpoints and report.json.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a manifest's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Base directory for the manifest's relative embedding paths
        /// (defaults to the manifest's directory).
        #[arg(long)]
        embedding_root: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Tsv)]
        format: ReportFormat,
    },
    /// Rank the audio items of a manifest against one text query embedding.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest whose audio items form the index (all splits).
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        embedding_root: Option<PathBuf>,
        /// Binary embedding file holding the text query.
        #[arg(long)]
        query_embedding: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => m,
        }
    }
}

/// Formats an error with its full source chain, so file-level failures
/// keep their OS-level cause.
fn render_chain(e: &dyn std::error::Error) -> String {
    let mut out = e.to_string();
    let mut cur = e.source();
    while let Some(src) = cur {
        out.push_str(": ");
        out.push_str(&src.to_string());
        cur = src.source();
    }
    out
}

fn usage<E: std::error::Error>(e: E) -> CliError {
    CliError::Usage(render_chain(&e))
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NumericalFailure(_) => CliError::Numerical(render_chain(&e)),
            _ => CliError::Usage(render_chain(&e)),
        }
    }
}

pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("XMODAL_LOG", "warn"),
    )
    .try_init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Preprocess { input, output } => cmd_preprocess(&input, &output),
        Command::Train {
            config,
            strategy,
            out,
            seed,
        } => cmd_train(&config, &strategy, &out, seed),
        Command::Evaluate {
            checkpoint,
            manifest,
            embedding_root,
            format,
        } => cmd_evaluate(&checkpoint, &manifest, embedding_root.as_deref(), format),
        Command::Retrieve {
            checkpoint,
            index,
            embedding_root,
            query_embedding,
            k,
        } => cmd_retrieve(&checkpoint, &index, embedding_root.as_deref(), &query_embedding, k),
    }
}

#[derive(Debug, Deserialize)]
struct RawTextRecord {
    item_id: String,
    description: String,
    #[serde(default)]
    tags: Vec<String>,
}

#[derive(Debug, Serialize)]
struct CleanTextRecord {
    item_id: String,
    description: String,
    tags: String,
}

fn cmd_preprocess(input: &Path, output: &Path) -> Result<(), CliError> {
    let reader = BufReader::new(fs::File::open(input).map_err(|e| {
        CliError::Usage(format!("cannot open {}: {e}", input.display()))
    })?);
    let mut out = fs::File::create(output).map_err(|e| {
        CliError::Usage(format!("cannot create {}: {e}", output.display()))
    })?;

    let mut records = 0usize;
    let mut truncated = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| {
            CliError::Usage(format!("{}: line {line_no}: {e}", input.display()))
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTextRecord = serde_json::from_str(&line).map_err(|e| {
            CliError::Usage(format!("{}: line {line_no}: {e}", input.display()))
        })?;

        let cleaned = clean_description_report(&raw.description);
        if cleaned.truncated {
            truncated += 1;
        }
        let tags: Vec<&str> = raw
            .tags
            .iter()
            .map(|t| t.trim())
            .filter(|t| !t.is_empty())
            .collect();
        let record = CleanTextRecord {
            item_id: raw.item_id,
            description: cleaned.text,
            tags: join_tags(&tags),
        };
        let encoded = serde_json::to_string(&record)
            .map_err(|e| CliError::Usage(format!("line {line_no}: {e}")))?;
        writeln!(out, "{encoded}").map_err(|e| {
            CliError::Usage(format!("cannot write {}: {e}", output.display()))
        })?;
        records += 1;
    }
    eprintln!("preprocessed {records} records ({truncated} truncated)");
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSpec {
    manifest: PathBuf,
    /// Base directory for the manifest's relative embedding paths; defaults
    /// to the manifest's directory.
    embedding_root: Option<PathBuf>,
    noise_tier: NoiseTier,
}

fn default_temperature() -> f64 {
    0.07
}
fn default_batch_size() -> usize {
    32
}
fn default_lr0() -> f64 {
    1e-4
}
fn default_max_epochs() -> usize {
    100
}
fn default_hidden_dim() -> usize {
    512
}
fn default_output_dim() -> usize {
    512
}
fn default_loss() -> LossKind {
    LossKind::NtXent
}
fn default_mining() -> PairMiningPolicy {
    PairMiningPolicy::CrossModalOnly
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfigFile {
    seed: u64,
    #[serde(default = "default_loss")]
    loss: LossKind,
    #[serde(default = "default_mining")]
    mining: PairMiningPolicy,
    #[serde(default = "default_temperature")]
    temperature: f64,
    #[serde(default = "default_batch_size")]
    batch_size: usize,
    #[serde(default = "default_lr0")]
    lr0: f64,
    #[serde(default = "default_max_epochs")]
    max_epochs: usize,
    #[serde(default = "default_hidden_dim")]
    hidden_dim: usize,
    #[serde(default = "default_output_dim")]
    output_dim: usize,
    datasets: BTreeMap<String, DatasetSpec>,
    /// Dataset whose validation split scores every epoch; also the clean
    /// pool referenced by the strategies.
    clean_dataset: String,
    noisy_dataset: Option<String>,
}

fn load_dataset(name: &str, spec: &DatasetSpec, base: &Path) -> Result<Dataset, CliError> {
    let manifest = base.join(&spec.manifest);
    let root = match &spec.embedding_root {
        Some(root) => base.join(root),
        None => manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let mut dataset = load_manifest(&manifest, &root).map_err(usage)?;
    dataset.name = name.to_string();
    dataset.noise_tier = spec.noise_tier;
    Ok(dataset)
}

fn cmd_train(
    config_path: &Path,
    strategy: &str,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let text = fs::read_to_string(config_path).map_err(|e| {
        CliError::Usage(format!("cannot read {}: {e}", config_path.display()))
    })?;
    let file: TrainConfigFile = serde_json::from_str(&text).map_err(|e| {
        CliError::Usage(format!("{}: {e}", config_path.display()))
    })?;
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));

    let strategy: Strategy = strategy.parse()?;
    let clean_name = file.clean_dataset.clone();
    if !file.datasets.contains_key(&clean_name) {
        return Err(CliError::Usage(format!(
            "clean_dataset {clean_name:?} is not declared under datasets"
        )));
    }
    let noisy_name = match (strategy, &file.noisy_dataset) {
        (Strategy::Atae, _) => clean_name.clone(), // unused by this strategy
        (_, Some(name)) => {
            if !file.datasets.contains_key(name) {
                return Err(CliError::Usage(format!(
                    "noisy_dataset {name:?} is not declared under datasets"
                )));
            }
            name.clone()
        }
        (_, None) => {
            return Err(CliError::Usage(format!(
                "strategy {} needs a noisy_dataset in the config",
                strategy.name()
            )));
        }
    };
    let stages = configure_strategy(strategy, &clean_name, &noisy_name);

    let config = TrainConfig {
        loss: file.loss,
        mining: file.mining,
        temperature: file.temperature,
        batch_size: file.batch_size,
        seed: seed_override.unwrap_or(file.seed),
        lr0: file.lr0,
        max_epochs: file.max_epochs,
        hidden_dim: file.hidden_dim,
        output_dim: file.output_dim,
        stages,
    };
    config.validate()?;

    // Load only the datasets this run touches, so an ATAE config does not
    // need its noisy manifests present.
    let mut needed = BTreeSet::new();
    needed.insert(clean_name.clone());
    for stage in &config.stages {
        needed.extend(stage.train_datasets.iter().cloned());
    }
    let mut datasets = BTreeMap::new();
    for name in &needed {
        let spec = file.datasets.get(name).ok_or_else(|| {
            CliError::Usage(format!("dataset {name:?} is not declared under datasets"))
        })?;
        datasets.insert(name.clone(), load_dataset(name, spec, base)?);
    }
    let clean = datasets[&clean_name].clone();

    log::info!(
        "training strategy {} ({} stages) with seed {}",
        strategy.name(),
        config.stages.len(),
        config.seed
    );
    let outcome = run_training(&config, &datasets, &clean)?;

    fs::create_dir_all(out_dir).map_err(|e| {
        CliError::Usage(format!("cannot create {}: {e}", out_dir.display()))
    })?;
    let config_hash = config.config_hash();
    for (stage_report, (audio, text)) in outcome
        .report
        .stages
        .iter()
        .zip(&outcome.stage_best)
    {
        let checkpoint = Checkpoint {
            audio: audio.clone(),
            text: text.clone(),
            metadata: CheckpointMetadata {
                epoch: stage_report.best_epoch,
                score: stage_report.best_score,
                config_hash: config_hash.clone(),
            },
        };
        let path = out_dir.join(format!("stage_{}_best.ckpt", stage_report.stage));
        save_checkpoint(&path, &checkpoint).map_err(usage)?;
        if stage_report.stage == outcome.report.stages.len() {
            save_checkpoint(&out_dir.join("final_best.ckpt"), &checkpoint).map_err(usage)?;
        }
    }

    let report_json = serde_json::to_string_pretty(&outcome.report)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let report_path = out_dir.join("report.json");
    fs::write(&report_path, report_json + "\n").map_err(|e| {
        CliError::Usage(format!("cannot write {}: {e}", report_path.display()))
    })?;

    for stage in &outcome.report.stages {
        println!(
            "stage {}: {} epochs, best epoch {}, val mAP@10 {:.3}",
            stage.stage,
            stage.epochs.len(),
            stage.best_epoch,
            stage.best_score
        );
    }
    println!("wrote checkpoints and report.json to {}", out_dir.display());
    Ok(())
}

fn load_indexed_dataset(
    manifest: &Path,
    embedding_root: Option<&Path>,
) -> Result<Dataset, CliError> {
    let root = match embedding_root {
        Some(root) => root.to_path_buf(),
        None => manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    load_manifest(manifest, &root).map_err(usage)
}

fn cmd_evaluate(
    checkpoint_path: &Path,
    manifest: &Path,
    embedding_root: Option<&Path>,
    format: ReportFormat,
) -> Result<(), CliError> {
    let checkpoint = load_checkpoint(checkpoint_path).map_err(usage)?;
    let dataset = load_indexed_dataset(manifest, embedding_root)?;
    let results =
        ranked_results_for_split(&checkpoint.audio, &checkpoint.text, &dataset, Split::Test)?;
    let report = MetricReport::from_results(&results).map_err(usage)?;
    match format {
        ReportFormat::Tsv => print!("{}", report.to_tsv()),
        ReportFormat::Json => println!("{}", report.to_json()),
    }
    Ok(())
}

fn cmd_retrieve(
    checkpoint_path: &Path,
    index_manifest: &Path,
    embedding_root: Option<&Path>,
    query_embedding: &Path,
    k: usize,
) -> Result<(), CliError> {
    if k == 0 {
        return Err(CliError::Usage("k must be at least 1".into()));
    }
    let checkpoint = load_checkpoint(checkpoint_path).map_err(usage)?;
    let dataset = load_indexed_dataset(index_manifest, embedding_root)?;

    // Every distinct audio item of the manifest, across all splits.
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for example in &dataset.examples {
        if seen.insert(example.audio.item_id.clone()) {
            let (out, _) = checkpoint
                .audio
                .forward(example.audio.data())
                .map_err(usage)?;
            entries.push((example.audio.item_id.clone(), out));
        }
    }
    let index = AudioIndex::new(entries).map_err(usage)?;

    let k = if k > index.len() {
        eprintln!(
            "warning: k={k} exceeds the index size {}; clamping",
            index.len()
        );
        index.len()
    } else {
        k
    };

    let query = read_embedding_file(query_embedding, "query", Modality::Text).map_err(usage)?;
    let (adapted, _) = checkpoint.text.forward(query.data()).map_err(usage)?;
    let ranking = rank(&index, &adapted, Some(k)).map_err(usage)?;
    for (rank_no, (audio_id, score)) in ranking.iter().enumerate() {
        println!("{}\t{}\t{:.6}", rank_no + 1, audio_id, score);
    }
    Ok(())
}
