//! The end-to-end training pipeline: minibatch sampling, the epoch loop with
//! per-epoch validation, plateau scheduling, early stopping with weight
//! revert, and the multi-stage training strategies.
//!
//! Determinism is a hard requirement: all randomness flows from the config
//! seed through per-stage, per-epoch derived seeds, and every iteration
//! order is fixed, so identical inputs give bit-identical reports and
//! checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{
    init_adapter, Adapter, AdapterError, AdapterGradients, CheckpointError,
};
use crate::data::{DataError, Dataset, PairedExample, Split};
use crate::losses::{
    compute_loss, BatchEmbeddings, BatchRow, LossError, LossKind, PairMiningPolicy,
};
use crate::optim::{
    scheduler_epoch_end, AdamState, EarlyStopper, EpochDecision, OptimError, PlateauScheduler,
};
use crate::retrieval::{map_at_k, rank, AudioIndex, RankedResult, RetrievalError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub train_datasets: Vec<String>,
    pub kind: StageKind,
    /// Start from the previous stage's best adapters instead of a fresh
    /// initialization.
    pub inherit: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub mining: PairMiningPolicy,
    pub temperature: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr0: f64,
    /// Upper bound on epochs per stage; early stopping usually ends sooner.
    pub max_epochs: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub stages: Vec<StageConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::InvalidConfig("max_epochs must be at least 1".into()));
        }
        if self.lr0 <= 0.0 || !self.lr0.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(TrainError::InvalidConfig("adapter dims must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(TrainError::InvalidConfig("at least one stage required".into()));
        }
        if self.stages[0].inherit {
            return Err(TrainError::InvalidConfig(
                "the first stage has nothing to inherit from".into(),
            ));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.kind == StageKind::Finetune && !stage.inherit {
                return Err(TrainError::InvalidConfig(format!(
                    "stage {}: fine-tuning must inherit the previous stage's weights",
                    i + 1
                )));
            }
            if stage.train_datasets.is_empty() {
                return Err(TrainError::InvalidConfig(format!(
                    "stage {}: no training datasets",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Stable fingerprint of the configuration, recorded in checkpoints and
    /// reports so runs can be matched to their settings.
    pub fn config_hash(&self) -> String {
        let encoded = serde_json::to_string(self).expect("config serializes");
        fnv1a_hex(encoded.as_bytes())
    }
}

/// The four training strategies: clean only, clean plus noisy as one pool,
/// pretrain on the combined pool then fine-tune on clean, and pretrain on
/// noisy only then fine-tune on clean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Atae,
    AtaeEt,
    AtaeEpF,
    AtaeNpF,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Atae,
        Strategy::AtaeEt,
        Strategy::AtaeEpF,
        Strategy::AtaeNpF,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Atae => "ATAE",
            Strategy::AtaeEt => "ATAE-ET",
            Strategy::AtaeEpF => "ATAE-EP-F",
            Strategy::AtaeNpF => "ATAE-NP-F",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ATAE" => Ok(Strategy::Atae),
            "ATAE-ET" => Ok(Strategy::AtaeEt),
            "ATAE-EP-F" => Ok(Strategy::AtaeEpF),
            "ATAE-NP-F" => Ok(Strategy::AtaeNpF),
            other => Err(TrainError::InvalidConfig(format!(
                "unknown strategy {other:?}; expected ATAE, ATAE-ET, ATAE-EP-F, or ATAE-NP-F"
            ))),
        }
    }
}

/// Expands a strategy into its stage list over the two dataset names.
pub fn configure_strategy(strategy: Strategy, clean: &str, noisy: &str) -> Vec<StageConfig> {
    let stage = |names: Vec<&str>, kind, inherit| StageConfig {
        train_datasets: names.into_iter().map(String::from).collect(),
        kind,
        inherit,
    };
    match strategy {
        Strategy::Atae => vec![stage(vec![clean], StageKind::Pretrain, false)],
        Strategy::AtaeEt => vec![stage(vec![clean, noisy], StageKind::Pretrain, false)],
        Strategy::AtaeEpF => vec![
            stage(vec![clean, noisy], StageKind::Pretrain, false),
            stage(vec![clean], StageKind::Finetune, true),
        ],
        Strategy::AtaeNpF => vec![
            stage(vec![noisy], StageKind::Pretrain, false),
            stage(vec![clean], StageKind::Finetune, true),
        ],
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map10: f64,
    /// Learning rate in effect while this epoch's steps were applied.
    pub lr: f64,
    pub decision: EpochDecision,
    pub batches: usize,
    /// Pairs dropped from the tail of the permutation (a remainder of one
    /// cannot form negative pairs).
    pub dropped_pairs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub kind: StageKind,
    pub train_datasets: Vec<String>,
    pub train_pair_count: usize,
    /// Parameter fingerprint at stage start, for verifying weight lineage
    /// across stages.
    pub init_param_hash: String,
    pub best_param_hash: String,
    pub best_epoch: u64,
    pub best_score: f64,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub stages: Vec<StageReport>,
    pub best_epoch: u64,
    pub best_score: f64,
    /// Wall-clock time is kept for operators but excluded from the
    /// serialized report, which must be byte-identical across reruns.
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final-stage best adapters.
    pub audio: Adapter,
    pub text: Adapter,
    /// Best adapter pair of every stage, in stage order (the last entry
    /// equals the final adapters).
    pub stage_best: Vec<(Adapter, Adapter)>,
    pub report: TrainReport,
}

/// 64-bit FNV-1a over raw bytes, rendered as 16 hex digits.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

/// Fingerprint of both adapters' parameters (audio first), using the exact
/// f64 bit patterns.
pub fn param_hash(audio: &Adapter, text: &Adapter) -> String {
    let mut bytes = Vec::new();
    for adapter in [audio, text] {
        for block in adapter.param_blocks() {
            for v in block {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fnv1a_hex(&bytes)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from the config seed and a position in the
/// run (stage, epoch, purpose), so reordering stages or epochs never reuses
/// a random stream.
fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6a09e667f3bcc908, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

/// Splits a random permutation of the pair indices into consecutive batches.
/// A final batch of one is dropped: a single pair admits no negatives.
pub fn sample_epoch_batches(
    pair_count: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>, TrainError> {
    if pair_count < 2 {
        return Err(TrainError::InvalidDataset(format!(
            "need at least 2 training pairs, got {pair_count}"
        )));
    }
    if batch_size < 2 {
        return Err(TrainError::InvalidConfig(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..pair_count).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let batches: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .filter(|chunk| chunk.len() >= 2)
        .map(|chunk| chunk.to_vec())
        .collect();
    Ok(batches)
}

/// Forwards one minibatch through both adapters, evaluates the configured
/// loss, and backpropagates into parameter gradients. Returns the loss
/// value, per-adapter gradient totals, and the loss's active-pair count
/// (zero means the optimizer step should be skipped).
pub fn batch_loss_and_param_grads(
    audio_adapter: &Adapter,
    text_adapter: &Adapter,
    pairs: &[&PairedExample],
    loss: LossKind,
    mining: PairMiningPolicy,
    temperature: f64,
) -> Result<(f64, AdapterGradients, AdapterGradients, usize), TrainError> {
    let mut rows = Vec::with_capacity(pairs.len());
    let mut audio_caches = Vec::with_capacity(pairs.len());
    let mut text_caches = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (audio_out, audio_cache) = audio_adapter.forward(pair.audio.data())?;
        let (text_out, text_cache) = text_adapter.forward(pair.text.data())?;
        rows.push(BatchRow {
            label: pair.label.clone(),
            audio: audio_out,
            text: text_out,
        });
        audio_caches.push(audio_cache);
        text_caches.push(text_cache);
    }
    let batch = BatchEmbeddings::new(rows)?;
    let output = compute_loss(loss, &batch, mining, temperature)?;

    let mut audio_grads = AdapterGradients::zeros_like(audio_adapter);
    let mut text_grads = AdapterGradients::zeros_like(text_adapter);
    for i in 0..pairs.len() {
        let g = audio_adapter.backward(&audio_caches[i], &output.audio_grads[i])?;
        audio_grads.accumulate(&g, 1.0);
        let g = text_adapter.backward(&text_caches[i], &output.text_grads[i])?;
        text_grads.accumulate(&g, 1.0);
    }
    Ok((output.value, audio_grads, text_grads, output.active_pair_count))
}

/// Adapts every pair of a split and ranks each text query against the
/// distinct audio items of that split. Ground truth per query is the
/// query's own audio.
pub fn ranked_results_for_split(
    audio_adapter: &Adapter,
    text_adapter: &Adapter,
    dataset: &Dataset,
    split: Split,
) -> Result<Vec<RankedResult>, TrainError> {
    let pairs: Vec<&PairedExample> = dataset.split(split).collect();
    if pairs.is_empty() {
        return Err(TrainError::InvalidDataset(format!(
            "dataset {} has no pairs in the requested split",
            dataset.name
        )));
    }
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for pair in &pairs {
        if seen.insert(pair.audio.item_id.clone()) {
            let (out, _) = audio_adapter.forward(pair.audio.data())?;
            entries.push((pair.audio.item_id.clone(), out));
        }
    }
    let index = AudioIndex::new(entries)?;

    let mut results = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let (query, _) = text_adapter.forward(pair.text.data())?;
        let ranking = rank(&index, &query, None)?;
        results.push(RankedResult {
            query_id: pair.pair_id.clone(),
            ranking,
            relevant_ids: std::iter::once(pair.label.clone()).collect(),
        });
    }
    Ok(results)
}

fn validation_map10(
    audio_adapter: &Adapter,
    text_adapter: &Adapter,
    validation: &Dataset,
) -> Result<f64, TrainError> {
    let results =
        ranked_results_for_split(audio_adapter, text_adapter, validation, Split::Validation)?;
    Ok(map_at_k(&results, 10)?)
}

/// Collects the training pairs of a stage, in dataset order then manifest
/// order, rejecting pair ids that appear twice across the union.
fn stage_train_pairs<'a>(
    stage: &StageConfig,
    datasets: &'a BTreeMap<String, Dataset>,
) -> Result<Vec<&'a PairedExample>, TrainError> {
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::new();
    for name in &stage.train_datasets {
        let dataset = datasets.get(name).ok_or_else(|| {
            TrainError::InvalidConfig(format!("unknown dataset {name:?} in stage config"))
        })?;
        for pair in dataset.split(Split::Train) {
            if !seen.insert(pair.pair_id.clone()) {
                return Err(TrainError::Data(DataError::DuplicateId {
                    pair_id: pair.pair_id.clone(),
                }));
            }
            pairs.push(pair);
        }
    }
    Ok(pairs)
}

fn consistent_dims(
    pairs: &[&PairedExample],
    expected: &mut Option<(usize, usize)>,
) -> Result<(), TrainError> {
    for pair in pairs {
        let dims = (pair.audio.dim(), pair.text.dim());
        match expected {
            None => *expected = Some(dims),
            Some(e) if *e != dims => {
                return Err(TrainError::InvalidDataset(format!(
                    "pair {} has embedding dims {:?}, expected {:?}",
                    pair.pair_id, dims, e
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Runs every stage of the configured training and returns the final
/// stage's best adapters with the full per-epoch report.
pub fn run_training(
    config: &TrainConfig,
    datasets: &BTreeMap<String, Dataset>,
    clean_validation: &Dataset,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let started = Instant::now();

    let validation_pairs: Vec<&PairedExample> =
        clean_validation.split(Split::Validation).collect();
    if validation_pairs.is_empty() {
        return Err(TrainError::InvalidDataset(format!(
            "validation dataset {} has no validation split",
            clean_validation.name
        )));
    }

    // One consistent embedding geometry across all stages and validation.
    let mut dims = None;
    consistent_dims(&validation_pairs, &mut dims)?;
    let mut all_stage_pairs = Vec::with_capacity(config.stages.len());
    for stage in &config.stages {
        let pairs = stage_train_pairs(stage, datasets)?;
        consistent_dims(&pairs, &mut dims)?;
        all_stage_pairs.push(pairs);
    }
    let (audio_dim, text_dim) = dims.expect("validation split is non-empty");

    let config_hash = config.config_hash();
    let mut current: Option<(Adapter, Adapter)> = None;
    let mut stage_best = Vec::with_capacity(config.stages.len());
    let mut stage_reports = Vec::with_capacity(config.stages.len());

    for (stage_idx, stage) in config.stages.iter().enumerate() {
        let stage_no = stage_idx + 1;
        let train_pairs = &all_stage_pairs[stage_idx];
        if train_pairs.len() < 2 {
            return Err(TrainError::InvalidDataset(format!(
                "stage {stage_no}: need at least 2 training pairs, got {}",
                train_pairs.len()
            )));
        }

        let (mut audio, mut text) = if stage.inherit {
            current.clone().expect("validated: inheriting stages are never first")
        } else {
            (
                init_adapter(
                    audio_dim,
                    config.hidden_dim,
                    config.output_dim,
                    derive_seed(&[config.seed, stage_idx as u64, 1]),
                )?,
                init_adapter(
                    text_dim,
                    config.hidden_dim,
                    config.output_dim,
                    derive_seed(&[config.seed, stage_idx as u64, 2]),
                )?,
            )
        };
        let init_hash = param_hash(&audio, &text);

        // Fresh optimizer, scheduler, and stopper per stage: every stage
        // follows the full recipe from the top.
        let block_sizes: Vec<usize> = audio
            .param_blocks()
            .iter()
            .chain(text.param_blocks().iter())
            .map(|b| b.len())
            .collect();
        let mut adam = AdamState::new(config.lr0, &block_sizes)?;
        let mut sched = PlateauScheduler::new(config.lr0);
        let mut stopper = EarlyStopper::new();

        let mut best: Option<(Adapter, Adapter)> = None;
        let mut epochs = Vec::new();

        for epoch in 1..=config.max_epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                config.seed,
                stage_idx as u64,
                epoch as u64,
                3,
            ]));
            let batches = sample_epoch_batches(train_pairs.len(), config.batch_size, &mut rng)?;
            let covered: usize = batches.iter().map(|b| b.len()).sum();
            let dropped = train_pairs.len() - covered;

            let lr_in_effect = adam.lr();
            let mut loss_sum = 0.0;
            for batch_indices in &batches {
                let batch_pairs: Vec<&PairedExample> =
                    batch_indices.iter().map(|&i| train_pairs[i]).collect();
                let (value, audio_grads, text_grads, active) = batch_loss_and_param_grads(
                    &audio,
                    &text,
                    &batch_pairs,
                    config.loss,
                    config.mining,
                    config.temperature,
                )?;
                if !value.is_finite() {
                    return Err(TrainError::NumericalFailure(format!(
                        "stage {stage_no} epoch {epoch}: loss is {value}"
                    )));
                }
                loss_sum += value;
                if active == 0 {
                    continue; // nothing violated; a step would only add noise
                }
                let grad_blocks: Vec<&[f64]> = audio_grads
                    .blocks()
                    .into_iter()
                    .chain(text_grads.blocks())
                    .collect();
                let [a1, a2, a3, a4] = audio.param_blocks_mut();
                let [t1, t2, t3, t4] = text.param_blocks_mut();
                let mut param_blocks: [&mut [f64]; 8] = [a1, a2, a3, a4, t1, t2, t3, t4];
                adam.step(&mut param_blocks, &grad_blocks).map_err(|e| {
                    TrainError::NumericalFailure(format!(
                        "stage {stage_no} epoch {epoch}: {e}"
                    ))
                })?;
            }
            let train_loss = loss_sum / batches.len() as f64;

            let val_map10 = validation_map10(&audio, &text, clean_validation)?;
            let decision = scheduler_epoch_end(&mut sched, &mut stopper, val_map10)
                .map_err(|e| {
                    TrainError::NumericalFailure(format!(
                        "stage {stage_no} epoch {epoch}: {e}"
                    ))
                })?;
            if stopper.best_epoch() == epoch as u64 {
                best = Some((audio.clone(), text.clone()));
            }

            epochs.push(EpochRecord {
                epoch,
                train_loss,
                val_map10,
                lr: lr_in_effect,
                decision,
                batches: batches.len(),
                dropped_pairs: dropped,
            });

            match decision {
                EpochDecision::Continue => {}
                EpochDecision::ReduceLr => adam.set_lr(sched.current_lr()),
                EpochDecision::Stop => break,
            }
        }

        // The stage's product is the best checkpoint, whether the loop
        // stopped early or ran out of epochs.
        let (best_audio, best_text) = best.expect("at least one epoch ran");
        audio = best_audio;
        text = best_text;
        let best_hash = param_hash(&audio, &text);

        stage_reports.push(StageReport {
            stage: stage_no,
            kind: stage.kind,
            train_datasets: stage.train_datasets.clone(),
            train_pair_count: train_pairs.len(),
            init_param_hash: init_hash,
            best_param_hash: best_hash,
            best_epoch: stopper.best_epoch(),
            best_score: stopper.best_score().expect("at least one epoch ran"),
            epochs,
        });
        stage_best.push((audio.clone(), text.clone()));
        current = Some((audio, text));
    }

    let (audio, text) = current.expect("at least one stage ran");
    let last = stage_reports.last().expect("at least one stage ran");
    let report = TrainReport {
        config_hash,
        best_epoch: last.best_epoch,
        best_score: last.best_score,
        stages: stage_reports,
        wall_time: started.elapsed(),
    };
    Ok(TrainOutcome {
        audio,
        text,
        stage_best,
        report,
    })
}
