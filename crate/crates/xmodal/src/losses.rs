//! Contrastive and NT-Xent losses over a minibatch of adapted embeddings,
//! with analytic gradients with respect to every embedding.
//!
//! Both losses score pairs by cosine similarity. The pair-mining policy
//! decides which pairs participate: cross-modal only, or additionally all
//! within-modality combinations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{axpy, cosine_gradient_wrt_a, cosine_similarity_flagged};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMiningPolicy {
    /// Cross-modal pairs plus every audio-audio and text-text combination.
    AllPairs,
    /// Audio-text pairs only.
    CrossModalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Contrastive,
    NtXent,
}

/// One aligned row of a minibatch: the adapted audio and text embeddings of
/// a training pair, sharing the pair's label.
#[derive(Debug, Clone)]
pub struct BatchRow {
    pub label: String,
    pub audio: Vec<f64>,
    pub text: Vec<f64>,
}

/// A minibatch of adapted embeddings. Row i's audio and text share a label,
/// so row-aligned cross-modal pairs are always positives.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    labels: Vec<String>,
    audio: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
}

impl BatchEmbeddings {
    pub fn new(rows: Vec<BatchRow>) -> Result<Self, LossError> {
        if rows.is_empty() {
            return Err(LossError::InvalidBatch("empty batch".into()));
        }
        let dim = rows[0].audio.len();
        if dim == 0 {
            return Err(LossError::InvalidBatch("zero-dimensional embeddings".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.audio.len() != dim || row.text.len() != dim {
                return Err(LossError::InvalidBatch(format!(
                    "row {i} dimensions ({}, {}) differ from {dim}",
                    row.audio.len(),
                    row.text.len()
                )));
            }
            if row.audio.iter().chain(&row.text).any(|v| !v.is_finite()) {
                return Err(LossError::InvalidBatch(format!(
                    "row {i} contains non-finite values"
                )));
            }
        }
        let mut labels = Vec::with_capacity(rows.len());
        let mut audio = Vec::with_capacity(rows.len());
        let mut text = Vec::with_capacity(rows.len());
        for row in rows {
            labels.push(row.label);
            audio.push(row.audio);
            text.push(row.text);
        }
        Ok(Self {
            labels,
            audio,
            text,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false // guaranteed non-empty by the constructor
    }

    pub fn dim(&self) -> usize {
        self.audio[0].len()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    fn vector(&self, item: Item) -> &[f64] {
        match item {
            Item::Audio(i) => &self.audio[i],
            Item::Text(i) => &self.text[i],
        }
    }

    fn item_label(&self, item: Item) -> &str {
        match item {
            Item::Audio(i) | Item::Text(i) => &self.labels[i],
        }
    }
}

/// Loss value plus gradients, aligned with the batch rows.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub audio_grads: Vec<Vec<f64>>,
    pub text_grads: Vec<Vec<f64>>,
    /// Contrastive: pairs with strictly positive loss. NT-Xent: anchor count.
    pub active_pair_count: usize,
}

impl LossOutput {
    fn zeros(batch: &BatchEmbeddings) -> Self {
        Self {
            value: 0.0,
            audio_grads: vec![vec![0.0; batch.dim()]; batch.len()],
            text_grads: vec![vec![0.0; batch.dim()]; batch.len()],
            active_pair_count: 0,
        }
    }

    fn grad_mut(&mut self, item: Item) -> &mut [f64] {
        match item {
            Item::Audio(i) => &mut self.audio_grads[i],
            Item::Text(i) => &mut self.text_grads[i],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Item {
    Audio(usize),
    Text(usize),
}

/// Enumerates the unordered pairs a policy admits: every (audio_i, text_j)
/// combination, and under AllPairs also all distinct within-modality pairs.
fn enumerate_pairs(b: usize, policy: PairMiningPolicy) -> Vec<(Item, Item)> {
    let mut pairs = Vec::new();
    for i in 0..b {
        for j in 0..b {
            pairs.push((Item::Audio(i), Item::Text(j)));
        }
    }
    if policy == PairMiningPolicy::AllPairs {
        for i in 0..b {
            for j in (i + 1)..b {
                pairs.push((Item::Audio(i), Item::Audio(j)));
            }
        }
        for i in 0..b {
            for j in (i + 1)..b {
                pairs.push((Item::Text(i), Item::Text(j)));
            }
        }
    }
    pairs
}

/// Pairwise loss: same-label pairs are pulled toward similarity 1
/// (loss 1 - s), different-label pairs are pushed to similarity <= 0
/// (loss max(0, s)). The batch value is the mean over pairs whose loss is
/// strictly positive; if no pair contributes, the value and all gradients
/// are zero and the caller should skip its optimizer step.
pub fn contrastive_loss(
    batch: &BatchEmbeddings,
    policy: PairMiningPolicy,
) -> Result<LossOutput, LossError> {
    let pairs = enumerate_pairs(batch.len(), policy);

    // First pass: which pairs are active, and the total loss.
    let mut active: Vec<(Item, Item, f64, bool)> = Vec::new();
    let mut total = 0.0;
    for &(u, v) in &pairs {
        let (s, _) = cosine_similarity_flagged(batch.vector(u), batch.vector(v));
        let positive = batch.item_label(u) == batch.item_label(v);
        let loss = if positive { 1.0 - s } else { s.max(0.0) };
        if loss > 0.0 {
            total += loss;
            active.push((u, v, s, positive));
        }
    }

    let mut out = LossOutput::zeros(batch);
    if active.is_empty() {
        return Ok(out);
    }
    let count = active.len();
    out.value = total / count as f64;
    out.active_pair_count = count;

    // d(value)/ds per active pair: -1/count for positives, +1/count for
    // negatives (a negative is only active where its loss equals s > 0).
    let inv = 1.0 / count as f64;
    for (u, v, _, positive) in active {
        let coeff = if positive { -inv } else { inv };
        let du = cosine_gradient_wrt_a(batch.vector(u), batch.vector(v));
        axpy(out.grad_mut(u), coeff, &du);
        let dv = cosine_gradient_wrt_a(batch.vector(v), batch.vector(u));
        axpy(out.grad_mut(v), coeff, &dv);
    }
    Ok(out)
}

/// Candidate set for one NT-Xent anchor: all opposite-modality items under
/// CrossModalOnly, or all other items of both modalities under AllPairs.
/// The anchor's row-aligned positive is always among the candidates.
fn candidates(anchor: Item, b: usize, policy: PairMiningPolicy) -> Vec<Item> {
    let mut out = Vec::new();
    match policy {
        PairMiningPolicy::CrossModalOnly => match anchor {
            Item::Audio(_) => out.extend((0..b).map(Item::Text)),
            Item::Text(_) => out.extend((0..b).map(Item::Audio)),
        },
        PairMiningPolicy::AllPairs => {
            for j in 0..b {
                if Item::Audio(j) != anchor {
                    out.push(Item::Audio(j));
                }
            }
            for j in 0..b {
                if Item::Text(j) != anchor {
                    out.push(Item::Text(j));
                }
            }
        }
    }
    out
}

/// Normalized temperature-scaled cross entropy. Every audio and every text
/// item anchors once; each anchor must pick its row-aligned positive out of
/// its candidate set via a softmax over cosine similarities divided by the
/// temperature. The value is the mean over all 2B anchors.
pub fn nt_xent_loss(
    batch: &BatchEmbeddings,
    policy: PairMiningPolicy,
    temperature: f64,
) -> Result<LossOutput, LossError> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(LossError::InvalidConfig(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let b = batch.len();
    let mut anchors: Vec<Item> = Vec::with_capacity(2 * b);
    anchors.extend((0..b).map(Item::Audio));
    anchors.extend((0..b).map(Item::Text));

    let mut out = LossOutput::zeros(batch);
    out.active_pair_count = anchors.len();
    let anchor_weight = 1.0 / anchors.len() as f64;

    let mut total = 0.0;
    for &anchor in &anchors {
        let positive = match anchor {
            Item::Audio(i) => Item::Text(i),
            Item::Text(i) => Item::Audio(i),
        };
        let cands = candidates(anchor, b, policy);
        let logits: Vec<f64> = cands
            .iter()
            .map(|&c| {
                cosine_similarity_flagged(batch.vector(anchor), batch.vector(c)).0 / temperature
            })
            .collect();
        let pos_logit =
            cosine_similarity_flagged(batch.vector(anchor), batch.vector(positive)).0
                / temperature;

        // Log-sum-exp with max shift for stability.
        let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|&l| (l - max_logit).exp()).sum();
        let lse = max_logit + sum_exp.ln();
        total += lse - pos_logit;

        // d(anchor loss)/ds_c = (softmax_c - [c = positive]) / temperature.
        for (&cand, &logit) in cands.iter().zip(&logits) {
            let mut ds = (logit - lse).exp();
            if cand == positive {
                ds -= 1.0;
            }
            let coeff = anchor_weight * ds / temperature;
            let d_anchor = cosine_gradient_wrt_a(batch.vector(anchor), batch.vector(cand));
            axpy(out.grad_mut(anchor), coeff, &d_anchor);
            let d_cand = cosine_gradient_wrt_a(batch.vector(cand), batch.vector(anchor));
            axpy(out.grad_mut(cand), coeff, &d_cand);
        }
    }
    out.value = total * anchor_weight;
    Ok(out)
}

/// Dispatches to the configured loss.
pub fn compute_loss(
    kind: LossKind,
    batch: &BatchEmbeddings,
    policy: PairMiningPolicy,
    temperature: f64,
) -> Result<LossOutput, LossError> {
    match kind {
        LossKind::Contrastive => contrastive_loss(batch, policy),
        LossKind::NtXent => nt_xent_loss(batch, policy, temperature),
    }
}
