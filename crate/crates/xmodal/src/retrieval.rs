//! Text-to-audio ranking by cosine similarity and the retrieval metrics:
//! Recall@k, mAP@k, and jackknife 95% confidence intervals over queries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::cosine_similarity;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("audio index is empty")]
    EmptyIndex,
    #[error("duplicate audio id in index: {0}")]
    DuplicateAudioId(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("invalid metric config: {0}")]
    InvalidConfig(String),
}

/// Immutable collection of adapted audio embeddings to rank against.
#[derive(Debug, Clone)]
pub struct AudioIndex {
    entries: Vec<(String, Vec<f64>)>,
}

impl AudioIndex {
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Result<Self, RetrievalError> {
        if entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let dim = entries[0].1.len();
        let mut seen = BTreeSet::new();
        for (id, v) in &entries {
            if v.len() != dim {
                return Err(RetrievalError::DimensionMismatch(format!(
                    "audio {id} has dimension {}, index uses {dim}",
                    v.len()
                )));
            }
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::DuplicateAudioId(id.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false // rejected at construction
    }

    pub fn dim(&self) -> usize {
        self.entries[0].1.len()
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }
}

/// Ranks all indexed audio items against one query embedding, best first.
/// Ties are broken by ascending audio id so results are deterministic.
/// `k = None` returns the full permutation; `k` beyond the index size is
/// truncated to the index size.
pub fn rank(
    index: &AudioIndex,
    query: &[f64],
    k: Option<usize>,
) -> Result<Vec<(String, f64)>, RetrievalError> {
    if query.len() != index.dim() {
        return Err(RetrievalError::DimensionMismatch(format!(
            "query has dimension {}, index uses {}",
            query.len(),
            index.dim()
        )));
    }
    let mut scored: Vec<(String, f64)> = index
        .entries
        .iter()
        .map(|(id, v)| (id.clone(), cosine_similarity(query, v)))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("cosine similarities are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    let keep = k.map_or(scored.len(), |k| k.min(scored.len()));
    scored.truncate(keep);
    Ok(scored)
}

/// One evaluated query: its ranking over the index plus the ground-truth
/// relevant audio ids.
#[derive(Debug, Clone)]
pub struct RankedResult {
    pub query_id: String,
    pub ranking: Vec<(String, f64)>,
    pub relevant_ids: BTreeSet<String>,
}

fn per_query_recall(results: &[RankedResult], k: usize) -> Result<Vec<f64>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidConfig("k must be at least 1".into()));
    }
    results
        .iter()
        .map(|r| {
            if r.relevant_ids.is_empty() {
                return Err(RetrievalError::InvalidGroundTruth(format!(
                    "query {} has no relevant items",
                    r.query_id
                )));
            }
            let hits = r
                .ranking
                .iter()
                .take(k)
                .filter(|(id, _)| r.relevant_ids.contains(id))
                .count();
            Ok(hits as f64 / r.relevant_ids.len() as f64)
        })
        .collect()
}

fn per_query_ap(results: &[RankedResult], k: usize) -> Result<Vec<f64>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidConfig("k must be at least 1".into()));
    }
    results
        .iter()
        .map(|r| {
            if r.relevant_ids.is_empty() {
                return Err(RetrievalError::InvalidGroundTruth(format!(
                    "query {} has no relevant items",
                    r.query_id
                )));
            }
            let mut hits = 0usize;
            let mut precision_sum = 0.0;
            for (pos, (id, _)) in r.ranking.iter().take(k).enumerate() {
                if r.relevant_ids.contains(id) {
                    hits += 1;
                    precision_sum += hits as f64 / (pos + 1) as f64;
                }
            }
            let normalizer = r.relevant_ids.len().min(k) as f64;
            Ok(precision_sum / normalizer)
        })
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Fraction of each query's relevant items found in its top k, averaged
/// over queries.
pub fn recall_at_k(results: &[RankedResult], k: usize) -> Result<f64, RetrievalError> {
    if results.is_empty() {
        return Err(RetrievalError::InsufficientData("no ranked results".into()));
    }
    Ok(mean(&per_query_recall(results, k)?))
}

/// Mean average precision at k: per query, precision is accumulated at each
/// relevant rank within the top k and normalized by min(|relevant|, k).
pub fn map_at_k(results: &[RankedResult], k: usize) -> Result<f64, RetrievalError> {
    if results.is_empty() {
        return Err(RetrievalError::InsufficientData("no ranked results".into()));
    }
    Ok(mean(&per_query_ap(results, k)?))
}

/// Two-sided 95% Student-t critical values for df = 1..=200. Beyond the
/// table the normal approximation is used. Regenerate with
/// `scipy.stats.t.ppf(0.975, df)`.
const T_CRITICAL_975: [f64; 200] = [
    12.706204736, 4.302652730, 3.182446305, 2.776445105, 2.570581836,
    2.446911851, 2.364624252, 2.306004135, 2.262157163, 2.228138852,
    2.200985160, 2.178812830, 2.160368656, 2.144786688, 2.131449546,
    2.119905299, 2.109815578, 2.100922040, 2.093024054, 2.085963447,
    2.079613845, 2.073873068, 2.068657610, 2.063898562, 2.059538553,
    2.055529439, 2.051830516, 2.048407142, 2.045229642, 2.042272456,
    2.039513446, 2.036933343, 2.034515297, 2.032244509, 2.030107928,
    2.028094001, 2.026192463, 2.024394164, 2.022690920, 2.021075390,
    2.019540970, 2.018081703, 2.016692199, 2.015367574, 2.014103389,
    2.012895599, 2.011740514, 2.010634758, 2.009575237, 2.008559112,
    2.007583770, 2.006646805, 2.005745995, 2.004879288, 2.004044783,
    2.003240719, 2.002465459, 2.001717484, 2.000995378, 2.000297822,
    1.999623585, 1.998971517, 1.998340543, 1.997729654, 1.997137908,
    1.996564419, 1.996008354, 1.995468931, 1.994945415, 1.994437112,
    1.993943368, 1.993463567, 1.992997126, 1.992543495, 1.992102154,
    1.991672610, 1.991254395, 1.990847069, 1.990450210, 1.990063421,
    1.989686323, 1.989318557, 1.988959780, 1.988609667, 1.988267907,
    1.987934206, 1.987608282, 1.987289865, 1.986978700, 1.986674541,
    1.986377154, 1.986086317, 1.985801814, 1.985523442, 1.985251004,
    1.984984312, 1.984723186, 1.984467454, 1.984216952, 1.983971518,
    1.983731003, 1.983495258, 1.983264145, 1.983037526, 1.982815274,
    1.982597262, 1.982383370, 1.982173483, 1.981967490, 1.981765282,
    1.981566757, 1.981371815, 1.981180359, 1.980992298, 1.980807541,
    1.980626002, 1.980447599, 1.980272249, 1.980099876, 1.979930405,
    1.979763762, 1.979599878, 1.979438685, 1.979280117, 1.979124109,
    1.978970602, 1.978819535, 1.978670850, 1.978524491, 1.978380405,
    1.978238539, 1.978098842, 1.977961264, 1.977825758, 1.977692277,
    1.977560777, 1.977431212, 1.977303542, 1.977177724, 1.977053720,
    1.976931489, 1.976810994, 1.976692198, 1.976575066, 1.976459563,
    1.976345655, 1.976233309, 1.976122494, 1.976013178, 1.975905331,
    1.975798924, 1.975693928, 1.975590315, 1.975488058, 1.975387131,
    1.975287508, 1.975189163, 1.975092073, 1.974996213, 1.974901560,
    1.974808092, 1.974715786, 1.974624621, 1.974534576, 1.974445630,
    1.974357764, 1.974270957, 1.974185191, 1.974100447, 1.974016708,
    1.973933954, 1.973852169, 1.973771337, 1.973691440, 1.973612462,
    1.973534388, 1.973457202, 1.973380889, 1.973305434, 1.973230823,
    1.973157042, 1.973084077, 1.973011915, 1.972940542, 1.972869946,
    1.972800114, 1.972731033, 1.972662692, 1.972595079, 1.972528182,
    1.972461990, 1.972396491, 1.972331676, 1.972267533, 1.972204051,
    1.972141222, 1.972079034, 1.972017478, 1.971956544, 1.971896224,
];

const Z_CRITICAL_975: f64 = 1.959963985;

fn t_critical(df: usize) -> f64 {
    if df == 0 {
        return f64::INFINITY;
    }
    if df <= T_CRITICAL_975.len() {
        T_CRITICAL_975[df - 1]
    } else {
        Z_CRITICAL_975
    }
}

/// Jackknife estimate for the mean of per-query scores: point estimate,
/// standard error from leave-one-out resampling, and the 95% interval both
/// before and after clipping to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JackknifeEstimate {
    pub mean: f64,
    pub se: f64,
    pub half_width: f64,
    pub low: f64,
    pub high: f64,
}

pub fn jackknife_estimate(scores: &[f64]) -> Result<JackknifeEstimate, RetrievalError> {
    let n = scores.len();
    if n < 2 {
        return Err(RetrievalError::InsufficientData(format!(
            "jackknife needs at least 2 scores, got {n}"
        )));
    }
    let total: f64 = scores.iter().sum();
    let loo: Vec<f64> = scores
        .iter()
        .map(|&x| (total - x) / (n - 1) as f64)
        .collect();
    let loo_mean = mean(&loo);
    let ss: f64 = loo.iter().map(|&t| (t - loo_mean) * (t - loo_mean)).sum();
    let se = ((n - 1) as f64 / n as f64 * ss).sqrt();
    let half_width = t_critical(n - 1) * se;
    let sample_mean = total / n as f64;
    Ok(JackknifeEstimate {
        mean: sample_mean,
        se,
        half_width,
        low: (sample_mean - half_width).clamp(0.0, 1.0),
        high: (sample_mean + half_width).clamp(0.0, 1.0),
    })
}

/// The clipped 95% interval alone.
pub fn jackknife_ci(scores: &[f64]) -> Result<(f64, f64), RetrievalError> {
    let est = jackknife_estimate(scores)?;
    Ok((est.low, est.high))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// The four challenge metrics with their confidence intervals, plus the
/// query count they were computed over.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
    pub query_count: usize,
}

impl MetricReport {
    /// Computes R@1, R@5, R@10, and mAP@10 with jackknife intervals over the
    /// per-query scores.
    pub fn from_results(results: &[RankedResult]) -> Result<Self, RetrievalError> {
        let mut entries = Vec::with_capacity(4);
        for k in [1usize, 5, 10] {
            let scores = per_query_recall(results, k)?;
            if scores.is_empty() {
                return Err(RetrievalError::InsufficientData("no ranked results".into()));
            }
            let est = jackknife_estimate(&scores)?;
            entries.push(MetricEntry {
                metric: format!("recall@{k}"),
                value: est.mean,
                ci_low: est.low,
                ci_high: est.high,
            });
        }
        let scores = per_query_ap(results, 10)?;
        let est = jackknife_estimate(&scores)?;
        entries.push(MetricEntry {
            metric: "map@10".to_string(),
            value: est.mean,
            ci_low: est.low,
            ci_high: est.high,
        });
        Ok(Self {
            entries,
            query_count: results.len(),
        })
    }

    /// Tab-separated rendering with a fixed column order. Metric values are
    /// printed with three decimals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\tci_low\tci_high\tn\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{:.3}\t{:.3}\t{:.3}\t{}\n",
                e.metric, e.value, e.ci_low, e.ci_high, self.query_count
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
