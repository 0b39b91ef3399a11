//! Shared helpers for integration tests: a synthetic paired-dataset
//! generator built on a common latent space, and writers that lay the
//! datasets out on disk in manifest + binary-embedding form.

// Each integration test binary compiles this module separately and uses a
// different subset of it.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use xmodal::data::{
    write_embedding_file, Dataset, EmbeddingSequence, Modality, NoiseTier, PairedExample, Split,
};
use xmodal::numerics::Matrix;

/// Standard normal draw via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 > 1e-12 {
            let u2: f64 = rng.random();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// A linear map with N(0, 1/cols) entries, so mapped vectors keep
/// per-coordinate magnitudes near one.
fn random_map(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows)
        .map(|_| (0..cols).map(|_| scale * normal(rng)).collect())
        .collect()
}

fn apply_map(map: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    map.iter()
        .map(|row| row.iter().zip(z).map(|(m, zi)| m * zi).sum())
        .collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub name: String,
    /// Prefix for pair/item ids, so two generated datasets never collide.
    pub id_prefix: String,
    pub pairs: usize,
    pub latent_dim: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    /// Per-coordinate noise added to each sequence row of both views.
    pub noise: f64,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub seed: u64,
    pub noise_tier: NoiseTier,
}

impl SyntheticSpec {
    /// The setup used by the end-to-end experiments: 256 pairs from a
    /// 16-dim latent, audio view 2048-d, text view 768-d, noise 0.05,
    /// split 192/32/32.
    pub fn standard(seed: u64) -> Self {
        SyntheticSpec {
            name: "synthetic".to_string(),
            id_prefix: "syn".to_string(),
            pairs: 256,
            latent_dim: 16,
            audio_dim: 2048,
            text_dim: 768,
            noise: 0.05,
            train: 192,
            validation: 32,
            test: 32,
            seed,
            noise_tier: NoiseTier::Clean,
        }
    }

    /// A light variant for CLI round trips: same structure, small dims.
    pub fn small(name: &str, id_prefix: &str, seed: u64, noise_tier: NoiseTier) -> Self {
        SyntheticSpec {
            name: name.to_string(),
            id_prefix: id_prefix.to_string(),
            pairs: 24,
            latent_dim: 6,
            audio_dim: 40,
            text_dim: 32,
            noise: 0.05,
            train: 16,
            validation: 4,
            test: 4,
            seed,
            noise_tier,
        }
    }
}

/// Generates paired audio/text embedding sequences as two noisy linear
/// views of one latent vector per pair. Sequence lengths cycle through
/// 1..=3 so mean pooling is exercised.
pub fn generate(spec: &SyntheticSpec) -> Dataset {
    assert_eq!(spec.train + spec.validation + spec.test, spec.pairs);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let audio_map = random_map(spec.audio_dim, spec.latent_dim, &mut rng);
    let text_map = random_map(spec.text_dim, spec.latent_dim, &mut rng);

    let mut examples = Vec::with_capacity(spec.pairs);
    for i in 0..spec.pairs {
        let z: Vec<f64> = (0..spec.latent_dim).map(|_| normal(&mut rng)).collect();
        let split = if i < spec.train {
            Split::Train
        } else if i < spec.train + spec.validation {
            Split::Validation
        } else {
            Split::Test
        };

        let mut views = Vec::new();
        for (map, dim) in [(&audio_map, spec.audio_dim), (&text_map, spec.text_dim)] {
            let base = apply_map(map, &z);
            let t = 1 + i % 3;
            let rows: Vec<Vec<f64>> = (0..t)
                .map(|_| {
                    (0..dim)
                        .map(|d| base[d] + spec.noise * normal(&mut rng))
                        .collect()
                })
                .collect();
            views.push(Matrix::from_rows(&rows));
        }
        let text_data = views.pop().unwrap();
        let audio_data = views.pop().unwrap();

        let audio_id = format!("{}-a{i:04}", spec.id_prefix);
        let text_id = format!("{}-t{i:04}", spec.id_prefix);
        let audio = EmbeddingSequence::new(&audio_id, Modality::Audio, audio_data).unwrap();
        let text = EmbeddingSequence::new(&text_id, Modality::Text, text_data).unwrap();
        examples.push(
            PairedExample::new(format!("{}-p{i:04}", spec.id_prefix), audio, text, split)
                .unwrap(),
        );
    }
    Dataset {
        name: spec.name.clone(),
        noise_tier: spec.noise_tier,
        examples,
    }
}

/// Writes a dataset to disk as a manifest plus binary embedding files and
/// returns the manifest path. Layout: `<dir>/manifest.jsonl` with paths
/// relative to `<dir>`, embeddings under `<dir>/embeddings/`.
pub fn write_dataset_files(dir: &Path, dataset: &Dataset) -> PathBuf {
    let emb_dir = dir.join("embeddings");
    fs::create_dir_all(&emb_dir).unwrap();
    let mut lines = Vec::new();
    for example in &dataset.examples {
        for seq in [&example.audio, &example.text] {
            let path = emb_dir.join(format!("{}.bin", seq.item_id));
            if !path.exists() {
                write_embedding_file(&path, seq).unwrap();
            }
        }
        let record = json!({
            "pair_id": example.pair_id,
            "audio_id": example.audio.item_id,
            "audio_embedding": format!("embeddings/{}.bin", example.audio.item_id),
            "text_id": example.text.item_id,
            "text_embedding": format!("embeddings/{}.bin", example.text.item_id),
            "split": example.split,
        });
        lines.push(serde_json::to_string(&record).unwrap());
    }
    let manifest = dir.join("manifest.jsonl");
    fs::write(&manifest, lines.join("\n") + "\n").unwrap();
    manifest
}
