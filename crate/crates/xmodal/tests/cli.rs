//! Behavior tests for the command-line surface, driven through the real
//! binary: preprocessing, evaluation against known-geometry datasets, and
//! ad-hoc retrieval output.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use xmodal::adapter::{init_adapter, save_checkpoint, Checkpoint, CheckpointMetadata};
use xmodal::data::{
    Dataset, EmbeddingSequence, Modality, NoiseTier, PairedExample, Split,
};
use xmodal::numerics::Matrix;
use xmodal::retrieval::{rank, AudioIndex};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_xmodal")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).unwrap()
}

fn stderr(output: &Output) -> String {
    String::from_utf8(output.stderr.clone()).unwrap()
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

#[test]
fn preprocess_cleans_and_counts_records() {
    let dir = tempfile::tempdir().unwrap();
    let long: String = "x".repeat(600);
    let input = [
        json!({"item_id": "r1", "description": "<b>dog bark</b>", "tags": ["dog", " bark "]}),
        json!({"item_id": "r2", "description": "a &amp; b", "tags": []}),
        json!({"item_id": "r3", "description": long, "tags": ["one"]}),
    ]
    .map(|v| v.to_string())
    .join("\n");
    fs::write(dir.path().join("raw.jsonl"), &input).unwrap();

    let output = run_in(
        dir.path(),
        &["preprocess", "--input", "raw.jsonl", "--output", "clean.jsonl"],
    );
    assert!(output.status.success());
    assert!(
        stderr(&output).contains("3 records (1 truncated)"),
        "summary was: {}",
        stderr(&output)
    );

    let cleaned = fs::read_to_string(dir.path().join("clean.jsonl")).unwrap();
    let lines: Vec<Value> = cleaned
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["description"], "dog bark");
    assert_eq!(lines[0]["tags"], "dog bark");
    assert_eq!(lines[1]["description"], "a & b");
    assert_eq!(lines[2]["description"].as_str().unwrap().chars().count(), 500);

    // Inputs are never mutated.
    assert_eq!(fs::read_to_string(dir.path().join("raw.jsonl")).unwrap(), input);
}

#[test]
fn preprocess_rejects_malformed_line_with_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let input = format!(
        "{}\nnot json at all\n",
        json!({"item_id": "r1", "description": "ok", "tags": []})
    );
    fs::write(dir.path().join("raw.jsonl"), input).unwrap();

    let output = run_in(
        dir.path(),
        &["preprocess", "--input", "raw.jsonl", "--output", "clean.jsonl"],
    );
    assert_eq!(output.status.code(), Some(2));
    assert!(
        stderr(&output).contains("line 2"),
        "diagnostic was: {}",
        stderr(&output)
    );
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn seq(id: &str, modality: Modality, data: Matrix) -> EmbeddingSequence {
    EmbeddingSequence::new(id, modality, data).unwrap()
}

/// Test-split dataset whose text embeddings are exact copies of their audio
/// embeddings; with identical adapters on both towers, every query's own
/// audio scores cosine 1.
fn perfectly_aligned_dataset(n: usize, dim: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let examples = (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..dim).map(|_| common::normal(&mut rng)).collect();
            let data = Matrix::from_rows(&[row]);
            PairedExample::new(
                format!("pa-p{i}"),
                seq(&format!("pa-a{i}"), Modality::Audio, data.clone()),
                seq(&format!("pa-t{i}"), Modality::Text, data),
                Split::Test,
            )
            .unwrap()
        })
        .collect();
    Dataset {
        name: "aligned".to_string(),
        noise_tier: NoiseTier::Clean,
        examples,
    }
}

fn write_checkpoint(path: &Path, audio_seed: u64, text_seed: u64, dims: (usize, usize, usize, usize)) {
    let (audio_dim, text_dim, hidden, output) = dims;
    let checkpoint = Checkpoint {
        audio: init_adapter(audio_dim, hidden, output, audio_seed).unwrap(),
        text: init_adapter(text_dim, hidden, output, text_seed).unwrap(),
        metadata: CheckpointMetadata {
            epoch: 0,
            score: 0.0,
            config_hash: "none".to_string(),
        },
    };
    save_checkpoint(path, &checkpoint).unwrap();
}

fn metric_entries(output: &Output) -> Vec<(String, f64, f64, f64)> {
    let report: Value = serde_json::from_str(&stdout(output)).unwrap();
    report["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| {
            (
                e["metric"].as_str().unwrap().to_string(),
                e["value"].as_f64().unwrap(),
                e["ci_low"].as_f64().unwrap(),
                e["ci_high"].as_f64().unwrap(),
            )
        })
        .collect()
}

#[test]
fn evaluate_perfect_alignment_scores_one_with_zero_width_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = perfectly_aligned_dataset(6, 16);
    let manifest = common::write_dataset_files(dir.path(), &dataset);
    // Same seed on both towers: identical adapters, so equal inputs map to
    // equal outputs.
    write_checkpoint(&dir.path().join("model.ckpt"), 5, 5, (16, 16, 8, 8));

    let output = run_in(
        dir.path(),
        &[
            "evaluate",
            "--checkpoint",
            "model.ckpt",
            "--manifest",
            manifest.file_name().unwrap().to_str().unwrap(),
            "--format",
            "json",
        ],
    );
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let entries = metric_entries(&output);
    let names: Vec<&str> = entries.iter().map(|e| e.0.as_str()).collect();
    assert_eq!(names, ["recall@1", "recall@5", "recall@10", "map@10"]);
    for (metric, value, lo, hi) in &entries {
        assert_eq!(*value, 1.0, "{metric} value");
        assert_eq!(*lo, 1.0, "{metric} ci_low");
        assert_eq!(*hi, 1.0, "{metric} ci_high");
    }
}

/// Random (untrained) adapters rank arbitrarily, so recall@1 sits at the
/// 1/n chance level in expectation. Checked over 20 seeds against a
/// three-sigma window, with sigma the larger of the binomial value and the
/// empirical spread.
#[test]
fn evaluate_untrained_checkpoint_scores_at_chance_level() {
    let dir = tempfile::tempdir().unwrap();
    let n = 8usize;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let examples = (0..n)
        .map(|i| {
            let audio: Vec<f64> = (0..12).map(|_| common::normal(&mut rng)).collect();
            let text: Vec<f64> = (0..12).map(|_| common::normal(&mut rng)).collect();
            PairedExample::new(
                format!("ch-p{i}"),
                seq(&format!("ch-a{i}"), Modality::Audio, Matrix::from_rows(&[audio])),
                seq(&format!("ch-t{i}"), Modality::Text, Matrix::from_rows(&[text])),
                Split::Test,
            )
            .unwrap()
        })
        .collect();
    let dataset = Dataset {
        name: "chance".to_string(),
        noise_tier: NoiseTier::Clean,
        examples,
    };
    common::write_dataset_files(dir.path(), &dataset);

    let mut r1_values = Vec::new();
    for seed in 0..20u64 {
        let ckpt = format!("model-{seed}.ckpt");
        write_checkpoint(&dir.path().join(&ckpt), seed, 1000 + seed, (12, 12, 6, 6));
        let output = run_in(
            dir.path(),
            &[
                "evaluate",
                "--checkpoint",
                &ckpt,
                "--manifest",
                "manifest.jsonl",
                "--format",
                "json",
            ],
        );
        assert!(output.status.success(), "stderr: {}", stderr(&output));
        let entries = metric_entries(&output);
        assert_eq!(entries[0].0, "recall@1");
        r1_values.push(entries[0].1);
    }

    let runs = r1_values.len() as f64;
    let mean = r1_values.iter().sum::<f64>() / runs;
    let p = 1.0 / n as f64;
    let binomial_sigma = (p * (1.0 - p) / (runs * n as f64)).sqrt();
    let sample_var =
        r1_values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (runs - 1.0);
    let empirical_sigma = (sample_var / runs).sqrt();
    let sigma = binomial_sigma.max(empirical_sigma);
    assert!(
        (mean - p).abs() <= 3.0 * sigma,
        "mean recall@1 {mean:.4} not within 3 sigma ({sigma:.4}) of {p:.4}"
    );
}

#[test]
fn evaluate_rejects_mismatched_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = perfectly_aligned_dataset(4, 16);
    common::write_dataset_files(dir.path(), &dataset);
    // Checkpoint built for 10-dim audio against 16-dim embeddings.
    write_checkpoint(&dir.path().join("model.ckpt"), 5, 6, (10, 16, 8, 8));

    let output = run_in(
        dir.path(),
        &["evaluate", "--checkpoint", "model.ckpt", "--manifest", "manifest.jsonl"],
    );
    assert_eq!(output.status.code(), Some(2));
}

// ---------------------------------------------------------------------------
// retrieve
// ---------------------------------------------------------------------------

fn retrieval_workspace() -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let examples = (0..3)
        .map(|i| {
            let audio: Vec<f64> = (0..10).map(|_| common::normal(&mut rng)).collect();
            let text: Vec<f64> = (0..10).map(|_| common::normal(&mut rng)).collect();
            PairedExample::new(
                format!("rt-p{i}"),
                seq(&format!("rt-a{i}"), Modality::Audio, Matrix::from_rows(&[audio])),
                seq(&format!("rt-t{i}"), Modality::Text, Matrix::from_rows(&[text])),
                Split::Test,
            )
            .unwrap()
        })
        .collect();
    let dataset = Dataset {
        name: "rindex".to_string(),
        noise_tier: NoiseTier::Clean,
        examples,
    };
    common::write_dataset_files(dir.path(), &dataset);
    // Identical towers so a query equal to an audio embedding adapts to an
    // identical vector.
    write_checkpoint(&dir.path().join("model.ckpt"), 9, 9, (10, 10, 6, 6));
    (dir, dataset)
}

#[test]
fn retrieve_top_one_is_the_single_best_match() {
    let (dir, _) = retrieval_workspace();
    // Query = the raw embedding of rt-a1, so its adapted vector matches
    // that index entry exactly.
    fs::copy(
        dir.path().join("embeddings/rt-a1.bin"),
        dir.path().join("query.bin"),
    )
    .unwrap();

    let output = run_in(
        dir.path(),
        &[
            "retrieve",
            "--checkpoint",
            "model.ckpt",
            "--index",
            "manifest.jsonl",
            "--query-embedding",
            "query.bin",
            "--k",
            "1",
        ],
    );
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let lines: Vec<String> = stdout(&output).lines().map(String::from).collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0], "1\trt-a1\t1.000000");
}

#[test]
fn retrieve_ordering_matches_the_ranking_module() {
    let (dir, dataset) = retrieval_workspace();
    fs::copy(
        dir.path().join("embeddings/rt-t0.bin"),
        dir.path().join("query.bin"),
    )
    .unwrap();

    let output = run_in(
        dir.path(),
        &[
            "retrieve",
            "--checkpoint",
            "model.ckpt",
            "--index",
            "manifest.jsonl",
            "--query-embedding",
            "query.bin",
            "--k",
            "3",
        ],
    );
    assert!(output.status.success(), "stderr: {}", stderr(&output));

    // Recompute through the library: same checkpoint, same distinct-audio
    // index in manifest order, same query.
    let checkpoint = xmodal::adapter::load_checkpoint(&dir.path().join("model.ckpt")).unwrap();
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for example in &dataset.examples {
        if seen.insert(example.audio.item_id.clone()) {
            // Round-trip through the written file: the CLI saw f32 values.
            let loaded = xmodal::data::read_embedding_file(
                &dir.path().join(format!("embeddings/{}.bin", example.audio.item_id)),
                example.audio.item_id.clone(),
                Modality::Audio,
            )
            .unwrap();
            let (out, _) = checkpoint.audio.forward(loaded.data()).unwrap();
            entries.push((example.audio.item_id.clone(), out));
        }
    }
    let index = AudioIndex::new(entries).unwrap();
    let query = xmodal::data::read_embedding_file(
        &dir.path().join("query.bin"),
        "query",
        Modality::Text,
    )
    .unwrap();
    let (adapted, _) = checkpoint.text.forward(query.data()).unwrap();
    let expected: Vec<String> = rank(&index, &adapted, Some(3))
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, (id, score))| format!("{}\t{}\t{:.6}", i + 1, id, score))
        .collect();

    let lines: Vec<String> = stdout(&output).lines().map(String::from).collect();
    assert_eq!(lines, expected);
}

#[test]
fn retrieve_clamps_oversized_k_with_a_warning() {
    let (dir, _) = retrieval_workspace();
    fs::copy(
        dir.path().join("embeddings/rt-t0.bin"),
        dir.path().join("query.bin"),
    )
    .unwrap();

    let output = run_in(
        dir.path(),
        &[
            "retrieve",
            "--checkpoint",
            "model.ckpt",
            "--index",
            "manifest.jsonl",
            "--query-embedding",
            "query.bin",
            "--k",
            "10",
        ],
    );
    assert!(output.status.success());
    assert_eq!(stdout(&output).lines().count(), 3);
    assert!(
        stderr(&output).contains("clamping"),
        "warning was: {}",
        stderr(&output)
    );
}

// ---------------------------------------------------------------------------
// train (strategy not already covered by the acceptance checks) and help
// ---------------------------------------------------------------------------

#[test]
fn train_pretrain_finetune_strategy_runs_both_pools_then_clean() {
    let dir = tempfile::tempdir().unwrap();
    let clean = common::generate(&common::SyntheticSpec::small("clean", "c", 51, NoiseTier::Clean));
    let noisy = common::generate(&common::SyntheticSpec::small("noisy", "n", 52, NoiseTier::Noisy));
    common::write_dataset_files(&dir.path().join("clean"), &clean);
    common::write_dataset_files(&dir.path().join("noisy"), &noisy);
    let config = json!({
        "seed": 3,
        "batch_size": 8,
        "lr0": 0.001,
        "max_epochs": 4,
        "hidden_dim": 12,
        "output_dim": 8,
        "datasets": {
            "clean": {"manifest": "clean/manifest.jsonl", "noise_tier": "clean"},
            "noisy": {"manifest": "noisy/manifest.jsonl", "noise_tier": "noisy"}
        },
        "clean_dataset": "clean",
        "noisy_dataset": "noisy"
    });
    fs::write(
        dir.path().join("config.json"),
        serde_json::to_string(&config).unwrap(),
    )
    .unwrap();

    let output = run_in(
        dir.path(),
        &["train", "--config", "config.json", "--strategy", "ATAE-EP-F", "--out", "run"],
    );
    assert!(output.status.success(), "stderr: {}", stderr(&output));

    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/report.json")).unwrap())
            .unwrap();
    let stages = report["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 2);
    assert_eq!(stages[0]["train_datasets"], json!(["clean", "noisy"]));
    assert_eq!(stages[0]["train_pair_count"], 32);
    assert_eq!(stages[1]["train_datasets"], json!(["clean"]));
    assert_eq!(stages[1]["kind"], "finetune");
    assert!(dir.path().join("run/stage_2_best.ckpt").exists());
    assert!(dir.path().join("run/final_best.ckpt").exists());

    // The same config without a noisy pool cannot run this strategy.
    let slim = json!({
        "seed": 3,
        "batch_size": 8,
        "max_epochs": 4,
        "datasets": {"clean": {"manifest": "clean/manifest.jsonl", "noise_tier": "clean"}},
        "clean_dataset": "clean"
    });
    fs::write(dir.path().join("slim.json"), serde_json::to_string(&slim).unwrap()).unwrap();
    let output = run_in(
        dir.path(),
        &["train", "--config", "slim.json", "--strategy", "ATAE-EP-F", "--out", "run2"],
    );
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for args in [
        vec!["--help"],
        vec!["preprocess", "--help"],
        vec!["train", "--help"],
        vec!["evaluate", "--help"],
        vec!["retrieve", "--help"],
    ] {
        let output = Command::new(bin()).args(&args).output().unwrap();
        assert_eq!(output.status.code(), Some(0), "args: {args:?}");
        assert!(!stdout(&output).is_empty());
    }
}
