//! The per-modality adapter: mean-pool an embedding sequence, then map it
//! through a two-layer perceptron (ReLU after the first layer) into the
//! shared space. Forward and backward passes are written out analytically;
//! checkpoints serialize both adapters plus run metadata.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{mean_pool, Matrix};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XMCK";
pub const CHECKPOINT_FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid adapter config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("forward cache does not match this adapter: {0}")]
    InvalidCache(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad checkpoint format: {0}")]
    Format(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Two-layer perceptron applied to the pooled input:
/// `out = W2 * relu(W1 * x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

/// Intermediate activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pooled: Vec<f64>,
    preactivation: Vec<f64>,
    hidden: Vec<f64>,
}

impl ForwardCache {
    /// Hidden-layer preactivations. Exposed so callers validating
    /// gradients numerically can detect inputs near the ReLU kink, where
    /// finite differences stop being a trustworthy oracle.
    pub fn preactivation(&self) -> &[f64] {
        &self.preactivation
    }
}

/// Gradients of a scalar loss with respect to every adapter parameter.
#[derive(Debug, Clone)]
pub struct AdapterGradients {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl AdapterGradients {
    pub fn zeros_like(adapter: &Adapter) -> Self {
        Self {
            w1: Matrix::zeros(adapter.hidden_dim(), adapter.input_dim()),
            b1: vec![0.0; adapter.hidden_dim()],
            w2: Matrix::zeros(adapter.output_dim(), adapter.hidden_dim()),
            b2: vec![0.0; adapter.output_dim()],
        }
    }

    /// Adds `other`, scaled by `weight`, into self. Used to accumulate
    /// per-item gradients over a batch.
    pub fn accumulate(&mut self, other: &AdapterGradients, weight: f64) {
        let pairs = [
            (self.w1.data_mut(), other.w1.data()),
            (self.w2.data_mut(), other.w2.data()),
        ];
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += weight * s;
            }
        }
        for (d, s) in self.b1.iter_mut().zip(&other.b1) {
            *d += weight * s;
        }
        for (d, s) in self.b2.iter_mut().zip(&other.b2) {
            *d += weight * s;
        }
    }

    pub fn blocks(&self) -> [&[f64]; 4] {
        [self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }
}

/// Creates an adapter with weights drawn uniformly from
/// `[-1/sqrt(fan_in), +1/sqrt(fan_in)]` and zero biases.
pub fn init_adapter(
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    seed: u64,
) -> Result<Adapter, AdapterError> {
    if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
        return Err(AdapterError::InvalidConfig(format!(
            "dimensions must be positive, got {input_dim} x {hidden_dim} x {output_dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound1 = 1.0 / (input_dim as f64).sqrt();
    let bound2 = 1.0 / (hidden_dim as f64).sqrt();
    let w1_data: Vec<f64> = (0..hidden_dim * input_dim)
        .map(|_| rng.random_range(-bound1..=bound1))
        .collect();
    let w2_data: Vec<f64> = (0..output_dim * hidden_dim)
        .map(|_| rng.random_range(-bound2..=bound2))
        .collect();
    Ok(Adapter {
        w1: Matrix::new(hidden_dim, input_dim, w1_data),
        b1: vec![0.0; hidden_dim],
        w2: Matrix::new(output_dim, hidden_dim, w2_data),
        b2: vec![0.0; output_dim],
    })
}

impl Adapter {
    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    /// Maps a T x F sequence to the shared space. The sequence is mean-pooled
    /// first, so the perceptron runs once per item regardless of T.
    pub fn forward(&self, seq: &Matrix) -> Result<(Vec<f64>, ForwardCache), AdapterError> {
        if seq.cols() != self.input_dim() {
            return Err(AdapterError::ShapeError(format!(
                "sequence has {} columns, adapter expects {}",
                seq.cols(),
                self.input_dim()
            )));
        }
        let pooled = mean_pool(seq);
        let mut preactivation = self.w1.matvec(&pooled);
        for (z, b) in preactivation.iter_mut().zip(&self.b1) {
            *z += b;
        }
        let hidden: Vec<f64> = preactivation
            .iter()
            .map(|&z| if z > 0.0 { z } else { 0.0 })
            .collect();
        let mut output = self.w2.matvec(&hidden);
        for (o, b) in output.iter_mut().zip(&self.b2) {
            *o += b;
        }
        Ok((
            output,
            ForwardCache {
                pooled,
                preactivation,
                hidden,
            },
        ))
    }

    /// Backpropagates `output_grad` = dL/d(output) through the perceptron.
    /// The ReLU subgradient at exactly zero is taken as zero. The gradient
    /// with respect to the input is not computed; upstream encoders are
    /// frozen by assumption.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
    ) -> Result<AdapterGradients, AdapterError> {
        if cache.pooled.len() != self.input_dim()
            || cache.preactivation.len() != self.hidden_dim()
            || cache.hidden.len() != self.hidden_dim()
        {
            return Err(AdapterError::InvalidCache(format!(
                "cache dims ({}, {}) vs adapter ({}, {})",
                cache.pooled.len(),
                cache.hidden.len(),
                self.input_dim(),
                self.hidden_dim()
            )));
        }
        if output_grad.len() != self.output_dim() {
            return Err(AdapterError::InvalidCache(format!(
                "output grad has {} entries, adapter produces {}",
                output_grad.len(),
                self.output_dim()
            )));
        }

        let mut grads = AdapterGradients::zeros_like(self);
        grads.w2.add_outer(output_grad, &cache.hidden);
        grads.b2.copy_from_slice(output_grad);

        let hidden_grad = self.w2.matvec_transpose(output_grad);
        let preact_grad: Vec<f64> = hidden_grad
            .iter()
            .zip(&cache.preactivation)
            .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
            .collect();

        grads.w1.add_outer(&preact_grad, &cache.pooled);
        grads.b1.copy_from_slice(&preact_grad);
        Ok(grads)
    }

    /// Parameter blocks in serialization order (W1, b1, W2, b2), mutable.
    /// The optimizer walks these in lockstep with [`AdapterGradients::blocks`].
    pub fn param_blocks_mut(&mut self) -> [&mut [f64]; 4] {
        let Adapter { w1, b1, w2, b2 } = self;
        [w1.data_mut(), b1, w2.data_mut(), b2]
    }

    pub fn param_blocks(&self) -> [&[f64]; 4] {
        [self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }

    /// All parameters flattened in serialization order. Paired with
    /// [`Adapter::set_flat_params`] for finite-difference testing.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for block in self.param_blocks() {
            out.extend_from_slice(block);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for block in self.param_blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter vector length mismatch");
    }

    pub fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|b| b.len()).sum()
    }
}

/// Metadata stored alongside the adapter weights in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub epoch: u64,
    pub score: f64,
    pub config_hash: String,
}

/// A pair of adapters (audio first, text second) plus run metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub audio: Adapter,
    pub text: Adapter,
    pub metadata: CheckpointMetadata,
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    for adapter in [&checkpoint.audio, &checkpoint.text] {
        bytes.extend_from_slice(&(adapter.input_dim() as u32).to_le_bytes());
        bytes.extend_from_slice(&(adapter.hidden_dim() as u32).to_le_bytes());
        bytes.extend_from_slice(&(adapter.output_dim() as u32).to_le_bytes());
        for block in adapter.param_blocks() {
            for v in block {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let metadata = serde_json::to_vec(&checkpoint.metadata)
        .map_err(|e| CheckpointError::Format(format!("metadata serialization: {e}")))?;
    bytes.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&metadata);

    let mut file = fs::File::create(path).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    file.write_all(&bytes).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut file = fs::File::open(path).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;

    let mut reader = ByteReader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if reader.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Format(format!(
            "{}: bad magic bytes",
            path.display()
        )));
    }
    let version = reader.u16()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(CheckpointError::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }

    let mut adapters = Vec::with_capacity(2);
    for _ in 0..2 {
        let f = reader.u32()? as usize;
        let h = reader.u32()? as usize;
        let f_out = reader.u32()? as usize;
        if f == 0 || h == 0 || f_out == 0 {
            return Err(CheckpointError::Corrupt(format!(
                "{}: zero adapter dimension",
                path.display()
            )));
        }
        let w1 = Matrix::new(h, f, reader.f64_vec(h * f)?);
        let b1 = reader.f64_vec(h)?;
        let w2 = Matrix::new(f_out, h, reader.f64_vec(f_out * h)?);
        let b2 = reader.f64_vec(f_out)?;
        let adapter = Adapter { w1, b1, w2, b2 };
        if adapter.param_blocks().iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(CheckpointError::Corrupt(format!(
                "{}: non-finite parameter",
                path.display()
            )));
        }
        adapters.push(adapter);
    }

    let metadata_len = reader.u32()? as usize;
    let metadata_bytes = reader.take(metadata_len)?;
    if reader.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - reader.pos
        )));
    }
    let metadata: CheckpointMetadata = serde_json::from_slice(metadata_bytes)
        .map_err(|e| CheckpointError::Corrupt(format!("{}: metadata: {e}", path.display())))?;

    let text = adapters.pop().expect("two adapters read");
    let audio = adapters.pop().expect("two adapters read");
    Ok(Checkpoint {
        audio,
        text,
        metadata,
    })
}
