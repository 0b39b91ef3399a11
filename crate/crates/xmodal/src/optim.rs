//! Adam, the reduce-on-plateau learning-rate schedule, and early stopping.
//!
//! The scheduler and stopper are driven once per epoch by the validation
//! score (higher is better). Improvement means a strict increase; the
//! plateau counter resets after each reduction while the stop counter only
//! resets on improvement, so "ten epochs with no improvement" holds
//! literally regardless of how many reductions happened in between.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid metric: {0}")]
    InvalidMetric(String),
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam over a list of parameter blocks. The block layout is
/// fixed at construction and must match every subsequent step call.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, block_sizes: &[usize]) -> Result<Self, OptimError> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(OptimError::InvalidConfig(format!(
                "learning rate must be positive and finite, got {lr}"
            )));
        }
        Ok(Self {
            lr,
            step_count: 0,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update in place. On a non-finite gradient the state and
    /// parameters are left untouched.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
    ) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::ShapeMismatch(format!(
                "expected {} blocks, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (b, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.len() != self.m[b].len() || g.len() != self.m[b].len() {
                return Err(OptimError::ShapeMismatch(format!(
                    "block {b}: expected {} entries, got {} params / {} grads",
                    self.m[b].len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        // Validate before touching any state so a failed step is a no-op.
        for (b, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NumericalFailure(format!(
                    "non-finite gradient in block {b}"
                )));
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - BETA1.powi(t);
        let bias2 = 1.0 - BETA2.powi(t);
        for (b, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let m = &mut self.m[b];
            let v = &mut self.v[b];
            for i in 0..g.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

/// Divides the learning rate by 10 after five consecutive epochs without
/// improvement. The rate after k reductions is exactly lr0 / 10^k.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr0: f64,
    reductions: u32,
    patience: u32,
    epochs_since_improvement: u32,
    best_score: Option<f64>,
}

impl PlateauScheduler {
    pub fn new(lr0: f64) -> Self {
        Self {
            lr0,
            reductions: 0,
            patience: 5,
            epochs_since_improvement: 0,
            best_score: None,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.lr0 / 10f64.powi(self.reductions as i32)
    }

    pub fn reductions(&self) -> u32 {
        self.reductions
    }
}

/// Signals a stop after ten consecutive epochs without improvement and
/// remembers which epoch held the best score, so the caller can revert to
/// that checkpoint.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: u32,
    epoch: u64,
    best_epoch: u64,
    best_score: Option<f64>,
    epochs_since_improvement: u32,
}

impl EarlyStopper {
    pub fn new() -> Self {
        Self {
            patience: 10,
            epoch: 0,
            best_epoch: 0,
            best_score: None,
            epochs_since_improvement: 0,
        }
    }

    pub fn best_epoch(&self) -> u64 {
        self.best_epoch
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best_score
    }
}

impl Default for EarlyStopper {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochDecision {
    Continue,
    /// The caller must lower the optimizer's rate to `current_lr()`.
    ReduceLr,
    /// The caller must revert weights to the best checkpoint and end the stage.
    Stop,
}

/// Feeds one epoch's validation score (mAP@10, higher is better) through the
/// scheduler and the stopper. Improvement is a strict increase over the best
/// score seen so far; the first score always counts as an improvement. When
/// the stop and reduction thresholds are hit in the same epoch, stopping
/// wins.
pub fn scheduler_epoch_end(
    sched: &mut PlateauScheduler,
    stopper: &mut EarlyStopper,
    val_score: f64,
) -> Result<EpochDecision, OptimError> {
    if !val_score.is_finite() {
        return Err(OptimError::InvalidMetric(format!(
            "validation score is {val_score}"
        )));
    }
    stopper.epoch += 1;
    let improved = match stopper.best_score {
        None => true,
        Some(best) => val_score > best,
    };
    if improved {
        sched.best_score = Some(val_score);
        sched.epochs_since_improvement = 0;
        stopper.best_score = Some(val_score);
        stopper.best_epoch = stopper.epoch;
        stopper.epochs_since_improvement = 0;
        return Ok(EpochDecision::Continue);
    }

    sched.epochs_since_improvement += 1;
    stopper.epochs_since_improvement += 1;
    if stopper.epochs_since_improvement >= stopper.patience {
        return Ok(EpochDecision::Stop);
    }
    if sched.epochs_since_improvement >= sched.patience {
        sched.reductions += 1;
        sched.epochs_since_improvement = 0;
        return Ok(EpochDecision::ReduceLr);
    }
    Ok(EpochDecision::Continue)
}
