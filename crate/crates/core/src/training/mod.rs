//! Data generation, the regression loss, the optimizer loop and checkpoints.

mod checkpoint;
mod dataset;
mod loss;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION};
pub use dataset::{format_float, sample_dataset, Dataset, DatasetError, DatasetMeta};
pub use loss::{dataset_loss, kernel, loss_and_gradient, loss_value, record_loss};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, ParamVector};
use crate::models::{CoilsModel, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("diverged in epoch {epoch}: loss {loss:e} exceeds 1e6 × initial {initial:e}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
    #[error("dataset has shape {got:?}, model expects ({n}, {m})")]
    Shape { n: usize, m: usize, got: (usize, usize) },
}

/// Plain mini-batch gradient descent with global-norm clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Training is single-threaded with a fixed reduction order, so results
    /// are always reproducible; the flag is kept in the record.
    pub deterministic: bool,
    /// Fraction of samples held out for reporting only.
    pub holdout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-4, batch_size: 256, epochs: 200, clip_norm: 1.0, seed: 0, deterministic: true, holdout: 0.1 }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted so that a run can be checked to leave parameters
    /// untouched.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad(format!("holdout must lie in [0, 1), got {}", self.holdout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based, counting any epochs completed before a resume.
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch.
    pub train: f64,
    pub holdout: Option<f64>,
    /// Largest pre-clip gradient norm seen in the epoch.
    pub max_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_train: f64,
    pub initial_holdout: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
}

/// Scales `grad` in place so its Euclidean norm is at most `clip`; returns
/// the norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], clip: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip {
        let s = clip / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Holdout rows first, then training rows; both depend only on `seed`.
fn split(len: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let h = ((len as f64) * holdout).floor() as usize;
    let h = h.min(len.saturating_sub(1));
    let train = idx.split_off(h);
    (idx, train)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub fn train(model: &mut CoilsModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    train_from(model, data, cfg, 0, |_| {})
}

/// Runs `cfg.epochs` epochs numbered from `first_epoch + 1`. Shuffles are
/// keyed by `(seed, epoch)`, so stopping and resuming gives the same result
/// as one uninterrupted run.
pub fn train_from(
    model: &mut CoilsModel,
    data: &Dataset,
    cfg: &TrainConfig,
    first_epoch: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let (n, m) = (model.state_dim(), model.control_dim());
    if data.state_dim() != n || data.control_dim() != m {
        return Err(TrainError::Shape { n, m, got: (data.state_dim(), data.control_dim()) });
    }
    if data.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let (hold_idx, train_idx) = split(data.len(), cfg.holdout, cfg.seed);
    let train_set = data.select(&train_idx);
    let hold_set = (!hold_idx.is_empty()).then(|| data.select(&hold_idx));
    let chunk = cfg.batch_size.max(1024);
    let holdout_loss = |model: &CoilsModel| hold_set.as_ref().map(|h| dataset_loss(model, h, chunk)).transpose();

    let initial_train = dataset_loss(model, &train_set, chunk)?;
    let initial_holdout = holdout_loss(model)?;
    let limit = 1e6 * initial_train;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for e in 0..cfg.epochs {
        let epoch = first_epoch + e + 1;
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut sum = 0.0;
        let mut max_norm: f64 = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let batch = train_set.select(rows);
            let (loss, mut grad) = loss_and_gradient(model, &batch)?;
            if loss > limit {
                return Err(TrainError::Diverged { epoch, loss, initial: initial_train });
            }
            max_norm = max_norm.max(clip_global_norm(&mut grad, cfg.clip_norm));
            let mut theta = ParamVector::gather(&model.networks());
            for (t, g) in theta.values.iter_mut().zip(&grad) {
                *t -= cfg.lr * g;
            }
            theta.scatter(&mut model.networks_mut())?;
            sum += loss * rows.len() as f64;
            steps += 1;
        }
        let record =
            EpochRecord { epoch, train: sum / train_set.len() as f64, holdout: holdout_loss(model)?, max_grad_norm: max_norm };
        if !record.train.is_finite() || record.holdout.is_some_and(|h| !h.is_finite()) {
            return Err(TrainError::NonFiniteLoss);
        }
        if record.train > limit {
            return Err(TrainError::Diverged { epoch, loss: record.train, initial: initial_train });
        }
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainReport { initial_train, initial_holdout, history, steps })
}
