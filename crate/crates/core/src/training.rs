//! SGD with momentum, step learning-rate schedule and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::LabeledData;
use crate::models::{ModelError, PsnetModel};
use crate::psn::project_positive;
use crate::tensor::TensorError;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch {epoch} out of range 1..={epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("non-finite value at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("NaN in gradient of {param}")]
    NanGradient { param: String },
    #[error("gradient shape for {param} does not match parameter")]
    Shape { param: String },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    /// 1-based epochs at which the rate is divided by `drop_factor`.
    pub drop_epochs: Vec<usize>,
    pub drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 20,
            lr0: 0.01,
            drop_epochs: vec![8, 12, 16],
            drop_factor: 10.0,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.drop_factor > 0.0 && self.drop_factor.is_finite()) {
            return bad(format!("drop_factor must be positive, got {}", self.drop_factor));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "drop_epochs must be strictly increasing: {:?}",
                self.drop_epochs
            ));
        }
        if let Some(e) = self.drop_epochs.iter().find(|&&e| e == 0 || e > self.epochs) {
            return bad(format!("drop epoch {e} outside [1, {}]", self.epochs));
        }
        Ok(())
    }
}

/// `lr0 / drop_factor^(number of drop epochs <= epoch)`, epoch 1-based.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    let drops = cfg.drop_epochs.iter().filter(|&&e| e <= epoch).count() as i32;
    Ok(cfg.lr0 / cfg.drop_factor.powi(drops))
}

/// Momentum buffers, one per model parameter, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(model: &PsnetModel<T>) -> Self {
        Self {
            velocity: model
                .params()
                .iter()
                .map(|p| vec![T::zero(); p.tensor.numel()])
                .collect(),
        }
    }
}

/// `v <- momentum * v + grad; param <- param - lr * v`, then projection onto
/// `[PARAM_FLOOR, inf)` when `positive`.
pub fn sgd_momentum_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
    positive: bool,
) -> std::result::Result<(), TensorError> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(TensorError::Invalid(format!(
            "sgd step: param {}, grad {}, velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    if grad.iter().any(|g| g.is_nan()) {
        return Err(TensorError::NonFinite {
            op: "sgd_momentum_step",
        });
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
        if positive {
            *p = project_positive(*p);
        }
    }
    Ok(())
}

/// Optimizer state plus the global iteration counter.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    cfg: TrainConfig,
    state: OptimState<T>,
    iteration: u64,
}

/// Per-batch result of [`Trainer::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: &PsnetModel<T>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            state: OptimState::new(model),
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn state(&self) -> &OptimState<T> {
        &self.state
    }

    /// Forward, backward and one SGD update on `indices` of `data`.
    pub fn step(
        &mut self,
        model: &mut PsnetModel<T>,
        data: &LabeledData<T>,
        indices: &[usize],
        lr: f64,
    ) -> Result<StepStats> {
        let (batch, labels) = data.batch(indices);
        let out = model.train_step(&batch, &labels, self.iteration)?;
        if !out.loss.is_finite() {
            return Err(TensorError::NonFinite { op: "loss" }.into());
        }
        let (lr, mu, wd) = (T::lit(lr), T::lit(self.cfg.momentum), T::lit(self.cfg.weight_decay));
        for ((p, g), v) in model
            .params_mut()
            .iter_mut()
            .zip(out.grads)
            .zip(&mut self.state.velocity)
        {
            let Some(mut g) = g else { continue };
            if wd > T::zero() {
                for (gi, &pi) in g.iter_mut().zip(p.tensor.data()) {
                    *gi += wd * pi;
                }
            }
            let positive = p.positive;
            sgd_momentum_step(p.tensor.data_mut(), &g, v, lr, mu, positive).map_err(|e| match e {
                TensorError::NonFinite { .. } => TrainError::NanGradient { param: p.name.clone() },
                _ => TrainError::Shape { param: p.name.clone() },
            })?;
        }
        self.iteration += 1;
        Ok(StepStats {
            loss: out.loss.as_f64(),
            correct: out.correct,
        })
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean batch loss.
    pub train_loss: f64,
    pub train_acc: f64,
    /// PSN parameters at the end of the epoch; `None` when PSN is disabled.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
}

fn is_non_finite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::NanGradient { .. } | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Shuffle order RNG: seeded from `cfg.seed` on a stream distinct from
/// parameter initialization.
pub fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch SGD, keeping the last
/// partial batch. Updates `model` in place and returns per-epoch metrics.
pub fn train<T: Scalar>(
    model: &mut PsnetModel<T>,
    data: &LabeledData<T>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut trainer = Trainer::new(model, cfg)?;
    let mut rng = shuffle_rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let s = trainer.step(model, data, idx, lr).map_err(|e| {
                if is_non_finite(&e) {
                    TrainError::NonFinite {
                        epoch,
                        batch,
                        detail: e.to_string(),
                    }
                } else {
                    e
                }
            })?;
            loss_sum += s.loss * idx.len() as f64;
            correct += s.correct;
        }
        let psn = model.psn_params();
        history.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            alpha: psn.as_ref().map(|p| p.alpha().as_f64()),
            beta: psn.as_ref().map(|p| p.beta().as_f64()),
            gamma: psn.as_ref().map(|p| p.gamma().as_f64()),
        });
    }
    Ok(history)
}
