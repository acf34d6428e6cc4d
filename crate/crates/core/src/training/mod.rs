//! Losses, the Adam update rule and the training loop.
//!
//! The regression loss is a weighted MSE in `log1p` space whose weights are
//! decided in raw mm/day: pixels at or above their 95th percentile count
//! `λ` times. The probability head is trained with binary cross-entropy
//! against the same exceedance labels.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::grid::ThresholdMap;
use crate::models::{Model, ModelError, Outputs, WindowedSet};
use crate::scalar::Scalar;

/// Probabilities are clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite prediction")]
    NonFinitePrediction,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss")]
    Diverged { epoch: usize, batch: usize },
}

impl TrainError {
    /// Whether the error comes from numerics rather than from the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinitePrediction
                | TrainError::Diverged { .. }
                | TrainError::Model(ModelError::NonFiniteState { .. })
                | TrainError::Autodiff(AutodiffError::NonFinite(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight `λ` of pixels at or above their 95th percentile.
    pub lambda_extreme: f64,
    /// Weight `α` of the exceedance cross-entropy.
    pub bce_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_extreme: 5.0, bce_weight: 1.0, learning_rate: 3e-3, epochs: 20, batch_size: 8 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !self.lambda_extreme.is_finite() || self.lambda_extreme < 1.0 {
            return bad(format!("lambda_extreme = {} must be at least 1", self.lambda_extreme));
        }
        if !self.bce_weight.is_finite() || self.bce_weight < 0.0 {
            return bad(format!("bce_weight = {} must be non-negative", self.bce_weight));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad(format!("learning_rate = {} must be non-negative", self.learning_rate));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Mean losses over one epoch's minibatches, weighted by batch size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
    pub bce: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
    /// Where the trained parameters were saved, if they were.
    pub checkpoint: Option<PathBuf>,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn total_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total).collect()
    }

    /// `epoch,total,mse,bce` rows. Wall time is left out so reruns compare
    /// byte for byte.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total,mse,bce\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.total, e.mse, e.bce);
        }
        out
    }
}

/// Checks that `target` matches the prediction and that both end in the
/// threshold grid, which repeats over the batch.
fn check_batch<T: Scalar>(pred: &[usize], target: &Tensor<T>, thr: &ThresholdMap<T>) -> Result<(), TrainError> {
    let numel: usize = pred.iter().product();
    if target.numel() != numel || target.shape() != pred {
        return Err(TrainError::Shape(format!("prediction {pred:?} vs target {:?}", target.shape())));
    }
    let (h, w) = (thr.spec().height(), thr.spec().width());
    if pred.len() < 2 || pred[pred.len() - 2..] != [h, w] {
        return Err(TrainError::Shape(format!("prediction {pred:?} does not end in the {h}x{w} threshold grid")));
    }
    Ok(())
}

/// Exceedance labels `y ≥ P95` for a batch of raw targets.
pub fn exceedance_labels<T: Scalar>(target: &Tensor<T>, thr: &ThresholdMap<T>) -> Vec<bool> {
    let p95 = thr.p95();
    target.data().iter().enumerate().map(|(i, &y)| y >= p95[i % p95.len()]).collect()
}

/// `(1/N)·Σ w·(log1p(y) − pred)²` with `w = λ` where raw `y ≥ P95`, else 1.
pub fn extreme_weighted_mse<'t, T: Scalar>(
    tape: &'t Tape<T>,
    pred_log: Var<'t, T>,
    target: &Tensor<T>,
    thr: &ThresholdMap<T>,
    lambda: T,
) -> Result<Var<'t, T>, TrainError> {
    let shape = pred_log.shape();
    check_batch(&shape, target, thr)?;
    if !pred_log.value().all_finite() {
        return Err(TrainError::NonFinitePrediction);
    }
    let labels = exceedance_labels(target, thr);
    let y = tape.constant(target.map(|v| v.ln_1p()));
    let w = Tensor::new(shape, labels.iter().map(|&e| if e { lambda } else { T::one() }).collect())?;
    let r = tape.sub(y, pred_log)?;
    let weighted = tape.mul(tape.mul(r, r)?, tape.constant(w))?;
    Ok(tape.mean(weighted)?)
}

/// Mean binary cross-entropy of `prob` against `y ≥ P95`, with `prob`
/// clamped to `[1e−7, 1 − 1e−7]`.
pub fn exceedance_bce<'t, T: Scalar>(
    tape: &'t Tape<T>,
    prob: Var<'t, T>,
    target: &Tensor<T>,
    thr: &ThresholdMap<T>,
) -> Result<Var<'t, T>, TrainError> {
    let shape = prob.shape();
    check_batch(&shape, target, thr)?;
    let labels = exceedance_labels(target, thr);
    let eps = T::lit(BCE_CLAMP);
    let p = tape.clamp(prob, eps, T::one() - eps)?;
    let yes = Tensor::new(shape.clone(), labels.iter().map(|&e| if e { T::one() } else { T::zero() }).collect())?;
    let no = yes.map(|v| T::one() - v);
    let ln_p = tape.log(p)?;
    let ln_q = tape.log(tape.shift(tape.scale(p, -T::one())?, T::one())?)?;
    let ll = tape.add(tape.mul(ln_p, tape.constant(yes))?, tape.mul(ln_q, tape.constant(no))?)?;
    Ok(tape.scale(tape.mean(ll)?, -T::one())?)
}

/// Loss graph split into its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossParts<'t, T> {
    pub total: Var<'t, T>,
    pub mse: Var<'t, T>,
    pub bce: Var<'t, T>,
}

/// `extreme_weighted_mse + α·exceedance_bce`.
pub fn total_loss<'t, T: Scalar>(
    tape: &'t Tape<T>,
    out: &Outputs<'t, T>,
    target: &Tensor<T>,
    thr: &ThresholdMap<T>,
    cfg: &LossConfig,
) -> Result<LossParts<'t, T>, TrainError> {
    let mse = extreme_weighted_mse(tape, out.log_intensity, target, thr, T::lit(cfg.lambda_extreme))?;
    let bce = exceedance_bce(tape, out.exceed_prob, target, thr)?;
    let total = tape.add(mse, tape.scale(bce, T::lit(cfg.bce_weight))?)?;
    Ok(LossParts { total, mse, bce })
}

/// Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e−8` and bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: T) -> Self {
        Self {
            learning_rate,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Updates each parameter from its gradient, in matching order.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<(), TrainError> {
        if params.len() != grads.len() {
            return Err(TrainError::Shape(format!("{} parameters vs {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(TrainError::Shape("parameter set changed between steps".into()));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(TrainError::Shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((w, &g), m), v) in iter {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Mean `log1p` rainfall and the fraction of `y ≥ P95` pixels over the
/// targets of `train`.
pub fn climatology<T: Scalar>(train: &WindowedSet<T>, thr: &ThresholdMap<T>) -> (T, T) {
    let (mut sum, mut hits, mut n) = (0.0f64, 0usize, 0usize);
    for i in 0..train.len() {
        for (&y, &q) in train.target(i).values().iter().zip(thr.p95()) {
            sum += y.to_f64_lossy().ln_1p();
            hits += usize::from(y >= q);
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    (T::lit(sum / n), T::lit(hits as f64 / n))
}

/// The fixed sample order used by every epoch.
pub fn epoch_order(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Trains `model` in place. Parameter groups named in `frozen` are held
/// fixed. See [`fit_with_progress`].
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &WindowedSet<T>,
    thr: &ThresholdMap<T>,
    cfg: &LossConfig,
    frozen: &[&str],
) -> Result<TrainReport, TrainError> {
    fit_with_progress(model, train, thr, cfg, frozen, |_| {})
}

/// Minibatch Adam over a permutation seeded from the model seed and reused
/// every epoch. `progress` sees each epoch's losses as they complete.
pub fn fit_with_progress<T: Scalar>(
    model: &mut Model<T>,
    train: &WindowedSet<T>,
    thr: &ThresholdMap<T>,
    cfg: &LossConfig,
    frozen: &[&str],
    mut progress: impl FnMut(&EpochLoss),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Shape("training split holds no samples".into()));
    }
    if train.spec() != model.spec() || thr.spec() != model.spec() {
        return Err(TrainError::Shape("training data, thresholds and model lie on different grids".into()));
    }
    if train.history() != model.config().history_t {
        return Err(TrainError::Shape(format!(
            "data history {} vs model history {}",
            train.history(),
            model.config().history_t
        )));
    }
    let start = Instant::now();
    let order = epoch_order(train.len(), model.config().seed);
    let trainable: Vec<String> = model.params().names().filter(|n| !frozen.contains(n)).map(str::to_string).collect();
    let mut adam = Adam::new(T::lit(cfg.learning_rate));
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let (mut total, mut mse, mut bce) = (0.0, 0.0, 0.0);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let tape = Tape::new();
            let p = model.params().bind(&tape, frozen);
            let x = tape.constant(train.input_batch(chunk));
            let diverged = |e: TrainError| if e.is_numerical() { TrainError::Diverged { epoch, batch } } else { e };
            let out = model.forward(&tape, &p, x).map_err(|e| diverged(e.into()))?;
            let loss = total_loss(&tape, &out, &train.target_batch(chunk), thr, cfg).map_err(diverged)?;
            let value = loss.total.item().unwrap_or(T::nan());
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, batch });
            }
            let grads = tape.backward(loss.total)?;
            let grads: Vec<Tensor<T>> =
                trainable.iter().map(|n| p.get(n).map(|v| grads.get_or_zeros(v))).collect::<Result<_, _>>()?;
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(TrainError::Diverged { epoch, batch });
            }
            let weight = chunk.len() as f64;
            total += weight * value.to_f64_lossy();
            mse += weight * loss.mse.item().unwrap_or(T::nan()).to_f64_lossy();
            bce += weight * loss.bce.item().unwrap_or(T::nan()).to_f64_lossy();
            drop(p);
            drop(tape);

            let mut params: Vec<&mut Tensor<T>> = model
                .params_mut()
                .iter_mut()
                .filter(|(n, _)| trainable.iter().any(|t| t == n))
                .map(|(_, t)| t)
                .collect();
            adam.step(&mut params, &grads)?;
        }
        let n = train.len() as f64;
        let e = EpochLoss { epoch, total: total / n, mse: mse / n, bce: bce / n };
        progress(&e);
        epochs.push(e);
    }
    Ok(TrainReport { epochs, checkpoint: None, wall_seconds: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests;
