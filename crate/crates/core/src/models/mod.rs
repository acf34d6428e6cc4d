//! Forecasting models: the physics-gated latent ODE, a ConvLSTM baseline and
//! persistence.
//!
//! Both learned models map a batch of `T` normalized history days,
//! `[N, 6·T, H, W]` with day-major channel order, to a rainfall forecast
//! `τ` days after the last history day. They share the dual-head decoder:
//! a linear head for `log1p` intensity and a sigmoid head for the
//! probability of exceeding the local 95th percentile.

mod checkpoint;
mod convlstm;
mod data;
mod params;
mod pglode;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::grid::{GridError, GridSpec, RainField, ThresholdMap, N_PREDICTORS};
use crate::scalar::Scalar;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CheckpointError,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use convlstm::{convlstm_encode_day, convlstm_step};
pub use data::WindowedSet;
pub use params::{BoundParams, ParamStore};
pub use pglode::{decode, encode, integrate_gated_rk4, latent_derivative, physics_gate};

/// Spatial reduction between the input grid and the latent grid.
pub const DOWNSAMPLE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("grid {height}x{width} is not divisible by {DOWNSAMPLE}")]
    IndivisibleGrid { height: usize, width: usize },
    #[error("non-finite latent state after RK4 step {step}")]
    NonFiniteState { step: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("missing parameter group {0:?}")]
    MissingParam(String),
    #[error("unknown model {0:?}; valid models: pg-lode, convlstm")]
    UnknownModel(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    PgLode,
    ConvLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::PgLode, ModelKind::ConvLstm];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PgLode => "pg-lode",
            ModelKind::ConvLstm => "convlstm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| ModelError::UnknownModel(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// History length `T` in days.
    pub history_t: usize,
    /// Forecast lead `τ` in days.
    pub lead_tau: usize,
    /// Latent channels `L`; also the ConvLSTM hidden width.
    pub latent_channels: usize,
    /// Width of the hidden layer of the latent derivative.
    pub hidden_channels: usize,
    pub rk4_steps: usize,
    pub seed: u64,
    /// Initial gate amplitude `β`.
    pub beta_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            history_t: 3,
            lead_tau: 1,
            latent_channels: 16,
            hidden_channels: 32,
            rk4_steps: 8,
            seed: 42,
            beta_init: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.history_t < 1 {
            return bad("history_t must be at least 1");
        }
        if self.lead_tau < 1 {
            return bad("lead_tau must be at least 1");
        }
        if self.rk4_steps < 1 {
            return bad("rk4_steps must be at least 1");
        }
        if self.latent_channels < 2 || self.hidden_channels < 1 {
            return bad("latent_channels must be at least 2 and hidden_channels at least 1");
        }
        if !self.beta_init.is_finite() {
            return bad("beta_init must be finite");
        }
        Ok(())
    }

    /// Width of the last decoder block and of the ConvLSTM day encoder.
    pub fn encoder_channels(&self) -> usize {
        self.latent_channels / 2
    }

    pub fn input_channels(&self) -> usize {
        N_PREDICTORS * self.history_t
    }
}

/// Model output for one day.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast<T> {
    spec: GridSpec,
    log_intensity: Vec<T>,
    intensity: Vec<T>,
    exceed_prob: Vec<T>,
}

impl<T: Scalar> Forecast<T> {
    /// Forecast from `log1p` intensities; raw intensities are recovered
    /// with `expm1`.
    pub fn new(spec: GridSpec, log_intensity: Vec<T>, exceed_prob: Vec<T>) -> Result<Self, ModelError> {
        let intensity = log_intensity.iter().map(|v| v.exp_m1()).collect();
        Self::with_intensity(spec, log_intensity, intensity, exceed_prob)
    }

    /// Forecast from raw intensities, kept exactly alongside their `log1p`.
    pub fn from_intensity(spec: GridSpec, intensity: Vec<T>, exceed_prob: Vec<T>) -> Result<Self, ModelError> {
        let log_intensity = intensity.iter().map(|v| v.ln_1p()).collect();
        Self::with_intensity(spec, log_intensity, intensity, exceed_prob)
    }

    fn with_intensity(
        spec: GridSpec,
        log_intensity: Vec<T>,
        intensity: Vec<T>,
        exceed_prob: Vec<T>,
    ) -> Result<Self, ModelError> {
        spec.check_len(log_intensity.len())?;
        spec.check_len(exceed_prob.len())?;
        if let Some(p) = exceed_prob.iter().find(|p| !(**p >= T::zero() && **p <= T::one())) {
            return Err(ModelError::Shape(format!("exceedance probability {p} outside [0, 1]")));
        }
        if log_intensity.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Shape("non-finite log intensity".into()));
        }
        Ok(Self { spec, log_intensity, intensity, exceed_prob })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Predicted `log1p` rainfall.
    pub fn log_intensity(&self) -> &[T] {
        &self.log_intensity
    }

    /// Predicted rainfall in mm/day.
    pub fn intensity(&self) -> &[T] {
        &self.intensity
    }

    pub fn exceed_prob(&self) -> &[T] {
        &self.exceed_prob
    }
}

/// Graph outputs of a learned model, each `[N, 1, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct Outputs<'t, T> {
    pub log_intensity: Var<'t, T>,
    pub exceed_prob: Var<'t, T>,
}

/// A learned model: architecture, configuration and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    kind: ModelKind,
    config: ModelConfig,
    spec: GridSpec,
    params: ParamStore<T>,
    gated: bool,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialised model for inputs on `spec`.
    pub fn new(kind: ModelKind, config: ModelConfig, spec: GridSpec) -> Result<Self, ModelError> {
        config.validate()?;
        check_divisible(spec.height(), spec.width())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = match kind {
            ModelKind::PgLode => pglode::init_params(&config, &mut rng),
            ModelKind::ConvLstm => convlstm::init_params(&config, &mut rng),
        };
        Ok(Self { kind, config, spec, params, gated: true })
    }

    pub fn from_parts(
        kind: ModelKind,
        config: ModelConfig,
        spec: GridSpec,
        params: ParamStore<T>,
        gated: bool,
    ) -> Result<Self, ModelError> {
        let reference = Self::new(kind, config.clone(), spec)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            if got.shape() != t.shape() {
                return Err(ModelError::Shape(format!(
                    "parameter {name}: {:?} vs expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(ModelError::Shape(format!(
                "{} parameter groups, expected {}",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(Self { kind, config, spec, params, gated })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Whether the physics gate is part of the graph (PG-LODE only).
    pub fn is_gated(&self) -> bool {
        self.kind == ModelKind::PgLode && self.gated
    }

    /// The same model with the gate branch removed from the graph.
    pub fn without_gate(&self) -> Self {
        Self { gated: false, ..self.clone() }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Sets the output head biases to the given mean `log1p` rainfall and
    /// exceedance rate so training starts from the climatology.
    pub fn set_output_biases(&mut self, mean_log: T, exceed_rate: T) {
        let eps = T::lit(1e-3);
        let rate = exceed_rate.max(eps).min(T::one() - eps);
        if let Some(b) = self.params.get_mut("head_int.b") {
            b.data_mut()[0] = mean_log;
        }
        if let Some(b) = self.params.get_mut("head_prob.b") {
            b.data_mut()[0] = (rate / (T::one() - rate)).ln();
        }
    }

    /// Builds the forward graph for a batch `[N, 6·T, H, W]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &BoundParams<'t, T>,
        input: Var<'t, T>,
    ) -> Result<Outputs<'t, T>, ModelError> {
        let shape = input.shape();
        let expect = [self.config.input_channels(), self.spec.height(), self.spec.width()];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(ModelError::Shape(format!(
                "input {shape:?}, expected [N, {}, {}, {}]",
                expect[0], expect[1], expect[2]
            )));
        }
        match self.kind {
            ModelKind::PgLode => pglode::forward(tape, p, &self.config, input, self.gated),
            ModelKind::ConvLstm => convlstm::forward(tape, p, &self.config, input),
        }
    }

    /// Forecasts every sample of a batch `[N, 6·T, H, W]`.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Vec<Forecast<T>>, ModelError> {
        let tape = Tape::new();
        let p = self.params.bind_constant(&tape);
        let x = tape.constant(input.clone());
        let out = self.forward(&tape, &p, x)?;
        let (li, pr) = (out.log_intensity.value(), out.exceed_prob.value());
        let px = self.spec.len();
        li.data()
            .chunks(px)
            .zip(pr.data().chunks(px))
            .map(|(l, q)| Forecast::new(self.spec, l.to_vec(), q.to_vec()))
            .collect()
    }

    /// Forecasts every sample of `data`, `batch` samples at a time.
    pub fn predict_windows(&self, data: &WindowedSet<T>, batch: usize) -> Result<Vec<Forecast<T>>, ModelError> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::with_capacity(data.len());
        for chunk in idx.chunks(batch.max(1)) {
            out.extend(self.predict(&data.input_batch(chunk))?);
        }
        Ok(out)
    }
}

pub(crate) fn check_divisible(height: usize, width: usize) -> Result<(), ModelError> {
    if !height.is_multiple_of(DOWNSAMPLE) || !width.is_multiple_of(DOWNSAMPLE) || height == 0 || width == 0 {
        return Err(ModelError::IndivisibleGrid { height, width });
    }
    Ok(())
}

/// Tomorrow looks like today: `log1p` of the last observation, and
/// certainty of exceedance exactly where it is strictly above P95.
pub fn persistence_forecast<T: Scalar>(
    last_obs: &RainField<T>,
    thresholds: &ThresholdMap<T>,
) -> Result<Forecast<T>, ModelError> {
    if last_obs.spec() != thresholds.spec() {
        return Err(ModelError::Shape(format!(
            "observation grid {}x{} vs threshold grid {}x{}",
            last_obs.spec().height(),
            last_obs.spec().width(),
            thresholds.spec().height(),
            thresholds.spec().width()
        )));
    }
    let prob = last_obs
        .values()
        .iter()
        .zip(thresholds.p95())
        .map(|(&y, &q)| if y > q { T::one() } else { T::zero() })
        .collect();
    Forecast::from_intensity(*last_obs.spec(), last_obs.values().to_vec(), prob)
}
