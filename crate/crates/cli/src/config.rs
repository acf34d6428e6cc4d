//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys are rejected so typos do not pass silently.

use std::fmt::Write as _;
use std::path::PathBuf;

use pglode::grid::GridSpec;
use pglode::models::ModelConfig;
use pglode::synthgen::SynthConfig;
use pglode::training::LossConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seeds both the generator and model initialisation.
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_days: usize,
    pub ar1_rain: f64,
    pub ar1_cape: f64,
    pub cape_trigger: f64,
    pub omega_trigger: f64,
    pub burst_intensity: f64,
    pub burst_radius: usize,
    pub noise_scale: f64,
    pub smoothing_radius: usize,
    /// Leading fraction of days used for training and climatology.
    pub train_frac: f64,
    pub tile_size: usize,
    pub history_t: usize,
    pub lead_tau: usize,
    pub latent_channels: usize,
    pub hidden_channels: usize,
    pub rk4_steps: usize,
    pub beta_init: f64,
    pub lambda_extreme: f64,
    pub bce_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Dataset file; `<out_dir>/dataset.pgl` when unset.
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let m = ModelConfig::default();
        let l = LossConfig::default();
        Self {
            seed: 42,
            height: s.spec.height(),
            width: s.spec.width(),
            n_days: s.n_days,
            ar1_rain: s.ar1_rain,
            ar1_cape: s.ar1_cape,
            cape_trigger: s.cape_trigger,
            omega_trigger: s.omega_trigger,
            burst_intensity: s.burst_intensity,
            burst_radius: s.burst_radius,
            noise_scale: s.noise_scale,
            smoothing_radius: s.smoothing_radius,
            train_frac: 0.8,
            tile_size: 32,
            history_t: m.history_t,
            lead_tau: m.lead_tau,
            latent_channels: m.latent_channels,
            hidden_channels: m.hidden_channels,
            rk4_steps: m.rk4_steps,
            beta_init: m.beta_init,
            lambda_extreme: l.lambda_extreme,
            bce_weight: l.bce_weight,
            learning_rate: l.learning_rate,
            epochs: l.epochs,
            batch_size: l.batch_size,
            dataset: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, CliError> {
    value.parse().map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Every key in the order it is echoed.
    pub const KEYS: [&'static str; 27] = [
        "seed",
        "height",
        "width",
        "n_days",
        "ar1_rain",
        "ar1_cape",
        "cape_trigger",
        "omega_trigger",
        "burst_intensity",
        "burst_radius",
        "noise_scale",
        "smoothing_radius",
        "train_frac",
        "tile_size",
        "history_t",
        "lead_tau",
        "latent_channels",
        "hidden_channels",
        "rk4_steps",
        "beta_init",
        "lambda_extreme",
        "bce_weight",
        "learning_rate",
        "epochs",
        "batch_size",
        "dataset",
        "out_dir",
    ];

    /// Defaults overridden by the lines of a config file.
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (key, value) =
            pair.split_once('=').ok_or_else(|| CliError::Usage(format!("override {pair:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "n_days" => self.n_days = parse(key, value)?,
            "ar1_rain" => self.ar1_rain = parse(key, value)?,
            "ar1_cape" => self.ar1_cape = parse(key, value)?,
            "cape_trigger" => self.cape_trigger = parse(key, value)?,
            "omega_trigger" => self.omega_trigger = parse(key, value)?,
            "burst_intensity" => self.burst_intensity = parse(key, value)?,
            "burst_radius" => self.burst_radius = parse(key, value)?,
            "noise_scale" => self.noise_scale = parse(key, value)?,
            "smoothing_radius" => self.smoothing_radius = parse(key, value)?,
            "train_frac" => self.train_frac = parse(key, value)?,
            "tile_size" => self.tile_size = parse(key, value)?,
            "history_t" => self.history_t = parse(key, value)?,
            "lead_tau" => self.lead_tau = parse(key, value)?,
            "latent_channels" => self.latent_channels = parse(key, value)?,
            "hidden_channels" => self.hidden_channels = parse(key, value)?,
            "rk4_steps" => self.rk4_steps = parse(key, value)?,
            "beta_init" => self.beta_init = parse(key, value)?,
            "lambda_extreme" => self.lambda_extreme = parse(key, value)?,
            "bce_weight" => self.bce_weight = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "n_days" => self.n_days.to_string(),
            "ar1_rain" => self.ar1_rain.to_string(),
            "ar1_cape" => self.ar1_cape.to_string(),
            "cape_trigger" => self.cape_trigger.to_string(),
            "omega_trigger" => self.omega_trigger.to_string(),
            "burst_intensity" => self.burst_intensity.to_string(),
            "burst_radius" => self.burst_radius.to_string(),
            "noise_scale" => self.noise_scale.to_string(),
            "smoothing_radius" => self.smoothing_radius.to_string(),
            "train_frac" => self.train_frac.to_string(),
            "tile_size" => self.tile_size.to_string(),
            "history_t" => self.history_t.to_string(),
            "lead_tau" => self.lead_tau.to_string(),
            "latent_channels" => self.latent_channels.to_string(),
            "hidden_channels" => self.hidden_channels.to_string(),
            "rk4_steps" => self.rk4_steps.to_string(),
            "beta_init" => self.beta_init.to_string(),
            "lambda_extreme" => self.lambda_extreme.to_string(),
            "bce_weight" => self.bce_weight.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "dataset" => self.dataset_path().display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => unreachable!("key list and accessor disagree"),
        }
    }

    /// The full configuration as a config file, defaults included.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.value(key));
        }
        out
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir.join("dataset.pgl"))
    }

    pub fn grid(&self) -> Result<GridSpec, CliError> {
        GridSpec::with_size(self.height, self.width).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn synth_config(&self) -> Result<SynthConfig, CliError> {
        let cfg = SynthConfig {
            spec: self.grid()?,
            n_days: self.n_days,
            seed: self.seed,
            ar1_rain: self.ar1_rain,
            ar1_cape: self.ar1_cape,
            cape_trigger: self.cape_trigger,
            omega_trigger: self.omega_trigger,
            burst_intensity: self.burst_intensity,
            burst_radius: self.burst_radius,
            noise_scale: self.noise_scale,
            smoothing_radius: self.smoothing_radius,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            history_t: self.history_t,
            lead_tau: self.lead_tau,
            latent_channels: self.latent_channels,
            hidden_channels: self.hidden_channels,
            rk4_steps: self.rk4_steps,
            seed: self.seed,
            beta_init: self.beta_init,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn loss_config(&self) -> Result<LossConfig, CliError> {
        let cfg = LossConfig {
            lambda_extreme: self.lambda_extreme,
            bce_weight: self.bce_weight,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}
