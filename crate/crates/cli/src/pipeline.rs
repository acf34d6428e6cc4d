//! Shared data preparation for the train, evaluate and case-study commands.

use std::path::Path;

use pglode::grid::{
    channel_stats, compute_threshold_map, tile_partition, ChannelStats, RainField, ThresholdMap, TileIndex,
};
use pglode::models::{persistence_forecast, Forecast, Model, WindowedSet};
use pglode::synthgen::{read_dataset, split, SampleSet};

use crate::config::RunConfig;
use crate::error::CliError;

/// Chronological split of a dataset with everything derived from its
/// training part.
pub struct Prepared {
    pub train: SampleSet<f64>,
    pub eval: SampleSet<f64>,
    pub thresholds: ThresholdMap<f64>,
    pub stats: ChannelStats<f64>,
    pub tiles: Vec<TileIndex>,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let path = cfg.dataset_path();
        if !path.exists() {
            return Err(CliError::Data(format!("dataset {} not found; run generate first", path.display())));
        }
        Self::from_set(cfg, &read_dataset(&path)?)
    }

    pub fn from_set(cfg: &RunConfig, set: &SampleSet<f64>) -> Result<Self, CliError> {
        let (train, eval) = split(set, cfg.train_frac).map_err(|e| CliError::Usage(e.to_string()))?;
        let thresholds = compute_threshold_map(train.targets()).map_err(|e| CliError::Data(e.to_string()))?;
        let stats = channel_stats(train.predictors());
        let tiles = tile_partition(set.spec(), cfg.tile_size).map_err(|e| CliError::Usage(e.to_string()))?.tiles;
        Ok(Self { train, eval, thresholds, stats, tiles })
    }

    pub fn train_windows(&self, cfg: &RunConfig) -> Result<WindowedSet<f64>, CliError> {
        Ok(WindowedSet::from_samples(&self.train, &self.stats, cfg.history_t, cfg.lead_tau)?)
    }

    /// Evaluation windows normalized with `stats`.
    pub fn eval_windows(&self, cfg: &RunConfig, stats: &ChannelStats<f64>) -> Result<WindowedSet<f64>, CliError> {
        Ok(WindowedSet::from_samples(&self.eval, stats, cfg.history_t, cfg.lead_tau)?)
    }
}

pub fn observations(w: &WindowedSet<f64>) -> Vec<RainField<f64>> {
    (0..w.len()).map(|i| w.target(i).clone()).collect()
}

pub fn persistence_forecasts(w: &WindowedSet<f64>, thr: &ThresholdMap<f64>) -> Result<Vec<Forecast<f64>>, CliError> {
    (0..w.len()).map(|i| Ok(persistence_forecast(w.last_observed(i), thr)?)).collect()
}

/// Checks that a checkpointed model can be evaluated alongside the run
/// configuration on the same days and grid.
pub fn check_compatible(model: &Model<f64>, cfg: &RunConfig, prepared: &Prepared, path: &Path) -> Result<(), CliError> {
    let spec = prepared.eval.spec();
    if model.spec().height() != spec.height() || model.spec().width() != spec.width() {
        return Err(CliError::Data(format!(
            "checkpoint {} is for a {}x{} grid, dataset is {}x{}",
            path.display(),
            model.spec().height(),
            model.spec().width(),
            spec.height(),
            spec.width()
        )));
    }
    let mc = model.config();
    if mc.history_t != cfg.history_t || mc.lead_tau != cfg.lead_tau {
        return Err(CliError::Data(format!(
            "checkpoint {} uses history {} and lead {}, configuration has {} and {}",
            path.display(),
            mc.history_t,
            mc.lead_tau,
            cfg.history_t,
            cfg.lead_tau
        )));
    }
    Ok(())
}
