//! The four subcommands. Each takes a resolved configuration, writes its
//! artifacts under `out_dir` and returns a short summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pglode::grid::tile_max;
use pglode::models::{read_checkpoint, write_checkpoint, Checkpoint, Forecast, Model, ModelKind};
use pglode::synthgen::{generate, write_dataset, MIN_DAYS};
use pglode::training::{climatology, fit_with_progress, TrainReport};
use pglode::verify::{evaluate_model, render_csv, ReportRow, Tier};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::pipeline::{check_compatible, observations, persistence_forecasts, Prepared};
use crate::svg;

pub const CONFIG_ECHO: &str = "config.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_SVG: &str = "tile_scores.svg";
pub const CASE_CSV: &str = "case_study.csv";
pub const CASE_SVG: &str = "case_study.svg";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Creates the output directory and echoes the full configuration into it.
pub fn prepare_out_dir(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    write(&cfg.out_dir.join(CONFIG_ECHO), cfg.to_text())
}

pub fn checkpoint_path(cfg: &RunConfig, kind: ModelKind) -> PathBuf {
    cfg.out_dir.join(format!("{kind}.pgw"))
}

pub fn loss_csv_path(cfg: &RunConfig, kind: ModelKind) -> PathBuf {
    cfg.out_dir.join(format!("{kind}_loss.csv"))
}

pub fn parse_model(name: &str) -> Result<ModelKind, CliError> {
    name.parse().map_err(|_| {
        let valid: Vec<&str> = ModelKind::ALL.iter().map(|k| k.name()).collect();
        CliError::Usage(format!("unknown model {name:?}; valid models: {}", valid.join(", ")))
    })
}

pub struct GenerateSummary {
    pub path: PathBuf,
    pub days: usize,
    pub burst_days: usize,
    pub burst_pixels: usize,
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateSummary, CliError> {
    if cfg.n_days < MIN_DAYS {
        return Err(CliError::Usage(format!("n_days = {} is below the minimum of {MIN_DAYS}", cfg.n_days)));
    }
    let synth = cfg.synth_config()?;
    prepare_out_dir(cfg)?;
    let set = generate::<f64>(&synth)?;
    let path = cfg.dataset_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_dataset(&set, &path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(GenerateSummary { path, days: set.len(), burst_days: set.burst_days(), burst_pixels: set.burst_pixels() })
}

pub fn cmd_train(
    cfg: &RunConfig,
    kind: ModelKind,
    progress: impl FnMut(&pglode::training::EpochLoss),
) -> Result<TrainReport, CliError> {
    let model_cfg = cfg.model_config()?;
    let loss_cfg = cfg.loss_config()?;
    let prepared = Prepared::load(cfg)?;
    prepare_out_dir(cfg)?;
    let train = prepared.train_windows(cfg)?;
    let mut model = Model::<f64>::new(kind, model_cfg, *prepared.train.spec())?;
    let (mean_log, rate) = climatology(&train, &prepared.thresholds);
    model.set_output_biases(mean_log, rate);
    let mut report = fit_with_progress(&mut model, &train, &prepared.thresholds, &loss_cfg, &[], progress)?;
    let path = checkpoint_path(cfg, kind);
    write_checkpoint(&Checkpoint { model, stats: prepared.stats.clone() }, &path)?;
    write(&loss_csv_path(cfg, kind), report.to_csv())?;
    report.checkpoint = Some(path);
    Ok(report)
}

/// Checkpoints to evaluate: those given, or else the default checkpoint of
/// every model that has one in `out_dir`.
pub fn resolve_checkpoints(cfg: &RunConfig, given: &[PathBuf]) -> Vec<PathBuf> {
    if !given.is_empty() {
        return given.to_vec();
    }
    ModelKind::ALL.iter().map(|&k| checkpoint_path(cfg, k)).filter(|p| p.exists()).collect()
}

fn load_model(cfg: &RunConfig, prepared: &Prepared, path: &Path) -> Result<Checkpoint<f64>, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    let ckpt = read_checkpoint::<f64>(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    check_compatible(&ckpt.model, cfg, prepared, path)?;
    Ok(ckpt)
}

fn model_forecasts(
    cfg: &RunConfig,
    prepared: &Prepared,
    ckpt: &Checkpoint<f64>,
) -> Result<Vec<Forecast<f64>>, CliError> {
    let windows = prepared.eval_windows(cfg, &ckpt.stats)?;
    Ok(ckpt.model.predict_windows(&windows, cfg.batch_size)?)
}

/// Persistence rows first, then one pair per checkpoint in the order given.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<Vec<ReportRow>, CliError> {
    let prepared = Prepared::load(cfg)?;
    let models = checkpoints.iter().map(|p| load_model(cfg, &prepared, p)).collect::<Result<Vec<_>, _>>()?;
    prepare_out_dir(cfg)?;
    let windows = prepared.eval_windows(cfg, &prepared.stats)?;
    let obs = observations(&windows);
    let thr = &prepared.thresholds;
    let persistence = persistence_forecasts(&windows, thr)?;
    let mut rows = evaluate_model("persistence", &persistence, &obs, thr, &prepared.tiles)?.to_vec();
    for ckpt in &models {
        let forecasts = model_forecasts(cfg, &prepared, ckpt)?;
        rows.extend(evaluate_model(ckpt.model.kind().name(), &forecasts, &obs, thr, &prepared.tiles)?);
    }
    write(&cfg.out_dir.join(REPORT_CSV), render_csv(&rows))?;
    write(&cfg.out_dir.join(REPORT_SVG), tile_chart(&rows))?;
    Ok(rows)
}

fn tile_chart(rows: &[ReportRow]) -> String {
    let series: Vec<(&str, Vec<Option<f64>>)> = rows
        .iter()
        .filter(|r| r.tier == Tier::Tile)
        .map(|r| {
            let s = r.scores();
            (r.model.as_str(), vec![s.pod, s.far, s.csi])
        })
        .collect();
    svg::grouped_bar_chart("Tile-level skill", &["POD", "FAR", "CSI"], &series)
}

/// Tile and day window of a case study. `center_day` is an absolute day
/// index; the window covers `window` consecutive target days starting
/// `window / 2` days before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaseWindow {
    pub tile_row: usize,
    pub tile_col: usize,
    pub center_day: usize,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseStudy {
    pub days: Vec<usize>,
    pub observed: Vec<f64>,
    pub persistence: Vec<f64>,
    /// Per model: name, tile max intensity and tile max exceedance probability.
    pub models: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl CaseStudy {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("day,observed,persistence");
        for (name, _, _) in &self.models {
            let _ = write!(out, ",{name}_intensity,{name}_prob");
        }
        out.push('\n');
        for (i, day) in self.days.iter().enumerate() {
            let _ = write!(out, "{day},{},{}", self.observed[i], self.persistence[i]);
            for (_, intensity, prob) in &self.models {
                let _ = write!(out, ",{},{}", intensity[i], prob[i]);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_svg(&self, w: &CaseWindow) -> String {
        let mut series = vec![("observed", self.observed.clone()), ("persistence", self.persistence.clone())];
        series.extend(self.models.iter().map(|(n, i, _)| (n.as_str(), i.clone())));
        let title = format!("Tile ({}, {}) maximum rainfall", w.tile_row, w.tile_col);
        svg::line_plot(&title, "day", "mm/day", &self.days, &series)
    }
}

pub fn cmd_case_study(cfg: &RunConfig, checkpoints: &[PathBuf], w: &CaseWindow) -> Result<CaseStudy, CliError> {
    if w.window == 0 {
        return Err(CliError::Usage("window must be at least one day".into()));
    }
    let prepared = Prepared::load(cfg)?;
    let spec = *prepared.eval.spec();
    let tiles_per_row = spec.width() / cfg.tile_size;
    let tile_rows = spec.height() / cfg.tile_size;
    if w.tile_row >= tile_rows || w.tile_col >= tiles_per_row {
        return Err(CliError::Usage(format!(
            "tile ({}, {}) outside the {tile_rows}x{tiles_per_row} tile grid",
            w.tile_row, w.tile_col
        )));
    }
    let tile = prepared.tiles[w.tile_row * tiles_per_row + w.tile_col];
    let models = checkpoints.iter().map(|p| load_model(cfg, &prepared, p)).collect::<Result<Vec<_>, _>>()?;

    let windows = prepared.eval_windows(cfg, &prepared.stats)?;
    let first_target = windows.target(0).day_index();
    let last_target = windows.target(windows.len() - 1).day_index();
    let start = w.center_day.checked_sub(w.window / 2);
    let samples = match start {
        Some(s) if s >= first_target && s + w.window - 1 <= last_target => {
            (s - first_target)..(s - first_target + w.window)
        }
        _ => {
            return Err(CliError::Data(format!(
                "{}-day window around day {} leaves the evaluation targets {first_target}..={last_target}",
                w.window, w.center_day
            )))
        }
    };
    prepare_out_dir(cfg)?;

    let (h, wd) = (spec.height(), spec.width());
    let tmax = |values: &[f64]| tile_max(values, h, wd, &tile).map_err(|e| CliError::Data(e.to_string()));
    let persistence = persistence_forecasts(&windows, &prepared.thresholds)?;
    let mut study = CaseStudy { days: Vec::new(), observed: Vec::new(), persistence: Vec::new(), models: Vec::new() };
    for i in samples.clone() {
        study.days.push(windows.target(i).day_index());
        study.observed.push(tmax(windows.target(i).values())?);
        study.persistence.push(tmax(persistence[i].intensity())?);
    }
    for ckpt in &models {
        let forecasts = model_forecasts(cfg, &prepared, ckpt)?;
        let mut intensity = Vec::new();
        let mut prob = Vec::new();
        for f in &forecasts[samples.clone()] {
            intensity.push(tmax(f.intensity())?);
            prob.push(tmax(f.exceed_prob())?);
        }
        study.models.push((ckpt.model.kind().name().to_string(), intensity, prob));
    }
    write(&cfg.out_dir.join(CASE_CSV), study.to_csv())?;
    write(&cfg.out_dir.join(CASE_SVG), study.to_svg(w))?;
    Ok(study)
}
