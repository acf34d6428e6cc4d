//! Categorical verification at pixel and tile level.
//!
//! Pixel tier: a forecast event is predicted intensity at or above the
//! local 95th percentile; an observed event is rainfall strictly above it.
//! Tile tier: a tile is forecast when the largest pixel exceedance
//! probability in it is above 0.5, and observed when any of its pixels
//! exceeds its threshold. Counts are pooled over days before scoring.

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use thiserror::Error;

use crate::grid::{GridError, RainField, ThresholdMap, TileIndex};
use crate::models::Forecast;
use crate::scalar::Scalar;

/// Rendering of a score whose denominator is zero.
pub const UNDEFINED: &str = "—";

pub const REPORT_HEADER: &str = "model,tier,pod,far,csi,hits,misses,false_alarms,correct_negatives";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("nothing to evaluate")]
    Empty,
    #[error("malformed report line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ContingencyCounts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ContingencyCounts {
    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    /// Adds one unit classified by forecast and observation.
    pub fn record(&mut self, predicted: bool, observed: bool) {
        match (predicted, observed) {
            (true, true) => self.hits += 1,
            (false, true) => self.misses += 1,
            (true, false) => self.false_alarms += 1,
            (false, false) => self.correct_negatives += 1,
        }
    }

    pub fn scores(&self) -> SkillScores {
        SkillScores { pod: pod(self), far: far(self), csi: csi(self) }
    }
}

impl Add for ContingencyCounts {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for ContingencyCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.hits += rhs.hits;
        self.misses += rhs.misses;
        self.false_alarms += rhs.false_alarms;
        self.correct_negatives += rhs.correct_negatives;
    }
}

impl std::iter::Sum for ContingencyCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// POD, FAR and CSI. `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkillScores {
    pub pod: Option<f64>,
    pub far: Option<f64>,
    pub csi: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `H / (H + M)`.
pub fn pod(c: &ContingencyCounts) -> Option<f64> {
    ratio(c.hits, c.hits + c.misses)
}

/// `F / (H + F)`.
pub fn far(c: &ContingencyCounts) -> Option<f64> {
    ratio(c.false_alarms, c.hits + c.false_alarms)
}

/// `H / (H + M + F)`.
pub fn csi(c: &ContingencyCounts) -> Option<f64> {
    ratio(c.hits, c.hits + c.misses + c.false_alarms)
}

/// CSI implied by a published (POD, FAR) pair, from the normalized counts
/// `H = POD`, `M = 1 − POD`, `F = POD·FAR / (1 − FAR)`.
pub fn csi_from_pod_far(pod: f64, far: f64) -> Option<f64> {
    if !(0.0..1.0).contains(&far) || !(0.0..=1.0).contains(&pod) {
        return None;
    }
    let (h, m, f) = (pod, 1.0 - pod, pod * far / (1.0 - far));
    let den = h + m + f;
    (den > 0.0).then(|| h / den)
}

fn check_pair<T: Scalar>(forecast: &Forecast<T>, obs: &RainField<T>, thr: &ThresholdMap<T>) -> Result<(), VerifyError> {
    if forecast.spec() != obs.spec() || obs.spec() != thr.spec() {
        return Err(VerifyError::Shape("forecast, observation and thresholds lie on different grids".into()));
    }
    Ok(())
}

/// Per-pixel counts: predicted iff intensity ≥ P95, observed iff obs > P95.
pub fn pixel_contingency<T: Scalar>(
    forecast: &Forecast<T>,
    obs: &RainField<T>,
    thr: &ThresholdMap<T>,
) -> Result<ContingencyCounts, VerifyError> {
    check_pair(forecast, obs, thr)?;
    let mut c = ContingencyCounts::default();
    for ((&f, &y), &q) in forecast.intensity().iter().zip(obs.values()).zip(thr.p95()) {
        c.record(f >= q, y > q);
    }
    Ok(c)
}

/// Per-tile counts: predicted iff max exceedance probability > 0.5,
/// observed iff some pixel has obs > P95.
pub fn tile_contingency<T: Scalar>(
    forecast: &Forecast<T>,
    obs: &RainField<T>,
    thr: &ThresholdMap<T>,
    tiles: &[TileIndex],
) -> Result<ContingencyCounts, VerifyError> {
    check_pair(forecast, obs, thr)?;
    let (h, w) = (obs.spec().height(), obs.spec().width());
    let half = T::lit(0.5);
    let mut c = ContingencyCounts::default();
    for tile in tiles {
        if tile.rows == 0 || tile.cols == 0 || tile.row0 + tile.rows > h || tile.col0 + tile.cols > w {
            return Err(GridError::TileOutOfBounds { tile: *tile, height: h, width: w }.into());
        }
        let prob = tile.pixels(w).map(|i| forecast.exceed_prob()[i]).fold(T::zero(), T::max);
        let event = tile.pixels(w).any(|i| obs.values()[i] > thr.p95()[i]);
        c.record(prob > half, event);
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tier {
    Pixel,
    Tile,
}

impl Tier {
    pub fn name(self) -> &'static str {
        match self {
            Tier::Pixel => "pixel",
            Tier::Tile => "tile",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pixel" => Ok(Tier::Pixel),
            "tile" => Ok(Tier::Tile),
            _ => Err(format!("unknown tier {s:?}")),
        }
    }
}

/// One line of a verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub tier: Tier,
    pub counts: ContingencyCounts,
}

impl ReportRow {
    pub fn scores(&self) -> SkillScores {
        self.counts.scores()
    }
}

/// Pooled pixel and tile rows for one model over aligned days.
pub fn evaluate_model<T: Scalar>(
    model: &str,
    forecasts: &[Forecast<T>],
    obs: &[RainField<T>],
    thr: &ThresholdMap<T>,
    tiles: &[TileIndex],
) -> Result<[ReportRow; 2], VerifyError> {
    if forecasts.is_empty() {
        return Err(VerifyError::Empty);
    }
    if forecasts.len() != obs.len() {
        return Err(VerifyError::Shape(format!("{} forecasts for {} observed days", forecasts.len(), obs.len())));
    }
    let (mut pixel, mut tile) = (ContingencyCounts::default(), ContingencyCounts::default());
    for (f, y) in forecasts.iter().zip(obs) {
        pixel += pixel_contingency(f, y, thr)?;
        tile += tile_contingency(f, y, thr, tiles)?;
    }
    Ok([
        ReportRow { model: model.to_string(), tier: Tier::Pixel, counts: pixel },
        ReportRow { model: model.to_string(), tier: Tier::Tile, counts: tile },
    ])
}

/// A score with three decimals, or the undefined marker.
pub fn format_score(s: Option<f64>) -> String {
    match s {
        Some(v) => format!("{v:.3}"),
        None => UNDEFINED.to_string(),
    }
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let s = r.scores();
        let c = &r.counts;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.model,
            r.tier,
            format_score(s.pod),
            format_score(s.far),
            format_score(s.csi),
            c.hits,
            c.misses,
            c.false_alarms,
            c.correct_negatives
        ));
    }
    out
}

/// A parsed report line: the printed scores and the counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRow {
    pub row: ReportRow,
    pub printed: SkillScores,
}

/// Parses the output of [`render_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<ParsedRow>, VerifyError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_HEADER => {}
        _ => return Err(VerifyError::Parse { line: 1, reason: "missing report header".into() }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let err = |reason: String| VerifyError::Parse { line: line_no, reason };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(err(format!("{} fields, expected 9", f.len())));
        }
        let score = |s: &str| -> Result<Option<f64>, VerifyError> {
            if s == UNDEFINED {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| err(format!("bad score {s:?}")))
            }
        };
        let count = |s: &str| s.parse::<u64>().map_err(|_| err(format!("bad count {s:?}")));
        let tier = f[1].parse().map_err(err)?;
        let counts = ContingencyCounts {
            hits: count(f[5])?,
            misses: count(f[6])?,
            false_alarms: count(f[7])?,
            correct_negatives: count(f[8])?,
        };
        rows.push(ParsedRow {
            row: ReportRow { model: f[0].to_string(), tier, counts },
            printed: SkillScores { pod: score(f[2])?, far: score(f[3])?, csi: score(f[4])? },
        });
    }
    Ok(rows)
}
