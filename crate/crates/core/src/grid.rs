//! Grid data types, target transforms, climatological thresholds and tiling.

use thiserror::Error;

use crate::scalar::Scalar;

/// Quantile used for the extreme-rainfall threshold.
pub const EXTREME_QUANTILE: f64 = 0.95;

/// Minimum number of days needed for a meaningful 95th percentile.
pub const MIN_THRESHOLD_DAYS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid must be at least 1x1, got {height}x{width}")]
    EmptyGrid { height: usize, width: usize },
    #[error("expected {expected} values for the grid, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("value {value} at index {index} is {reason}")]
    InvalidValue { index: usize, value: f64, reason: &'static str },
    #[error("grid mismatch: {0:?} vs {1:?}")]
    SpecMismatch(GridSpec, GridSpec),
    #[error("need at least {needed} days, got {got}")]
    TooFewDays { needed: usize, got: usize },
    #[error("tile size {tile} does not fit a {height}x{width} grid")]
    TileTooLarge { tile: usize, height: usize, width: usize },
    #[error("tile size must be at least 1")]
    ZeroTileSize,
    #[error("tile {tile:?} lies outside a {height}x{width} array")]
    TileOutOfBounds { tile: TileIndex, height: usize, width: usize },
    #[error("channel {channel} has zero standard deviation")]
    DegenerateChannel { channel: &'static str },
    #[error("expected {expected} predictor channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
}

/// Grid geometry. Geographic fields are carried as metadata only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    height: usize,
    width: usize,
    lat0: f64,
    lon0: f64,
    cell_deg: f64,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, lat0: f64, lon0: f64, cell_deg: f64) -> Result<Self, GridError> {
        if height == 0 || width == 0 {
            return Err(GridError::EmptyGrid { height, width });
        }
        Ok(Self { height, width, lat0, lon0, cell_deg })
    }

    /// Grid with default metadata (0.25° cells anchored over central India).
    pub fn with_size(height: usize, width: usize) -> Result<Self, GridError> {
        Self::new(height, width, 15.0, 72.0, 0.25)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lat0(&self) -> f64 {
        self.lat0
    }

    pub fn lon0(&self) -> f64 {
        self.lon0
    }

    pub fn cell_deg(&self) -> f64 {
        self.cell_deg
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_len(&self, got: usize) -> Result<(), GridError> {
        if got != self.len() {
            return Err(GridError::LengthMismatch { expected: self.len(), got });
        }
        Ok(())
    }
}

fn check_values<T: Scalar>(values: &[T], non_negative: bool) -> Result<(), GridError> {
    for (index, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(GridError::InvalidValue { index, value: v.to_f64_lossy(), reason: "not finite" });
        }
        if non_negative && v < T::zero() {
            return Err(GridError::InvalidValue { index, value: v.to_f64_lossy(), reason: "negative" });
        }
    }
    Ok(())
}

/// One day of rainfall in mm/day, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RainField<T> {
    spec: GridSpec,
    values: Vec<T>,
    day_index: usize,
}

impl<T: Scalar> RainField<T> {
    pub fn new(spec: GridSpec, values: Vec<T>, day_index: usize) -> Result<Self, GridError> {
        spec.check_len(values.len())?;
        check_values(&values, true)?;
        Ok(Self { spec, values, day_index })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn day_index(&self) -> usize {
        self.day_index
    }

    pub fn with_day_index(mut self, day_index: usize) -> Self {
        self.day_index = day_index;
        self
    }
}

/// Names of the six predictor channels in storage order.
pub const PREDICTOR_NAMES: [&str; 6] = ["tcwv", "cape", "omega500", "u850", "v850", "sp"];

/// Predictor channel index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predictor {
    Tcwv = 0,
    Cape = 1,
    Omega500 = 2,
    U850 = 3,
    V850 = 4,
    SurfacePressure = 5,
}

pub const N_PREDICTORS: usize = 6;

/// Six physical predictors for one day.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorStack<T> {
    spec: GridSpec,
    channels: Vec<Vec<T>>,
    day_index: usize,
}

impl<T: Scalar> PredictorStack<T> {
    pub fn new(spec: GridSpec, channels: Vec<Vec<T>>, day_index: usize) -> Result<Self, GridError> {
        if channels.len() != N_PREDICTORS {
            return Err(GridError::ChannelCount { expected: N_PREDICTORS, got: channels.len() });
        }
        for (i, ch) in channels.iter().enumerate() {
            spec.check_len(ch.len())?;
            check_values(ch, i == Predictor::Cape as usize)?;
        }
        Ok(Self { spec, channels, day_index })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn channel(&self, p: Predictor) -> &[T] {
        &self.channels[p as usize]
    }

    pub fn channels(&self) -> &[Vec<T>] {
        &self.channels
    }

    pub fn day_index(&self) -> usize {
        self.day_index
    }

    pub fn with_day_index(mut self, day_index: usize) -> Self {
        self.day_index = day_index;
        self
    }
}

/// Predictors rescaled to zero mean and unit variance per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedStack<T> {
    pub spec: GridSpec,
    pub channels: Vec<Vec<T>>,
    pub day_index: usize,
}

impl<T: Scalar> NormalizedStack<T> {
    pub fn channel(&self, p: Predictor) -> &[T] {
        &self.channels[p as usize]
    }
}

/// Per-pixel 95th percentile of rainfall over the training days.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdMap<T> {
    spec: GridSpec,
    p95: Vec<T>,
    source_day_count: usize,
}

impl<T: Scalar> ThresholdMap<T> {
    pub fn new(spec: GridSpec, p95: Vec<T>, source_day_count: usize) -> Result<Self, GridError> {
        spec.check_len(p95.len())?;
        check_values(&p95, true)?;
        if source_day_count < MIN_THRESHOLD_DAYS {
            return Err(GridError::TooFewDays { needed: MIN_THRESHOLD_DAYS, got: source_day_count });
        }
        Ok(Self { spec, p95, source_day_count })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn p95(&self) -> &[T] {
        &self.p95
    }

    pub fn source_day_count(&self) -> usize {
        self.source_day_count
    }
}

/// `ln(y + 1)` of every pixel.
pub fn log1p_transform<T: Scalar>(field: &RainField<T>) -> Result<Vec<T>, GridError> {
    log1p_values(field.values())
}

/// `ln(y + 1)` over raw values, rejecting negative or non-finite input.
pub fn log1p_values<T: Scalar>(values: &[T]) -> Result<Vec<T>, GridError> {
    check_values(values, true)?;
    Ok(values.iter().map(|v| v.ln_1p()).collect())
}

/// `exp(x) − 1`, the inverse of [`log1p_values`].
pub fn inv_log1p<T: Scalar>(transformed: &[T]) -> Result<Vec<T>, GridError> {
    check_values(transformed, false)?;
    Ok(transformed.iter().map(|v| v.exp_m1()).collect())
}

/// Linear interpolation between order statistics of an ascending slice:
/// rank `h = 1 + (n−1)q`, result `v[⌊h⌋] + (h−⌊h⌋)(v[⌈h⌉] − v[⌊h⌋])`
/// with one-based ranks.
pub fn percentile_sorted<T: Scalar>(sorted: &[T], q: f64) -> T {
    assert!(!sorted.is_empty(), "percentile of empty set");
    let h = 1.0 + (sorted.len() - 1) as f64 * q;
    let lo = h.floor();
    let frac = T::lit(h - lo);
    let lo = lo as usize - 1;
    let hi = (h.ceil() as usize - 1).min(sorted.len() - 1);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Per-pixel 95th percentile over the training days. The result does not
/// depend on day order.
pub fn compute_threshold_map<T: Scalar>(training_rain: &[RainField<T>]) -> Result<ThresholdMap<T>, GridError> {
    if training_rain.len() < MIN_THRESHOLD_DAYS {
        return Err(GridError::TooFewDays { needed: MIN_THRESHOLD_DAYS, got: training_rain.len() });
    }
    let spec = *training_rain[0].spec();
    if let Some(other) = training_rain.iter().find(|f| *f.spec() != spec) {
        return Err(GridError::SpecMismatch(spec, *other.spec()));
    }
    let mut column = Vec::with_capacity(training_rain.len());
    let p95 = (0..spec.len())
        .map(|px| {
            column.clear();
            column.extend(training_rain.iter().map(|f| f.values()[px]));
            column.sort_by(|a, b| a.partial_cmp(b).expect("finite rainfall"));
            percentile_sorted(&column, EXTREME_QUANTILE)
        })
        .collect();
    ThresholdMap::new(spec, p95, training_rain.len())
}

/// Rectangular block of pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileIndex {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TileIndex {
    pub fn pixels(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.row0..self.row0 + self.rows)
            .flat_map(move |r| (self.col0..self.col0 + self.cols).map(move |c| r * width + c))
    }
}

/// Non-overlapping square tiles plus the count of trailing pixels left out.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePartition {
    pub tiles: Vec<TileIndex>,
    pub tile_size: usize,
    pub dropped_pixels: usize,
}

/// Row-major `tile_size × tile_size` tiles. Rows and columns beyond the last
/// whole tile are dropped rather than padded; see `dropped_pixels`.
pub fn tile_partition(spec: &GridSpec, tile_size: usize) -> Result<TilePartition, GridError> {
    if tile_size == 0 {
        return Err(GridError::ZeroTileSize);
    }
    let (h, w) = (spec.height(), spec.width());
    if tile_size > h || tile_size > w {
        return Err(GridError::TileTooLarge { tile: tile_size, height: h, width: w });
    }
    let (tr, tc) = (h / tile_size, w / tile_size);
    let tiles: Vec<TileIndex> = (0..tr)
        .flat_map(|r| {
            (0..tc).map(move |c| TileIndex {
                row0: r * tile_size,
                col0: c * tile_size,
                rows: tile_size,
                cols: tile_size,
            })
        })
        .collect();
    let dropped_pixels = h * w - tiles.len() * tile_size * tile_size;
    Ok(TilePartition { tiles, tile_size, dropped_pixels })
}

/// Maximum over a tile of a row-major `height × width` array.
pub fn tile_max<T: Scalar>(values: &[T], height: usize, width: usize, tile: &TileIndex) -> Result<T, GridError> {
    if values.len() != height * width {
        return Err(GridError::LengthMismatch { expected: height * width, got: values.len() });
    }
    if tile.rows == 0 || tile.cols == 0 || tile.row0 + tile.rows > height || tile.col0 + tile.cols > width {
        return Err(GridError::TileOutOfBounds { tile: *tile, height, width });
    }
    Ok(tile.pixels(width).map(|i| values[i]).fold(T::neg_infinity(), T::max))
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

/// Population mean and standard deviation of each channel over all
/// supplied days and pixels. Use the training split only.
pub fn channel_stats<T: Scalar>(stacks: &[PredictorStack<T>]) -> ChannelStats<T> {
    let mut mean = Vec::with_capacity(N_PREDICTORS);
    let mut std = Vec::with_capacity(N_PREDICTORS);
    for c in 0..N_PREDICTORS {
        let n = stacks.iter().map(|s| s.channels[c].len()).sum::<usize>();
        let n_t = T::from_usize(n.max(1)).unwrap();
        let m = stacks.iter().flat_map(|s| s.channels[c].iter().copied()).sum::<T>() / n_t;
        let var = stacks.iter().flat_map(|s| s.channels[c].iter().map(move |&v| (v - m) * (v - m))).sum::<T>() / n_t;
        mean.push(m);
        std.push(var.sqrt());
    }
    ChannelStats { mean, std }
}

/// Rescales each channel as `(v − mean) / std` using the supplied statistics.
pub fn normalize_predictors<T: Scalar>(
    stacks: &[PredictorStack<T>],
    stats: &ChannelStats<T>,
) -> Result<Vec<NormalizedStack<T>>, GridError> {
    if stats.mean.len() != N_PREDICTORS || stats.std.len() != N_PREDICTORS {
        return Err(GridError::ChannelCount { expected: N_PREDICTORS, got: stats.mean.len().min(stats.std.len()) });
    }
    if let Some(c) = stats.std.iter().position(|s| !s.is_finite() || *s <= T::zero()) {
        return Err(GridError::DegenerateChannel { channel: PREDICTOR_NAMES[c] });
    }
    Ok(stacks
        .iter()
        .map(|s| NormalizedStack {
            spec: s.spec,
            channels: s
                .channels
                .iter()
                .enumerate()
                .map(|(c, ch)| ch.iter().map(|&v| (v - stats.mean[c]) / stats.std[c]).collect())
                .collect(),
            day_index: s.day_index,
        })
        .collect())
}
