//! Deterministic synthetic monsoon-like dataset generator.
//!
//! The generator draws every random number from one `ChaCha8Rng` seeded with
//! `SynthConfig::seed` via `SeedableRng::seed_from_u64`, in a fixed order:
//! initial states for the six latent fields (TCWV, CAPE, ω500, u850, v850,
//! SP, each `H·W` standard normals smoothed), then per day: the six field
//! innovations, the rain innovation field, and one domain-wide rain shock.
//! Normals come from `rand_distr::StandardNormal`. ChaCha output is
//! platform independent, so a seed fully determines the dataset.
//!
//! Physics encoded:
//! * background rain is a spatially smoothed AR(1) process with coefficient
//!   `ar1_rain` and non-negative innovations;
//! * CAPE and ω500 are independent smoothed AR(1) fields (coefficient
//!   `ar1_cape`);
//! * wherever CAPE > `cape_trigger` and ω500 < `omega_trigger` on day `t`, a
//!   burst of at least `burst_intensity` mm/day lands on day `t+1` within
//!   `burst_radius` pixels. The burst grows with the fraction of triggered
//!   pixels in the neighbourhood, up to twice `burst_intensity`.

mod format;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::grid::{GridError, GridSpec, Predictor, PredictorStack, RainField, N_PREDICTORS};
use crate::scalar::Scalar;

pub use format::{
    decode_dataset, encode_dataset, read_dataset, write_dataset, FormatError, DATASET_MAGIC, DATASET_VERSION,
};

/// Smallest dataset length the generator accepts.
pub const MIN_DAYS: usize = 40;
/// Smallest split the splitter leaves on either side.
pub const MIN_SPLIT_DAYS: usize = 10;

/// Background rain on day 0 before any innovation, mm/day.
pub const INITIAL_RAIN: f64 = 4.0;

const CAPE_MEAN: f64 = 1200.0;
const CAPE_SD: f64 = 700.0;
const OMEGA_SD: f64 = 0.2;
const RAIN_INNOVATION: f64 = 1.2;
const RAIN_SHOCK: f64 = 14.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("split leaves {train} train and {eval} eval days; each side needs at least {MIN_SPLIT_DAYS}")]
    SplitTooSmall { train: usize, eval: usize },
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("sample set is inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub spec: GridSpec,
    pub n_days: usize,
    pub seed: u64,
    pub ar1_rain: f64,
    pub ar1_cape: f64,
    /// J/kg.
    pub cape_trigger: f64,
    /// Pa/s; negative values mean ascent.
    pub omega_trigger: f64,
    /// mm/day.
    pub burst_intensity: f64,
    pub burst_radius: usize,
    pub noise_scale: f64,
    /// Radius in pixels of the box filter (applied three times) that gives
    /// every latent field its spatial coherence.
    pub smoothing_radius: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            spec: GridSpec::with_size(64, 64).expect("non-empty grid"),
            n_days: 400,
            seed: 42,
            ar1_rain: 0.8,
            ar1_cape: 0.4,
            cape_trigger: CAPE_MEAN + 1.2 * CAPE_SD,
            omega_trigger: -1.2 * OMEGA_SD,
            burst_intensity: 40.0,
            burst_radius: 5,
            noise_scale: 1.0,
            smoothing_radius: 5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.ar1_rain) {
            return bad(format!("ar1_rain {} outside [0, 1)", self.ar1_rain));
        }
        if !(0.0..1.0).contains(&self.ar1_cape) {
            return bad(format!("ar1_cape {} outside [0, 1)", self.ar1_cape));
        }
        if self.n_days < MIN_DAYS {
            return bad(format!("n_days {} below minimum {MIN_DAYS}", self.n_days));
        }
        if !(self.burst_intensity.is_finite() && self.burst_intensity >= 0.0) {
            return bad(format!("burst_intensity {} must be finite and non-negative", self.burst_intensity));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return bad(format!("noise_scale {} must be finite and non-negative", self.noise_scale));
        }
        if !self.cape_trigger.is_finite() || !self.omega_trigger.is_finite() {
            return bad("trigger thresholds must be finite".into());
        }
        Ok(())
    }
}

/// Aligned predictors, rainfall targets and the planted-burst mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet<T> {
    predictors: Vec<PredictorStack<T>>,
    targets: Vec<RainField<T>>,
    extreme_truth: Vec<Vec<bool>>,
}

impl<T: Scalar> SampleSet<T> {
    pub fn new(
        predictors: Vec<PredictorStack<T>>,
        targets: Vec<RainField<T>>,
        extreme_truth: Vec<Vec<bool>>,
    ) -> Result<Self, SynthError> {
        let inconsistent = |m: String| Err(SynthError::Inconsistent(m));
        if predictors.is_empty() {
            return inconsistent("no days".into());
        }
        if predictors.len() != targets.len() || predictors.len() != extreme_truth.len() {
            return inconsistent(format!(
                "{} predictor days, {} target days, {} truth days",
                predictors.len(),
                targets.len(),
                extreme_truth.len()
            ));
        }
        let spec = *predictors[0].spec();
        let first = predictors[0].day_index();
        for (i, ((p, t), m)) in predictors.iter().zip(&targets).zip(&extreme_truth).enumerate() {
            if *p.spec() != spec || *t.spec() != spec {
                return inconsistent(format!("day {i} is on a different grid"));
            }
            if p.day_index() != first + i || t.day_index() != first + i {
                return inconsistent(format!("day {i} is not aligned/contiguous"));
            }
            if m.len() != spec.len() {
                return inconsistent(format!("truth mask for day {i} has {} pixels", m.len()));
            }
        }
        Ok(Self { predictors, targets, extreme_truth })
    }

    pub fn spec(&self) -> &GridSpec {
        self.predictors[0].spec()
    }

    pub fn len(&self) -> usize {
        self.predictors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictors.is_empty()
    }

    pub fn first_day(&self) -> usize {
        self.predictors[0].day_index()
    }

    pub fn predictors(&self) -> &[PredictorStack<T>] {
        &self.predictors
    }

    pub fn targets(&self) -> &[RainField<T>] {
        &self.targets
    }

    pub fn extreme_truth(&self) -> &[Vec<bool>] {
        &self.extreme_truth
    }

    /// Number of days carrying at least one planted burst pixel.
    pub fn burst_days(&self) -> usize {
        self.extreme_truth.iter().filter(|m| m.iter().any(|&b| b)).count()
    }

    /// Total planted burst pixels over all days.
    pub fn burst_pixels(&self) -> usize {
        self.extreme_truth.iter().map(|m| m.iter().filter(|&&b| b).count()).sum()
    }

    fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            predictors: self.predictors[range.clone()].to_vec(),
            targets: self.targets[range.clone()].to_vec(),
            extreme_truth: self.extreme_truth[range].to_vec(),
        }
    }
}

/// Number of box passes in the smoother; three passes approximate a Gaussian.
const SMOOTHING_PASSES: usize = 3;

/// Moving average of `src` with the given radius, restricted to in-range
/// samples, written to `dst`. `prefix` is scratch of length `src.len() + 1`.
fn box_line(src: impl Iterator<Item = f64>, dst: &mut [f64], radius: usize, prefix: &mut [f64]) {
    let n = dst.len();
    prefix[0] = 0.0;
    for (i, v) in src.enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    for (i, d) in dst.iter_mut().enumerate() {
        let (lo, hi) = (i.saturating_sub(radius), (i + radius + 1).min(n));
        *d = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
    }
}

/// In-grid `(2r+1)²` box average; edge pixels average their in-grid
/// neighbours. Applied separably, rows then columns.
fn box_filter(field: &mut [f64], h: usize, w: usize, radius: usize) {
    let mut prefix = vec![0.0; h.max(w) + 1];
    let mut line = vec![0.0; h.max(w)];
    for r in 0..h {
        box_line(field[r * w..(r + 1) * w].iter().copied(), &mut line[..w], radius, &mut prefix);
        field[r * w..(r + 1) * w].copy_from_slice(&line[..w]);
    }
    for c in 0..w {
        box_line((0..h).map(|r| field[r * w + c]), &mut line[..h], radius, &mut prefix);
        for r in 0..h {
            field[r * w + c] = line[r];
        }
    }
}

struct Smoother {
    h: usize,
    w: usize,
    radius: usize,
    /// Standard deviation of a smoothed unit-variance white field at an
    /// interior pixel.
    gain: f64,
}

impl Smoother {
    fn new(h: usize, w: usize, radius: usize) -> Self {
        // Kernel from a delta on a grid large enough to avoid the edges.
        let half = SMOOTHING_PASSES * radius;
        let size = 2 * half + 1;
        let mut delta = vec![0.0; size * size];
        delta[half * size + half] = 1.0;
        for _ in 0..SMOOTHING_PASSES {
            box_filter(&mut delta, size, size, radius);
        }
        let gain = delta.iter().map(|k| k * k).sum::<f64>().sqrt();
        Self { h, w, radius, gain }
    }

    /// Unit-variance spatially coherent noise.
    fn noise(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut f: Vec<f64> = (0..self.h * self.w).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..SMOOTHING_PASSES {
            box_filter(&mut f, self.h, self.w, self.radius);
        }
        f.iter_mut().for_each(|v| *v /= self.gain);
        f
    }
}

/// Rounds to the nearest `f32`, the precision of the on-disk format.
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Pixels where both instability triggers fire.
pub fn trigger_mask<T: Scalar>(stack: &PredictorStack<T>, cape_trigger: f64, omega_trigger: f64) -> Vec<bool> {
    stack
        .channel(Predictor::Cape)
        .iter()
        .zip(stack.channel(Predictor::Omega500))
        .map(|(&c, &o)| c.to_f64_lossy() > cape_trigger && o.to_f64_lossy() < omega_trigger)
        .collect()
}

/// Fraction of triggered pixels in the `(2r+1)²` neighbourhood of every
/// pixel, counting only in-grid neighbours.
pub fn neighbourhood_fraction(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; mask.len()];
    for r in 0..h {
        for c in 0..w {
            let (mut hit, mut n) = (0usize, 0usize);
            for rr in r.saturating_sub(radius)..(r + radius + 1).min(h) {
                for cc in c.saturating_sub(radius)..(c + radius + 1).min(w) {
                    hit += mask[rr * w + cc] as usize;
                    n += 1;
                }
            }
            out[r * w + c] = hit as f64 / n as f64;
        }
    }
    out
}

/// Generates a dataset. A pure function of `config`.
pub fn generate<T: Scalar>(config: &SynthConfig) -> Result<SampleSet<T>, SynthError> {
    config.validate()?;
    let spec = config.spec;
    let (h, w) = (spec.height(), spec.width());
    let n = spec.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let smoother = Smoother::new(h, w, config.smoothing_radius);

    let coeffs = [config.ar1_rain, config.ar1_cape, config.ar1_cape, config.ar1_rain, config.ar1_rain, config.ar1_rain];
    let mut latent: Vec<Vec<f64>> = (0..N_PREDICTORS).map(|_| smoother.noise(&mut rng)).collect();
    let mut background = vec![INITIAL_RAIN; n];
    let mut pending_burst: Option<Vec<f64>> = None;

    let to_t = |v: f64| T::from_f64(v).expect("finite value");
    let mut predictors = Vec::with_capacity(config.n_days);
    let mut targets = Vec::with_capacity(config.n_days);
    let mut truth = Vec::with_capacity(config.n_days);
    for day in 0..config.n_days {
        if day > 0 {
            for (field, &phi) in latent.iter_mut().zip(&coeffs) {
                let eps = smoother.noise(&mut rng);
                let s = (1.0 - phi * phi).sqrt();
                for (v, e) in field.iter_mut().zip(eps) {
                    *v = phi * *v + s * e;
                }
            }
            let eps = smoother.noise(&mut rng);
            let shock: f64 = rng.sample(StandardNormal);
            for (b, e) in background.iter_mut().zip(eps) {
                let innovation = (0.5 * e + RAIN_SHOCK * shock).max(0.0) * RAIN_INNOVATION;
                *b = config.ar1_rain * *b + config.noise_scale * innovation;
            }
        }

        let physical: [Box<dyn Fn(f64) -> f64>; N_PREDICTORS] = [
            Box::new(|a| 50.0 + 6.0 * a),
            Box::new(|a| (CAPE_MEAN + CAPE_SD * a).max(0.0)),
            Box::new(|a| OMEGA_SD * a),
            Box::new(|a| 8.0 * a),
            Box::new(|a| 3.0 + 4.0 * a),
            Box::new(|a| 1005.0 + 3.0 * a),
        ];
        let channels: Vec<Vec<T>> = latent
            .iter()
            .zip(&physical)
            .map(|(field, f)| field.iter().map(|&a| to_t(quantize(f(a)))).collect())
            .collect();
        let stack = PredictorStack::new(spec, channels, day)?;

        let (burst, mask) = match pending_burst.take() {
            Some(fraction) => {
                let mask: Vec<bool> = fraction.iter().map(|&d| d > 0.0).collect();
                let burst =
                    fraction.iter().map(|&d| if d > 0.0 { config.burst_intensity * (1.0 + d) } else { 0.0 }).collect();
                (burst, mask)
            }
            None => (vec![0.0; n], vec![false; n]),
        };
        let rain: Vec<T> = background.iter().zip(&burst).map(|(&b, &x)| to_t(quantize(b + x))).collect();

        let fired = trigger_mask(&stack, config.cape_trigger, config.omega_trigger);
        if fired.iter().any(|&f| f) {
            pending_burst = Some(neighbourhood_fraction(&fired, h, w, config.burst_radius));
        }

        targets.push(RainField::new(spec, rain, day)?);
        predictors.push(stack);
        truth.push(mask);
    }
    SampleSet::new(predictors, targets, truth)
}

/// Contiguous chronological split: the first `⌊n·train_frac⌋` days train,
/// the remainder evaluates.
pub fn split<T: Scalar>(set: &SampleSet<T>, train_frac: f64) -> Result<(SampleSet<T>, SampleSet<T>), SynthError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(SynthError::BadFraction(train_frac));
    }
    let n_train = (set.len() as f64 * train_frac).floor() as usize;
    let n_eval = set.len() - n_train;
    if n_train < MIN_SPLIT_DAYS || n_eval < MIN_SPLIT_DAYS {
        return Err(SynthError::SplitTooSmall { train: n_train, eval: n_eval });
    }
    Ok((set.slice(0..n_train), set.slice(n_train..set.len())))
}

#[cfg(test)]
mod tests;
