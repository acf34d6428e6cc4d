use crate::autodiff::Tensor;
use crate::grid::{normalize_predictors, ChannelStats, GridSpec, NormalizedStack, RainField, N_PREDICTORS};
use crate::scalar::Scalar;
use crate::synthgen::SampleSet;

use super::ModelError;

/// Forecast samples over a contiguous run of days. Sample `i` uses history
/// days `i .. i+T` and targets day `i + T − 1 + τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSet<T> {
    spec: GridSpec,
    stacks: Vec<NormalizedStack<T>>,
    rain: Vec<RainField<T>>,
    history: usize,
    lead: usize,
}

impl<T: Scalar> WindowedSet<T> {
    pub fn new(
        stacks: Vec<NormalizedStack<T>>,
        rain: Vec<RainField<T>>,
        history: usize,
        lead: usize,
    ) -> Result<Self, ModelError> {
        if history < 1 || lead < 1 {
            return Err(ModelError::InvalidConfig(format!("history {history} and lead {lead} must be at least 1")));
        }
        if stacks.len() != rain.len() {
            return Err(ModelError::Shape(format!("{} predictor days vs {} rain days", stacks.len(), rain.len())));
        }
        if stacks.len() < history + lead {
            return Err(ModelError::Shape(format!(
                "{} days cannot hold one sample of history {history} and lead {lead}",
                stacks.len()
            )));
        }
        let spec = stacks[0].spec;
        if stacks.iter().any(|s| s.spec != spec) || rain.iter().any(|r| *r.spec() != spec) {
            return Err(ModelError::Shape("days lie on different grids".into()));
        }
        Ok(Self { spec, stacks, rain, history, lead })
    }

    /// Normalizes `set` with `stats` and windows it.
    pub fn from_samples(
        set: &SampleSet<T>,
        stats: &ChannelStats<T>,
        history: usize,
        lead: usize,
    ) -> Result<Self, ModelError> {
        let stacks = normalize_predictors(set.predictors(), stats)?;
        Self::new(stacks, set.targets().to_vec(), history, lead)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.stacks.len() + 1 - self.history - self.lead
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn lead(&self) -> usize {
        self.lead
    }

    /// Position of sample `i`'s target within the underlying days.
    pub fn target_offset(&self, i: usize) -> usize {
        i + self.history - 1 + self.lead
    }

    pub fn target(&self, i: usize) -> &RainField<T> {
        &self.rain[self.target_offset(i)]
    }

    /// The last history day's observation for sample `i`.
    pub fn last_observed(&self, i: usize) -> &RainField<T> {
        &self.rain[i + self.history - 1]
    }

    /// `[N, 6·T, H, W]` inputs, day-major channels.
    pub fn input_batch(&self, samples: &[usize]) -> Tensor<T> {
        let px = self.spec.len();
        let mut data = Vec::with_capacity(samples.len() * self.history * N_PREDICTORS * px);
        for &i in samples {
            for stack in &self.stacks[i..i + self.history] {
                for ch in &stack.channels {
                    data.extend_from_slice(ch);
                }
            }
        }
        let shape = vec![samples.len(), self.history * N_PREDICTORS, self.spec.height(), self.spec.width()];
        Tensor::new(shape, data).expect("batch shape matches data")
    }

    /// `[N, 1, H, W]` raw target rainfall.
    pub fn target_batch(&self, samples: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(samples.len() * self.spec.len());
        for &i in samples {
            data.extend_from_slice(self.target(i).values());
        }
        Tensor::new(vec![samples.len(), 1, self.spec.height(), self.spec.width()], data)
            .expect("batch shape matches data")
    }
}
