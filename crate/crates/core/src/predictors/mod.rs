//! Stochastic evaluators: the dropout MLP, analytic targets with known
//! moments, and the keyed random streams they draw from.

mod analytic;
mod mlp;
mod stream;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use analytic::{analytic_moments, eval_analytic, exact_boundary_layer, AnalyticFamily};
pub use mlp::{draw_mask, forward_deterministic, forward_dropout, Activation, DropoutMlp, MlpSpec, MlpWeights};
pub use stream::{derive_seed, Lane, StreamKey};

/// A random predictor `x -> D(x; theta)`.
///
/// One call is one stochastic forward pass. The randomness is fully
/// determined by the key, so implementations must be pure.
pub trait StochasticEvaluator: Send + Sync {
    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    /// Writes one draw into `out` (length `output_dim`). Inputs are assumed
    /// to have passed [`check_input`](Self::check_input).
    fn sample_into(&self, x: &[f64], key: StreamKey, out: &mut [f64]);

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

impl<E: StochasticEvaluator + ?Sized> StochasticEvaluator for &E {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn sample_into(&self, x: &[f64], key: StreamKey, out: &mut [f64]) {
        (**self).sample_into(x, key, out)
    }
    fn check_input(&self, x: &[f64]) -> Result<()> {
        (**self).check_input(x)
    }
}

impl<E: StochasticEvaluator + ?Sized> StochasticEvaluator for Box<E> {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn sample_into(&self, x: &[f64], key: StreamKey, out: &mut [f64]) {
        (**self).sample_into(x, key, out)
    }
    fn check_input(&self, x: &[f64]) -> Result<()> {
        (**self).check_input(x)
    }
}

/// Known central moments `(mu, mu2, mu4)` of an evaluator at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub mu: f64,
    pub mu2: f64,
    pub mu4: f64,
}

impl MomentSet {
    pub fn new(mu: f64, mu2: f64, mu4: f64) -> Result<Self> {
        let m = Self { mu, mu2, mu4 };
        m.validate()?;
        Ok(m)
    }

    /// Zero excess kurtosis: `mu4 = 3 mu2^2`.
    pub fn closure(mu: f64, mu2: f64) -> Result<Self> {
        Self::new(mu, mu2, 3.0 * mu2 * mu2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.mu2.is_finite() && self.mu4.is_finite()) {
            return Err(Error::InvalidMoments("moments must be finite".into()));
        }
        if self.mu2 < 0.0 || self.mu4 < 0.0 {
            return Err(Error::InvalidMoments("central moments must be nonnegative".into()));
        }
        // mu4 >= mu2^2, with slack for rounding in derived moment sets
        if self.mu4 < self.mu2 * self.mu2 * (1.0 - 1e-12) {
            return Err(Error::InvalidMoments(format!(
                "mu4 = {} < mu2^2 = {}",
                self.mu4,
                self.mu2 * self.mu2
            )));
        }
        Ok(())
    }

    /// `mu4 - 3 mu2^2`, zero for Gaussian-like tails.
    pub fn excess_fourth(&self) -> f64 {
        self.mu4 - 3.0 * self.mu2 * self.mu2
    }
}

/// Wraps an evaluator and counts forward passes.
#[derive(Debug)]
pub struct CountingEvaluator<E> {
    inner: E,
    calls: AtomicU64,
}

impl<E> CountingEvaluator<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn into_inner(self) -> E {
        self.inner
    }
}

impl<E: StochasticEvaluator> StochasticEvaluator for CountingEvaluator<E> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }
    fn sample_into(&self, x: &[f64], key: StreamKey, out: &mut [f64]) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.sample_into(x, key, out)
    }
    fn check_input(&self, x: &[f64]) -> Result<()> {
        self.inner.check_input(x)
    }
}

/// Replays a fixed scalar sequence: the draw with inner index `t` (1-based)
/// is `draws[(t - 1) % len]`, whatever the other key fields are.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedEvaluator {
    draws: Vec<f64>,
}

impl ScriptedEvaluator {
    pub fn new(draws: Vec<f64>) -> Result<Self> {
        if draws.is_empty() {
            return Err(crate::error::invalid("draws", "script must not be empty"));
        }
        Ok(Self { draws })
    }
}

impl StochasticEvaluator for ScriptedEvaluator {
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn sample_into(&self, _x: &[f64], key: StreamKey, out: &mut [f64]) {
        let idx = (key.inner.max(1) - 1) as usize % self.draws.len();
        out[0] = self.draws[idx];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moment_set_rejects_cauchy_schwarz_violation() {
        assert!(MomentSet::new(0.0, 1.0, 0.5).is_err());
        assert!(MomentSet::new(0.0, -1.0, 1.0).is_err());
        assert!(MomentSet::new(0.0, 1.0, 1.0).is_ok());
        let g = MomentSet::closure(2.0, 1.5).unwrap();
        assert_eq!(g.excess_fourth(), 0.0);
    }

    #[test]
    fn counting_wrapper_tallies_calls() {
        let e = CountingEvaluator::new(ScriptedEvaluator::new(vec![1.0, 2.0]).unwrap());
        let mut out = [0.0];
        for t in 1..=5 {
            e.sample_into(&[0.0], StreamKey::new(0, 0, 0, t), &mut out);
        }
        assert_eq!(e.count(), 5);
        assert_eq!(out[0], 1.0);
        e.reset();
        assert_eq!(e.count(), 0);
    }
}
