//! Closed-form random targets with exact central moments.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Lane, MomentSet, StochasticEvaluator, StreamKey};
use crate::error::{invalid, Error, Result};

/// Synthetic evaluator families on `x in [0, 1]`.
///
/// The uniform kinds scale `sin(pi x)` by `1 + omega` with
/// `omega ~ Unif(-delta/2, delta/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalyticFamily {
    /// `(1 + omega) sin(pi x)`
    UniformScaledSineU { delta: f64 },
    /// `(1 + omega) pi^2 sin(pi x)`
    UniformScaledSineF { delta: f64 },
    /// `mu + sigma Z`, independent of `x`
    GaussianLocation {
        #[serde(default)]
        mu: f64,
        sigma: f64,
    },
    /// Exact boundary-layer solution; no randomness.
    BoundaryLayerNoisefree { epsilon: f64 },
}

impl AnalyticFamily {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AnalyticFamily::UniformScaledSineU { delta } | AnalyticFamily::UniformScaledSineF { delta } => {
                if !(delta.is_finite() && delta >= 0.0) {
                    return Err(invalid("delta", format!("must be finite and >= 0, got {delta}")));
                }
            }
            AnalyticFamily::GaussianLocation { mu, sigma } => {
                if !mu.is_finite() {
                    return Err(invalid("mu", "must be finite"));
                }
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(invalid("sigma", format!("must be finite and >= 0, got {sigma}")));
                }
            }
            AnalyticFamily::BoundaryLayerNoisefree { epsilon } => {
                if !(epsilon.is_finite() && epsilon > 0.0) {
                    return Err(invalid("epsilon", format!("must be > 0, got {epsilon}")));
                }
            }
        }
        Ok(())
    }

    fn value(&self, x: f64, key: StreamKey) -> f64 {
        match *self {
            AnalyticFamily::UniformScaledSineU { delta } => (1.0 + uniform_noise(delta, key)) * (PI * x).sin(),
            AnalyticFamily::UniformScaledSineF { delta } => {
                (1.0 + uniform_noise(delta, key)) * PI * PI * (PI * x).sin()
            }
            AnalyticFamily::GaussianLocation { mu, sigma } => {
                let z: f64 = key.with_lane(Lane::Noise).rng().sample(StandardNormal);
                mu + sigma * z
            }
            AnalyticFamily::BoundaryLayerNoisefree { epsilon } => boundary_layer(x, epsilon),
        }
    }
}

fn uniform_noise(delta: f64, key: StreamKey) -> f64 {
    let u: f64 = key.with_lane(Lane::Noise).rng().random();
    delta * (u - 0.5)
}

fn check_unit(x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(invalid("x", format!("must lie in [0, 1], got {x}")));
    }
    Ok(())
}

/// One draw of the family at `x`.
pub fn eval_analytic(family: &AnalyticFamily, x: f64, key: StreamKey) -> Result<f64> {
    family.validate()?;
    check_unit(x)?;
    Ok(family.value(x, key))
}

/// `1 - (e^{x/eps} + e^{(1-x)/eps}) / (1 + e^{1/eps})`, solution of
/// `u - eps^2 u'' = 1`, `u(0) = u(1) = 0`.
pub fn exact_boundary_layer(x: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(invalid("epsilon", format!("must be > 0, got {epsilon}")));
    }
    check_unit(x)?;
    Ok(boundary_layer(x, epsilon))
}

// Numerator and denominator scaled by e^{-1/eps}; every exponent is <= 0.
fn boundary_layer(x: f64, epsilon: f64) -> f64 {
    let num = ((x - 1.0) / epsilon).exp() + (-x / epsilon).exp();
    let den = 1.0 + (-1.0 / epsilon).exp();
    1.0 - num / den
}

/// Exact `(mu, mu2, mu4)` of the family at `x`.
pub fn analytic_moments(family: &AnalyticFamily, x: f64) -> Result<MomentSet> {
    family.validate()?;
    check_unit(x)?;
    let m = match *family {
        AnalyticFamily::UniformScaledSineU { delta } => uniform_moments(delta, (PI * x).sin()),
        AnalyticFamily::UniformScaledSineF { delta } => uniform_moments(delta, PI * PI * (PI * x).sin()),
        AnalyticFamily::GaussianLocation { mu, sigma } => {
            let s2 = sigma * sigma;
            MomentSet { mu, mu2: s2, mu4: 3.0 * s2 * s2 }
        }
        AnalyticFamily::BoundaryLayerNoisefree { epsilon } => MomentSet {
            mu: boundary_layer(x, epsilon),
            mu2: 0.0,
            mu4: 0.0,
        },
    };
    m.validate().map_err(|e| Error::InvalidMoments(format!("{family:?} at x = {x}: {e}")))?;
    Ok(m)
}

// Var(omega) = delta^2 / 12, E[omega^4] = delta^4 / 80.
fn uniform_moments(delta: f64, scale: f64) -> MomentSet {
    let d2 = delta * delta;
    let s2 = scale * scale;
    MomentSet {
        mu: scale,
        mu2: d2 / 12.0 * s2,
        mu4: d2 * d2 / 80.0 * s2 * s2,
    }
}

impl StochasticEvaluator for AnalyticFamily {
    fn input_dim(&self) -> usize {
        1
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn sample_into(&self, x: &[f64], key: StreamKey, out: &mut [f64]) {
        out[0] = self.value(x[0], key);
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: x.len() });
        }
        self.validate()?;
        check_unit(x[0])
    }
}
