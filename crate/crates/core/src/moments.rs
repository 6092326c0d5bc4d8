//! Single-fidelity Monte Carlo estimators of the predictive mean and
//! variance, outer replication, and their closed-form sampling variances.
//!
//! All estimators are componentwise: an evaluator with `n` outputs yields
//! vectors of length `n` everywhere a scalar appears in the formulas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictors::{MomentSet, StochasticEvaluator, StreamKey};

/// Per-component running mean and sum of squared deviations (Welford).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMoments {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Sum of squared deviations from the mean.
    pub fn sum_sq(&self) -> &[f64] {
        &self.m2
    }

    #[inline]
    pub fn push(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.mean.len());
        self.n += 1;
        let n = self.n as f64;
        for ((mean, m2), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(values) {
            let delta = v - *mean;
            *mean += delta / n;
            *m2 += delta * (v - *mean);
        }
    }

    /// Unbiased sample variance; zero below two observations.
    pub fn variance(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.dim()];
        }
        let d = (self.n - 1) as f64;
        self.m2.iter().map(|m| m / d).collect()
    }

    /// Pools two disjoint samples into the statistics of their union.
    pub fn merge(&self, other: &RunningMoments) -> RunningMoments {
        debug_assert_eq!(self.dim(), other.dim());
        if other.n == 0 {
            return self.clone();
        }
        if self.n == 0 {
            return other.clone();
        }
        let (mean, m2) = self
            .mean
            .iter()
            .zip(&self.m2)
            .zip(other.mean.iter().zip(&other.m2))
            .map(|((&ma, &sa), (&mb, &sb))| pooled_merge(self.n, ma, sa, other.n, mb, sb))
            .unzip();
        RunningMoments {
            n: self.n + other.n,
            mean,
            m2,
        }
    }
}

/// Union of two samples given `(count, mean, sum of squared deviations)`.
///
/// `SS = SS_a + SS_b + n_a n_b / n (mean_a - mean_b)^2`; the mean is advanced
/// from `mean_a` so that equal means reproduce `mean_a` exactly.
#[inline]
pub(crate) fn pooled_merge(na: u64, mean_a: f64, ss_a: f64, nb: u64, mean_b: f64, ss_b: f64) -> (f64, f64) {
    let n = (na + nb) as f64;
    let (na, nb) = (na as f64, nb as f64);
    let delta = mean_b - mean_a;
    let mean = mean_a + delta * (nb / n);
    let ss = ss_a + ss_b + delta * delta * (na * nb / n);
    (mean, ss)
}

/// Sample mean `Y(x; T)` and unbiased sample variance `V(x; T)` of `t` draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleFidelityEstimate {
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
    pub evals: u64,
}

impl SingleFidelityEstimate {
    pub(crate) fn from_moments(acc: &RunningMoments) -> Self {
        Self {
            y: acc.mean().to_vec(),
            v: acc.variance(),
            t: acc.count() as usize,
            evals: acc.count(),
        }
    }
}

/// Outer averages and outer sample variances of `m` independent replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterReplicates {
    pub y_bar: Vec<f64>,
    pub v_bar: Vec<f64>,
    pub s2_y: Vec<f64>,
    pub s2_v: Vec<f64>,
    pub m: usize,
    pub t: usize,
    pub evals: u64,
}

/// Accumulates draws with inner indices `from..=to` of the replicate `key`.
pub(crate) fn accumulate<E: StochasticEvaluator + ?Sized>(
    evaluator: &E,
    x: &[f64],
    key: StreamKey,
    from: u64,
    to: u64,
    buf: &mut [f64],
) -> RunningMoments {
    let mut acc = RunningMoments::new(buf.len());
    for inner in from..=to {
        evaluator.sample_into(x, key.with_inner(inner), buf);
        acc.push(buf);
    }
    acc
}

pub(crate) fn check_fidelity(t: usize) -> Result<()> {
    if t < 2 {
        return Err(Error::FidelityTooSmall(t));
    }
    Ok(())
}

/// `Y(x; t)` and `V(x; t)` from the draws with inner indices `1..=t` of `key`.
pub fn estimate_single<E: StochasticEvaluator + ?Sized>(
    evaluator: &E,
    x: &[f64],
    t: usize,
    key: StreamKey,
) -> Result<SingleFidelityEstimate> {
    check_fidelity(t)?;
    evaluator.check_input(x)?;
    let mut buf = vec![0.0; evaluator.output_dim()];
    let acc = accumulate(evaluator, x, key, 1, t as u64, &mut buf);
    Ok(SingleFidelityEstimate::from_moments(&acc))
}

/// `m` replicates at fidelity `t`; replicate `i` uses key `(seed, i, 0)`.
pub fn outer_replicate<E: StochasticEvaluator + ?Sized>(
    evaluator: &E,
    x: &[f64],
    m: usize,
    t: usize,
    seed: u64,
) -> Result<OuterReplicates> {
    if m < 2 {
        return Err(Error::OuterCountTooSmall(m));
    }
    check_fidelity(t)?;
    evaluator.check_input(x)?;
    let dim = evaluator.output_dim();
    let mut buf = vec![0.0; dim];
    let mut ys = RunningMoments::new(dim);
    let mut vs = RunningMoments::new(dim);
    for rep in 1..=m as u64 {
        let acc = accumulate(evaluator, x, StreamKey::replicate(seed, rep, 0), 1, t as u64, &mut buf);
        ys.push(acc.mean());
        vs.push(&acc.variance());
    }
    Ok(OuterReplicates {
        y_bar: ys.mean().to_vec(),
        v_bar: vs.mean().to_vec(),
        s2_y: ys.variance(),
        s2_v: vs.variance(),
        m,
        t,
        evals: (m * t) as u64,
    })
}

/// `(Var[Y(t)], Var[V(t)]) = (mu2 / t, (mu4 - (t-3)/(t-1) mu2^2) / t)`.
pub fn theoretical_single_variances(moments: &MomentSet, t: usize) -> Result<(f64, f64)> {
    check_fidelity(t)?;
    moments.validate()?;
    let tf = t as f64;
    let var_y = moments.mu2 / tf;
    let var_v = (moments.mu4 - (tf - 3.0) / (tf - 1.0) * moments.mu2 * moments.mu2) / tf;
    Ok((var_y, var_v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictors::{AnalyticFamily, ScriptedEvaluator};

    const X: [f64; 1] = [0.5];

    #[test]
    fn constant_evaluator_has_zero_variance() {
        let c = AnalyticFamily::GaussianLocation { mu: 0.3, sigma: 0.0 };
        for t in [2, 5, 64] {
            let e = estimate_single(&c, &X, t, StreamKey::replicate(1, 1, 0)).unwrap();
            assert_eq!(e.y, vec![0.3]);
            assert_eq!(e.v, vec![0.0]);
            assert_eq!(e.evals, t as u64);
        }
    }

    #[test]
    fn two_point_sample() {
        let s = ScriptedEvaluator::new(vec![0.0, 2.0]).unwrap();
        let e = estimate_single(&s, &X, 2, StreamKey::replicate(0, 1, 0)).unwrap();
        assert_eq!((e.y[0], e.v[0]), (1.0, 2.0));
    }

    #[test]
    fn rejects_fidelity_below_two() {
        let c = AnalyticFamily::GaussianLocation { mu: 0.0, sigma: 1.0 };
        assert_eq!(estimate_single(&c, &X, 1, StreamKey::replicate(0, 1, 0)), Err(Error::FidelityTooSmall(1)));
        assert_eq!(outer_replicate(&c, &X, 1, 10, 0), Err(Error::OuterCountTooSmall(1)));
        assert!(theoretical_single_variances(&MomentSet::closure(0.0, 1.0).unwrap(), 1).is_err());
    }

    #[test]
    fn gaussian_single_estimate_clt_bounds() {
        let g = AnalyticFamily::GaussianLocation { mu: 0.0, sigma: 1.0 };
        let e = estimate_single(&g, &X, 10_000, StreamKey::replicate(3, 1, 0)).unwrap();
        assert!(e.y[0].abs() < 4.0 / 100.0);
        // sd of V is sqrt(2 / 9999) ~ 0.0141; 0.06 is > 4 sd
        assert!((e.v[0] - 1.0).abs() < 0.06);
    }

    #[test]
    fn outer_replicate_is_deterministic_and_counts() {
        let g = AnalyticFamily::UniformScaledSineU { delta: 0.3 };
        let a = outer_replicate(&g, &X, 7, 9, 99).unwrap();
        let b = outer_replicate(&g, &X, 7, 9, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.evals, 63);
        let c = AnalyticFamily::GaussianLocation { mu: 2.0, sigma: 0.0 };
        let z = outer_replicate(&c, &X, 5, 4, 1).unwrap();
        assert_eq!((z.s2_y[0], z.s2_v[0]), (0.0, 0.0));
    }

    #[test]
    fn outer_variance_in_chi_square_band() {
        let g = AnalyticFamily::GaussianLocation { mu: 0.0, sigma: 1.0 };
        let r = outer_replicate(&g, &X, 200, 100, 5).unwrap();
        let ratio = r.s2_y[0] / 0.01;
        assert!((0.6..=1.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn theoretical_values() {
        let g = MomentSet::closure(0.0, 1.0).unwrap();
        let (_, vv) = theoretical_single_variances(&g, 2).unwrap();
        assert!((vv - 2.0).abs() < 1e-15);
        let (vy, vv) = theoretical_single_variances(&g, 10).unwrap();
        assert!((vy - 0.1).abs() < 1e-15);
        // classical 2 sigma^4 / (T - 1)
        assert!((vv - 2.0 / 9.0).abs() < 1e-15);
        let z = MomentSet::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(theoretical_single_variances(&z, 7).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn prefix_consistency() {
        let g = AnalyticFamily::GaussianLocation { mu: 1.0, sigma: 2.0 };
        let key = StreamKey::replicate(12, 3, 0);
        let long = estimate_single(&g, &X, 50, key).unwrap();
        let draws: Vec<f64> = (1..=50)
            .map(|t| {
                let mut out = [0.0];
                g.sample_into(&X, key.with_inner(t), &mut out);
                out[0]
            })
            .collect();
        let mut acc = RunningMoments::new(1);
        for (i, d) in draws.iter().enumerate() {
            acc.push(&[*d]);
            let t = i + 1;
            if t >= 2 {
                let short = estimate_single(&g, &X, t, key).unwrap();
                assert_eq!(short.y[0].to_bits(), acc.mean()[0].to_bits());
                assert_eq!(short.v[0].to_bits(), acc.variance()[0].to_bits());
            }
        }
        assert_eq!(long.y[0].to_bits(), acc.mean()[0].to_bits());
    }

    #[test]
    fn merge_matches_sequential_push() {
        let data: Vec<f64> = (0..20).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let mut a = RunningMoments::new(1);
        let mut b = RunningMoments::new(1);
        let mut all = RunningMoments::new(1);
        for (i, d) in data.iter().enumerate() {
            if i < 8 { a.push(&[*d]) } else { b.push(&[*d]) }
            all.push(&[*d]);
        }
        let m = a.merge(&b);
        assert_eq!(m.count(), 20);
        assert!((m.mean()[0] - all.mean()[0]).abs() < 1e-14);
        assert!((m.variance()[0] - all.variance()[0]).abs() < 1e-13);
    }
}
