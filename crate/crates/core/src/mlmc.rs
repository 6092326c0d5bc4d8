//! Coupled coarse/fine sampling and the multilevel estimators of the
//! predictive mean and variance.
//!
//! Replicate `m` of level `l` draws with keys `(seed, m, l, t)`. The fine
//! estimator of a level reuses the coarse prefix `t = 1..=T_{l-1}` and extends
//! it with `t = T_{l-1}+1..=T_l`; the fine statistics are obtained from the
//! coarse ones and the new block through the pooled-variance identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{accumulate, check_fidelity, pooled_merge, RunningMoments, SingleFidelityEstimate};
use crate::predictors::{MomentSet, StochasticEvaluator, StreamKey};

/// Strictly increasing inner fidelities `T_0 < ... < T_L` with `T_0 >= 2`
/// and `T_l - T_{l-1} >= 2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct FidelityLadder(Vec<usize>);

impl FidelityLadder {
    pub fn new(ts: Vec<usize>) -> Result<Self> {
        let Some(&t0) = ts.first() else {
            return Err(Error::InvalidLadder("ladder is empty".into()));
        };
        if t0 < 2 {
            return Err(Error::InvalidLadder(format!("T_0 = {t0} < 2")));
        }
        for (l, pair) in ts.windows(2).enumerate() {
            if pair[1] < pair[0] + 2 {
                return Err(Error::InvalidLadder(format!(
                    "T_{} - T_{} = {} - {} < 2",
                    l + 1,
                    l,
                    pair[1],
                    pair[0]
                )));
            }
        }
        Ok(Self(ts))
    }

    pub fn ts(&self) -> &[usize] {
        &self.0
    }

    /// Number of correction levels `L`.
    pub fn levels(&self) -> usize {
        self.0.len() - 1
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn finest(&self) -> usize {
        *self.0.last().unwrap()
    }
}

impl TryFrom<Vec<usize>> for FidelityLadder {
    type Error = Error;

    fn try_from(ts: Vec<usize>) -> Result<Self> {
        Self::new(ts)
    }
}

impl From<FidelityLadder> for Vec<usize> {
    fn from(l: FidelityLadder) -> Self {
        l.0
    }
}

/// One coupled level increment `(dY, dV)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementSample {
    pub dy: Vec<f64>,
    pub dv: Vec<f64>,
    pub level: u64,
    pub new_evals: u64,
}

/// Coarse and fine estimators sharing a draw prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledPair {
    pub coarse: SingleFidelityEstimate,
    pub fine: SingleFidelityEstimate,
    pub level: u64,
}

impl CoupledPair {
    pub fn increment(&self) -> IncrementSample {
        let diff = |f: &[f64], c: &[f64]| f.iter().zip(c).map(|(a, b)| a - b).collect();
        IncrementSample {
            dy: diff(&self.fine.y, &self.coarse.y),
            dv: diff(&self.fine.v, &self.coarse.v),
            level: self.level,
            new_evals: (self.fine.t - self.coarse.t) as u64,
        }
    }

    /// Forward passes actually performed: the fine count only.
    pub fn evals(&self) -> u64 {
        self.fine.t as u64
    }
}

fn check_spacing(t_coarse: usize, t_fine: usize) -> Result<()> {
    check_fidelity(t_coarse)?;
    if t_fine < t_coarse + 2 {
        return Err(Error::InvalidLadder(format!(
            "fine fidelity {t_fine} must exceed coarse {t_coarse} by at least 2"
        )));
    }
    Ok(())
}

// Coarse statistics over 1..=t_coarse, fine statistics over 1..=t_fine.
fn coupled_moments<E: StochasticEvaluator + ?Sized>(
    evaluator: &E,
    x: &[f64],
    t_coarse: usize,
    t_fine: usize,
    key: StreamKey,
    buf: &mut [f64],
) -> (RunningMoments, RunningMoments) {
    let coarse = accumulate(evaluator, x, key, 1, t_coarse as u64, buf);
    let block = accumulate(evaluator, x, key, t_coarse as u64 + 1, t_fine as u64, buf);
    let fine = coarse.merge(&block);
    (coarse, fine)
}

/// Coarse (`1..=t_coarse`) and fine (`1..=t_fine`) estimators from one draw
/// sequence under `key`; performs `t_fine` evaluations.
pub fn coupled_pair<E: StochasticEvaluator + ?Sized>(
    evaluator: &E,
    x: &[f64],
    t_coarse: usize,
    t_fine: usize,
    key: StreamKey,
) -> Result<CoupledPair> {
    check_spacing(t_coarse, t_fine)?;
    evaluator.check_input(x)?;
    let mut buf = vec![0.0; evaluator.output_dim()];
    let (coarse, fine) = coupled_moments(evaluator, x, t_coarse, t_fine, key, &mut buf);
    Ok(CoupledPair {
        coarse: SingleFidelityEstimate::from_moments(&coarse),
        fine: SingleFidelityEstimate::from_moments(&fine),
        level: key.level,
    })
}

/// Extends a coarse `(v, y)` over `n_coarse` draws by a block of new draws;
/// returns the fine `(v, y)` over the union.
///
/// `(T-1) V_f = (T_c-1) V_c + (T_b-1) V_b + T_c T_b / T (mean_c - mean_b)^2`
pub fn pooled_variance_update(v_coarse: f64, y_coarse: f64, n_coarse: usize, block: &[f64]) -> Result<(f64, f64)> {
    if n_coarse < 2 {
        return Err(Error::FidelityTooSmall(n_coarse));
    }
    if block.len() < 2 {
        return Err(crate::error::invalid("block", format!("needs at least 2 draws, got {}", block.len())));
    }
    let mut b = RunningMoments::new(1);
    for &d in block {
        b.push(&[d]);
    }
    let ss_coarse = (n_coarse - 1) as f64 * v_coarse;
    let (y_fine, ss_fine) = pooled_merge(n_coarse as u64, y_coarse, ss_coarse, b.count(), b.mean()[0], b.sum_sq()[0]);
    let n_fine = n_coarse + block.len();
    Ok((ss_fine / (n_fine - 1) as f64, y_fine))
}

/// Per-level outer statistics. Level 0 holds `Y(T_0)`, `V(T_0)`; level
/// `l >= 1` holds the increments `dY`, `dV`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub t: usize,
    pub m: usize,
    pub mean_y: Vec<f64>,
    pub var_y: Vec<f64>,
    pub mean_v: Vec<f64>,
    pub var_v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmcEstimate {
    pub y_mlmc: Vec<f64>,
    pub v_mlmc: Vec<f64>,
    pub s2_y: Vec<f64>,
    pub s2_v: Vec<f64>,
    pub level_stats: Vec<LevelStats>,
    /// Price under the coupled cost model.
    pub evals_coupled: u64,
    /// Price under the uncoupled cost model.
    pub evals_uncoupled_equivalent: u64,
    /// Forward passes actually performed. Levels draw independently, so each
    /// level-`l` replicate evaluates its full `T_l` draws.
    pub evals_performed: u64,
}

impl MlmcEstimate {
    /// `(S_Y^2, S_V^2) = sum_l var_l / M_l`, summed in level order.
    pub fn s2_from_levels(levels: &[LevelStats]) -> (Vec<f64>, Vec<f64>) {
        let dim = levels.first().map_or(0, |l| l.var_y.len());
        let mut s2_y = vec![0.0; dim];
        let mut s2_v = vec![0.0; dim];
        for l in levels {
            let m = l.m as f64;
            for c in 0..dim {
                s2_y[c] += l.var_y[c] / m;
                s2_v[c] += l.var_v[c] / m;
            }
        }
        (s2_y, s2_v)
    }

    pub fn output_dim(&self) -> usize {
        self.y_mlmc.len()
    }

    pub fn is_finite(&self) -> bool {
        self.y_mlmc
            .iter()
            .chain(&self.v_mlmc)
            .chain(&self.s2_y)
            .chain(&self.s2_v)
            .all(|v| v.is_finite())
    }
}

fn check_allocation(ladder: &FidelityLadder, ms: &[usize]) -> Result<()> {
    if ms.len() != ladder.len() {
        return Err(Error::DimensionMismatch {
            expected: ladder.len(),
            got: ms.len(),
        });
    }
    if let Some(&m) = ms.iter().find(|&&m| m < 2) {
        return Err(Error::OuterCountTooSmall(m));
    }
    Ok(())
}

/// The coupled MLMC estimators at `x` for allocation `ms`.
pub fn mlmc_estimate<E: StochasticEvaluator + ?Sized>(
    evaluator: &E,
    x: &[f64],
    ladder: &FidelityLadder,
    ms: &[usize],
    seed: u64,
) -> Result<MlmcEstimate> {
    check_allocation(ladder, ms)?;
    evaluator.check_input(x)?;
    let dim = evaluator.output_dim();
    let ts = ladder.ts();
    let mut buf = vec![0.0; dim];
    let mut level_stats = Vec::with_capacity(ts.len());

    let mut ys = RunningMoments::new(dim);
    let mut vs = RunningMoments::new(dim);
    for rep in 1..=ms[0] as u64 {
        let acc = accumulate(evaluator, x, StreamKey::replicate(seed, rep, 0), 1, ts[0] as u64, &mut buf);
        ys.push(acc.mean());
        vs.push(&acc.variance());
    }
    level_stats.push(LevelStats {
        level: 0,
        t: ts[0],
        m: ms[0],
        mean_y: ys.mean().to_vec(),
        var_y: ys.variance(),
        mean_v: vs.mean().to_vec(),
        var_v: vs.variance(),
    });

    let mut dy = vec![0.0; dim];
    let mut dv = vec![0.0; dim];
    for l in 1..ts.len() {
        let mut dys = RunningMoments::new(dim);
        let mut dvs = RunningMoments::new(dim);
        for rep in 1..=ms[l] as u64 {
            let key = StreamKey::replicate(seed, rep, l as u64);
            let (coarse, fine) = coupled_moments(evaluator, x, ts[l - 1], ts[l], key, &mut buf);
            let (vc, vf) = (coarse.variance(), fine.variance());
            for c in 0..dim {
                dy[c] = fine.mean()[c] - coarse.mean()[c];
                dv[c] = vf[c] - vc[c];
            }
            dys.push(&dy);
            dvs.push(&dv);
        }
        level_stats.push(LevelStats {
            level: l,
            t: ts[l],
            m: ms[l],
            mean_y: dys.mean().to_vec(),
            var_y: dys.variance(),
            mean_v: dvs.mean().to_vec(),
            var_v: dvs.variance(),
        });
    }

    let mut y_mlmc = vec![0.0; dim];
    let mut v_mlmc = vec![0.0; dim];
    for l in &level_stats {
        for c in 0..dim {
            y_mlmc[c] += l.mean_y[c];
            v_mlmc[c] += l.mean_v[c];
        }
    }
    let (s2_y, s2_v) = MlmcEstimate::s2_from_levels(&level_stats);
    Ok(MlmcEstimate {
        y_mlmc,
        v_mlmc,
        s2_y,
        s2_v,
        level_stats,
        evals_coupled: coupled_evals(ladder, ms),
        evals_uncoupled_equivalent: uncoupled_evals(ladder, ms),
        evals_performed: uncoupled_evals(ladder, ms),
    })
}

/// `T_0 M_0 + sum (T_l - T_{l-1}) M_l`.
pub fn coupled_evals(ladder: &FidelityLadder, ms: &[usize]) -> u64 {
    let ts = ladder.ts();
    ms.iter()
        .enumerate()
        .map(|(l, &m)| {
            let a = if l == 0 { ts[0] } else { ts[l] - ts[l - 1] };
            (a * m) as u64
        })
        .sum()
}

/// `sum T_l M_l`.
pub fn uncoupled_evals(ladder: &FidelityLadder, ms: &[usize]) -> u64 {
    ladder.ts().iter().zip(ms).map(|(&t, &m)| (t * m) as u64).sum()
}

/// Mean-target level variances divided by `mu2`: `1/T_0`, `1/T_{l-1} - 1/T_l`.
pub fn mean_level_weights(ladder: &FidelityLadder) -> Vec<f64> {
    let ts = ladder.ts();
    std::iter::once(1.0 / ts[0] as f64)
        .chain(ts.windows(2).map(|p| 1.0 / p[0] as f64 - 1.0 / p[1] as f64))
        .collect()
}

/// `Var[dV]` for the nested pair `(t_coarse, t_fine)`:
/// `(1/T_c - 1/T_f)(mu4 - 3 mu2^2) + 2 (1/(T_c-1) - 1/(T_f-1)) mu2^2`.
pub fn increment_variance_v(moments: &MomentSet, t_coarse: usize, t_fine: usize) -> f64 {
    let (tc, tf) = (t_coarse as f64, t_fine as f64);
    (1.0 / tc - 1.0 / tf) * moments.excess_fourth()
        + 2.0 * (1.0 / (tc - 1.0) - 1.0 / (tf - 1.0)) * moments.mu2 * moments.mu2
}

/// Variance-target level variances `w_0 = Var[V(T_0)]`, `w_l = Var[dV(T_l)]`.
pub fn variance_level_weights(moments: &MomentSet, ladder: &FidelityLadder) -> Vec<f64> {
    let ts = ladder.ts();
    let t0 = ts[0] as f64;
    let w0 = (moments.mu4 - (t0 - 3.0) / (t0 - 1.0) * moments.mu2 * moments.mu2) / t0;
    std::iter::once(w0)
        .chain(ts.windows(2).map(|p| increment_variance_v(moments, p[0], p[1])))
        .collect()
}

/// Closure (`mu4 = 3 mu2^2`) weights without the common factor `2 mu2^2`.
pub fn closure_level_weights(ladder: &FidelityLadder) -> Vec<f64> {
    let ts = ladder.ts();
    std::iter::once(1.0 / (ts[0] as f64 - 1.0))
        .chain(ts.windows(2).map(|p| 1.0 / (p[0] as f64 - 1.0) - 1.0 / (p[1] as f64 - 1.0)))
        .collect()
}

/// Expected `(S_Y^2, S_V^2)` for a ladder and (possibly fractional) allocation.
pub fn theoretical_mlmc_variances(moments: &MomentSet, ladder: &FidelityLadder, ms: &[f64]) -> Result<(f64, f64)> {
    moments.validate()?;
    if ms.len() != ladder.len() {
        return Err(Error::DimensionMismatch {
            expected: ladder.len(),
            got: ms.len(),
        });
    }
    if ms.iter().any(|&m| !(m > 0.0)) {
        return Err(crate::error::invalid("allocation", "sample counts must be positive"));
    }
    let e_y = moments.mu2 * mean_level_weights(ladder).iter().zip(ms).map(|(v, m)| v / m).sum::<f64>();
    let e_v = variance_level_weights(moments, ladder).iter().zip(ms).map(|(w, m)| w / m).sum::<f64>();
    Ok((e_y, e_v))
}

/// `Cov[V(T_f), V(T_c)]` when the coarse sample is a prefix of the fine one.
pub fn cov_overlap(moments: &MomentSet, t_coarse: usize, t_fine: usize) -> Result<f64> {
    check_fidelity(t_coarse)?;
    if t_fine <= t_coarse {
        return Err(crate::error::invalid("t_fine", format!("{t_fine} must exceed t_coarse = {t_coarse}")));
    }
    moments.validate()?;
    let (_, var_vc) = crate::moments::theoretical_single_variances(moments, t_coarse)?;
    let (tc, tf) = (t_coarse as f64, t_fine as f64);
    Ok((tc - 1.0) / (tf - 1.0) * var_vc + (tf - tc) / (tc * tf * (tf - 1.0)) * moments.excess_fourth())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{estimate_single, outer_replicate, theoretical_single_variances};
    use crate::predictors::{AnalyticFamily, CountingEvaluator, ScriptedEvaluator};

    const X: [f64; 1] = [0.5];

    fn ladder(ts: &[usize]) -> FidelityLadder {
        FidelityLadder::new(ts.to_vec()).unwrap()
    }

    #[test]
    fn ladder_validation() {
        assert!(FidelityLadder::new(vec![]).is_err());
        assert!(FidelityLadder::new(vec![1, 4]).is_err());
        assert!(FidelityLadder::new(vec![4, 5]).is_err());
        assert!(FidelityLadder::new(vec![4, 4]).is_err());
        assert!(FidelityLadder::new(vec![2, 4, 6]).is_ok());
        let l: FidelityLadder = serde_json::from_str("[4,8,16]").unwrap();
        assert_eq!(l.levels(), 2);
        assert!(serde_json::from_str::<FidelityLadder>("[4,5]").is_err());
    }

    #[test]
    fn scripted_coupled_pair() {
        let s = ScriptedEvaluator::new(vec![1.0, 3.0, 2.0, 6.0]).unwrap();
        let p = coupled_pair(&s, &X, 2, 4, StreamKey::replicate(0, 1, 1)).unwrap();
        assert_eq!((p.coarse.y[0], p.coarse.v[0]), (2.0, 2.0));
        assert_eq!(p.fine.y[0], 3.0);
        assert!((p.fine.v[0] - 14.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.increment().new_evals, 2);
        assert!(coupled_pair(&s, &X, 2, 3, StreamKey::replicate(0, 1, 1)).is_err());
    }

    #[test]
    fn constant_increments_are_exactly_zero() {
        let c = AnalyticFamily::GaussianLocation { mu: 0.1, sigma: 0.0 };
        for (tc, tf) in [(2, 4), (3, 11), (7, 50)] {
            let inc = coupled_pair(&c, &X, tc, tf, StreamKey::replicate(1, 1, 1)).unwrap().increment();
            assert_eq!((inc.dy[0], inc.dv[0]), (0.0, 0.0));
        }
    }

    #[test]
    fn coarse_member_matches_uncoupled_run() {
        let g = AnalyticFamily::UniformScaledSineU { delta: 0.7 };
        for rep in 1..20 {
            let key = StreamKey::replicate(5, rep, 2);
            let p = coupled_pair(&g, &X, 6, 13, key).unwrap();
            let single = estimate_single(&g, &X, 6, key).unwrap();
            assert_eq!(p.coarse, single);
        }
    }

    #[test]
    fn coupled_pair_performs_only_fine_evaluations() {
        let c = CountingEvaluator::new(AnalyticFamily::GaussianLocation { mu: 0.0, sigma: 1.0 });
        let p = coupled_pair(&c, &X, 4, 9, StreamKey::replicate(1, 1, 1)).unwrap();
        assert_eq!(c.count(), 9);
        assert_eq!(p.evals(), 9);
    }

    #[test]
    fn pooled_update_examples() {
        let (v, y) = pooled_variance_update(2.0, 2.0, 2, &[2.0 - 0.0, 6.0]).unwrap();
        assert_eq!(y, 3.0);
        assert!((v - 14.0 / 3.0).abs() < 1e-15);
        let (v, y) = pooled_variance_update(0.0, 1.5, 5, &[1.5, 1.5, 1.5]).unwrap();
        assert_eq!((v, y), (0.0, 1.5));
        assert!(pooled_variance_update(1.0, 0.0, 3, &[1.0]).is_err());
        assert!(pooled_variance_update(1.0, 0.0, 1, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn single_level_reduces_to_outer_replicate() {
        let g = AnalyticFamily::UniformScaledSineU { delta: 0.4 };
        let est = mlmc_estimate(&g, &[0.3], &ladder(&[6]), &[15], 77).unwrap();
        let outer = outer_replicate(&g, &[0.3], 15, 6, 77).unwrap();
        assert_eq!(est.y_mlmc, outer.y_bar);
        assert_eq!(est.v_mlmc, outer.v_bar);
        assert_eq!(est.level_stats[0].var_y, outer.s2_y);
        assert_eq!(est.level_stats[0].var_v, outer.s2_v);
        assert_eq!(est.s2_y[0], outer.s2_y[0] / 15.0);
    }

    #[test]
    fn constant_evaluator_mlmc() {
        let c = AnalyticFamily::GaussianLocation { mu: -0.25, sigma: 0.0 };
        let est = mlmc_estimate(&c, &X, &ladder(&[4, 8, 16]), &[5, 4, 3], 1).unwrap();
        assert_eq!(est.y_mlmc, vec![-0.25]);
        assert_eq!(est.v_mlmc, vec![0.0]);
        assert_eq!((est.s2_y[0], est.s2_v[0]), (0.0, 0.0));
    }

    #[test]
    fn mlmc_rejects_bad_allocations() {
        let g = AnalyticFamily::GaussianLocation { mu: 0.0, sigma: 1.0 };
        let l = ladder(&[4, 8, 16]);
        assert_eq!(mlmc_estimate(&g, &X, &l, &[5, 1, 3], 1), Err(Error::OuterCountTooSmall(1)));
        assert!(mlmc_estimate(&g, &X, &l, &[5, 3], 1).is_err());
    }

    #[test]
    fn cost_accounting_matches_instrumented_count() {
        let c = CountingEvaluator::new(AnalyticFamily::GaussianLocation { mu: 0.0, sigma: 1.0 });
        let l = ladder(&[4, 8, 16]);
        let ms = [100, 100, 25];
        let est = mlmc_estimate(&c, &X, &l, &ms, 3).unwrap();
        assert_eq!(est.evals_coupled, 1000);
        assert_eq!(est.evals_uncoupled_equivalent, 1600);
        assert_eq!(c.count(), est.evals_performed);
    }

    #[test]
    fn s2_recomputable_from_levels() {
        let g = AnalyticFamily::UniformScaledSineU { delta: 0.5 };
        let est = mlmc_estimate(&g, &X, &ladder(&[2, 4, 8, 16]), &[20, 10, 6, 3], 8).unwrap();
        let (sy, sv) = MlmcEstimate::s2_from_levels(&est.level_stats);
        assert_eq!(sy, est.s2_y);
        assert_eq!(sv, est.s2_v);
        assert!(est.s2_y[0] >= 0.0 && est.s2_v[0] >= 0.0);
    }

    #[test]
    fn theoretical_single_level_reduction() {
        let m = MomentSet::new(0.0, 1.3, 6.0).unwrap();
        let l = ladder(&[5]);
        let (ey, ev) = theoretical_mlmc_variances(&m, &l, &[7.0]).unwrap();
        let (vy, vv) = theoretical_single_variances(&m, 5).unwrap();
        assert!((ey - 1.3 / 35.0).abs() < 1e-15);
        assert!((ey - vy / 7.0).abs() < 1e-15);
        assert!((ev - vv / 7.0).abs() < 1e-15);
    }

    #[test]
    fn theoretical_closure_form() {
        let mu2 = 0.8;
        let m = MomentSet::closure(0.0, mu2).unwrap();
        let l = ladder(&[4, 8, 16]);
        let ms = [84.0, 42.0, 21.0];
        let (_, ev) = theoretical_mlmc_variances(&m, &l, &ms).unwrap();
        let expected = 2.0 * mu2 * mu2 * (1.0 / (84.0 * 3.0) + (1.0 / 3.0 - 1.0 / 7.0) / 42.0 + (1.0 / 7.0 - 1.0 / 15.0) / 21.0);
        assert!((ev - expected).abs() < 1e-15);
    }

    #[test]
    fn cov_overlap_examples() {
        let g = MomentSet::closure(0.0, 1.0).unwrap();
        assert!((cov_overlap(&g, 2, 4).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(cov_overlap(&MomentSet::new(0.0, 0.0, 0.0).unwrap(), 3, 6).unwrap(), 0.0);
        assert!(cov_overlap(&g, 4, 4).is_err());
        // Var[dV] = Var[V_c] - 2 Cov + Var[V_f] equals the per-level closed form
        let (_, vc) = theoretical_single_variances(&g, 4).unwrap();
        let (_, vf) = theoretical_single_variances(&g, 8).unwrap();
        let via_cov = vc - 2.0 * cov_overlap(&g, 4, 8).unwrap() + vf;
        assert!((via_cov - 8.0 / 21.0).abs() < 1e-14);
        assert!((increment_variance_v(&g, 4, 8) - 8.0 / 21.0).abs() < 1e-15);
        let k = MomentSet::new(0.0, 1.0, 1.8).unwrap();
        let (_, vc) = theoretical_single_variances(&k, 5).unwrap();
        let (_, vf) = theoretical_single_variances(&k, 9).unwrap();
        let via_cov = vc - 2.0 * cov_overlap(&k, 5, 9).unwrap() + vf;
        assert!((via_cov - increment_variance_v(&k, 5, 9)).abs() < 1e-14);
    }

    #[test]
    fn cov_overlap_monte_carlo() {
        // direct covariance of nested sample variances, 1e6 replications
        let g = AnalyticFamily::GaussianLocation { mu: 0.0, sigma: 1.0 };
        let n = 1_000_000u64;
        let mut buf = [0.0];
        let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for rep in 0..n {
            let (c, f) = coupled_moments(&g, &X, 2, 4, StreamKey::replicate(31, rep, 1), &mut buf);
            let (a, b) = (c.variance()[0], f.variance()[0]);
            sa += a;
            sb += b;
            sab += a * b;
            saa += a * a;
            sbb += b * b;
        }
        let nf = n as f64;
        let cov = (sab - sa * sb / nf) / (nf - 1.0);
        let va = (saa - sa * sa / nf) / (nf - 1.0);
        let vb = (sbb - sb * sb / nf) / (nf - 1.0);
        // SE of a sample covariance ~ sqrt((va vb + cov^2) / n)
        let se = ((va * vb + cov * cov) / nf).sqrt();
        assert!((cov - 2.0 / 3.0).abs() < 4.0 * se, "cov {cov} se {se}");
    }

    #[test]
    fn increment_variance_monte_carlo() {
        let g = AnalyticFamily::GaussianLocation { mu: 0.0, sigma: 1.0 };
        let n = 100_000u64;
        let mut dy = RunningMoments::new(1);
        let mut dv = RunningMoments::new(1);
        for rep in 0..n {
            let inc = coupled_pair(&g, &X, 4, 8, StreamKey::replicate(17, rep, 1)).unwrap().increment();
            dy.push(&inc.dy);
            dv.push(&inc.dv);
        }
        let ratio = dy.variance()[0] / (0.25 - 0.125);
        assert!((0.97..=1.03).contains(&ratio), "dY variance ratio {ratio}");
        // Var[dV] = 8/21; relative SE of the sample variance ~ sqrt((kurt - 1) / n)
        let r = dv.variance()[0] / (8.0 / 21.0);
        assert!((0.95..=1.05).contains(&r), "dV variance ratio {r}");
    }
}
