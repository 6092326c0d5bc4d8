//! Cost models, ladder construction, optimal level allocations and the
//! stopping check for adding levels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mlmc::{closure_level_weights, mean_level_weights, variance_level_weights, FidelityLadder, MlmcEstimate};
use crate::predictors::MomentSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostModel {
    /// `a_0 = T_0`, `a_l = T_l - T_{l-1}`.
    Coupled,
    /// `a_l = T_l`.
    Uncoupled,
}

impl CostModel {
    pub const ALL: [CostModel; 2] = [CostModel::Coupled, CostModel::Uncoupled];

    /// Per-replicate cost `a_l` of each level.
    pub fn weights(self, ladder: &FidelityLadder) -> Vec<u64> {
        let ts = ladder.ts();
        (0..ts.len())
            .map(|l| match (self, l) {
                (CostModel::Coupled, l) if l > 0 => (ts[l] - ts[l - 1]) as u64,
                _ => ts[l] as u64,
            })
            .collect()
    }
}

impl fmt::Display for CostModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostModel::Coupled => "coupled",
            CostModel::Uncoupled => "uncoupled",
        })
    }
}

impl FromStr for CostModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coupled" => Ok(CostModel::Coupled),
            "uncoupled" => Ok(CostModel::Uncoupled),
            other => Err(invalid("cost_model", format!("expected coupled or uncoupled, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Mean,
    Variance,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Mean => "mean",
            Target::Variance => "variance",
        })
    }
}

/// Level variances for the variance target: exact moments, or the
/// zero-excess-kurtosis closure which depends on the ladder only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VarianceModel {
    Closure,
    Moments(MomentSet),
}

fn check_dims(ladder: &FidelityLadder, len: usize) -> Result<()> {
    if len != ladder.len() {
        return Err(Error::DimensionMismatch {
            expected: ladder.len(),
            got: len,
        });
    }
    Ok(())
}

/// `sum a_l M_l` under the model's weights.
pub fn cost(ladder: &FidelityLadder, ms: &[usize], kind: CostModel) -> Result<u64> {
    check_dims(ladder, ms.len())?;
    Ok(kind.weights(ladder).iter().zip(ms).map(|(a, &m)| a * m as u64).sum())
}

/// `T_l = ceil(t0 r^l)`, advanced to `T_{l-1} + 2` where needed, for every
/// level with `T_l <= t_max`.
pub fn make_geometric_ladder(t0: usize, r: f64, t_max: usize) -> Result<FidelityLadder> {
    if t0 < 2 {
        return Err(Error::FidelityTooSmall(t0));
    }
    if !(r.is_finite() && r > 1.0) {
        return Err(invalid("r", format!("ratio must be finite and > 1, got {r}")));
    }
    if t_max < t0 {
        return Err(invalid("t_max", format!("{t_max} is below t0 = {t0}")));
    }
    let mut ts = vec![t0];
    for l in 1.. {
        let raw = t0 as f64 * r.powi(l);
        // absorb rounding in products such as 3 * 1.2^5
        let raw = (raw * (1.0 - 1e-12)).ceil();
        let prev = *ts.last().unwrap();
        let t = if raw > t_max as f64 { t_max + 1 } else { raw as usize };
        let t = t.max(prev + 2);
        if t > t_max {
            break;
        }
        ts.push(t);
    }
    FidelityLadder::new(ts)
}

/// `(2, 4, ..., 2^{L+1})`.
pub fn dyadic_ladder(levels: usize) -> Result<FidelityLadder> {
    if levels > 60 {
        return Err(invalid("levels", format!("{levels} levels overflow the fidelity range")));
    }
    FidelityLadder::new((0..=levels).map(|l| 2usize << l).collect())
}

/// Continuous Lagrangian optimum for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousAllocation {
    pub ms: Vec<f64>,
    pub kind: CostModel,
    /// Per-replicate level variances `v_l` (or `w_l`), up to a common factor.
    pub level_variances: Vec<f64>,
}

impl ContinuousAllocation {
    /// `sum v_l / M_l`.
    pub fn predicted_variance(&self) -> f64 {
        predicted_variance(&self.level_variances, &self.ms)
    }

    pub fn cost(&self, ladder: &FidelityLadder) -> f64 {
        self.kind.weights(ladder).iter().zip(&self.ms).map(|(&a, m)| a as f64 * m).sum()
    }
}

pub fn predicted_variance<M: Copy + Into<f64>>(level_variances: &[f64], ms: &[M]) -> f64 {
    level_variances.iter().zip(ms).map(|(v, &m)| v / m.into()).sum()
}

fn check_budget(c: f64) -> Result<()> {
    if !(c.is_finite() && c > 0.0) {
        return Err(invalid("budget", format!("must be finite and positive, got {c}")));
    }
    Ok(())
}

fn lagrangian(ladder: &FidelityLadder, c: f64, kind: CostModel, vs: Vec<f64>) -> Result<ContinuousAllocation> {
    check_budget(c)?;
    let a = kind.weights(ladder);
    if let Some(l) = vs.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Infeasible(format!("level {l} variance {} is not positive", vs[l])));
    }
    let denom: f64 = vs.iter().zip(&a).map(|(v, &a)| (v * a as f64).sqrt()).sum();
    let ms = vs.iter().zip(&a).map(|(v, &a)| c * (v / a as f64).sqrt() / denom).collect();
    Ok(ContinuousAllocation {
        ms,
        kind,
        level_variances: vs,
    })
}

/// `M_l = c sqrt(v_l / a_l) / sum_k sqrt(v_k a_k)` with `v_0 = 1/T_0`,
/// `v_l = 1/T_{l-1} - 1/T_l`.
pub fn allocate_mean(ladder: &FidelityLadder, c: f64, kind: CostModel) -> Result<ContinuousAllocation> {
    lagrangian(ladder, c, kind, mean_level_weights(ladder))
}

/// The same optimum with `w_0 = Var[V(T_0)]`, `w_l = Var[dV(T_l)]`.
pub fn allocate_variance(
    ladder: &FidelityLadder,
    c: f64,
    kind: CostModel,
    model: VarianceModel,
) -> Result<ContinuousAllocation> {
    let ws = match model {
        VarianceModel::Closure => closure_level_weights(ladder),
        VarianceModel::Moments(m) => {
            m.validate()?;
            if ladder.levels() == 0 {
                // a single level takes the whole budget whatever its variance
                vec![1.0]
            } else {
                variance_level_weights(&m, ladder)
            }
        }
    };
    let mut alloc = lagrangian(ladder, c, kind, ws)?;
    if let (VarianceModel::Moments(m), 0) = (model, ladder.levels()) {
        alloc.level_variances = variance_level_weights(&m, ladder);
    }
    Ok(alloc)
}

pub fn allocate(
    ladder: &FidelityLadder,
    c: f64,
    kind: CostModel,
    target: Target,
    model: VarianceModel,
) -> Result<ContinuousAllocation> {
    match target {
        Target::Mean => allocate_mean(ladder, c, kind),
        Target::Variance => allocate_variance(ladder, c, kind, model),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegerAllocation {
    pub ms: Vec<usize>,
    pub kind: CostModel,
    pub cost: u64,
}

/// Floors to at least 2 per level, then spends the leftover budget one
/// replicate at a time on the level with the largest variance reduction per
/// unit cost.
pub fn round_allocation(
    continuous: &ContinuousAllocation,
    ladder: &FidelityLadder,
    c: f64,
    kind: CostModel,
) -> Result<IntegerAllocation> {
    check_budget(c)?;
    check_dims(ladder, continuous.ms.len())?;
    let a = kind.weights(ladder);
    let vs = &continuous.level_variances;
    let required = 2 * a.iter().sum::<u64>();
    if (required as f64) > c {
        return Err(Error::BudgetTooSmall {
            budget: c,
            required: required as f64,
        });
    }
    let budget = c.floor() as u64;
    let mut ms: Vec<usize> = continuous
        .ms
        .iter()
        .map(|&m| ((m + 1e-9).floor().max(2.0)) as usize)
        .collect();
    let mut spent: u64 = a.iter().zip(&ms).map(|(a, &m)| a * m as u64).sum();

    // the floor of 2 can push the sum over budget; shed the cheapest losses
    while spent > budget {
        let l = (0..ms.len())
            .filter(|&l| ms[l] > 2)
            .min_by(|&i, &j| {
                let loss = |l: usize| (vs[l] / (ms[l] - 1) as f64 - vs[l] / ms[l] as f64) / a[l] as f64;
                loss(i).total_cmp(&loss(j))
            })
            .expect("a budget of 2 per level is affordable");
        ms[l] -= 1;
        spent -= a[l];
    }

    loop {
        let left = budget - spent;
        let best = (0..ms.len()).filter(|&l| a[l] <= left).max_by(|&i, &j| {
            let gain = |l: usize| (vs[l] / ms[l] as f64 - vs[l] / (ms[l] + 1) as f64) / a[l] as f64;
            // ties go to the coarser level
            gain(i).total_cmp(&gain(j)).then(j.cmp(&i))
        });
        let Some(l) = best else { break };
        ms[l] += 1;
        spent += a[l];
    }
    Ok(IntegerAllocation { ms, kind, cost: spent })
}

/// Every `(M_0, ..., M_L)` with `M_l >= min_m` and cost exactly `c`, in
/// lexicographic order of `(M_1, ..., M_L)`.
pub fn enumerate_fixed_cost(ladder: &FidelityLadder, c: u64, kind: CostModel, min_m: usize) -> Result<FixedCostIter> {
    if min_m < 2 {
        return Err(Error::OuterCountTooSmall(min_m));
    }
    let a = kind.weights(ladder);
    let floor0 = a[0] * min_m as u64;
    let cap = c.checked_sub(floor0);
    let tail = vec![min_m; a.len() - 1];
    let done = match cap {
        None => true,
        Some(cap) => a[1..].iter().map(|&a| a * min_m as u64).sum::<u64>() > cap,
    };
    Ok(FixedCostIter {
        a,
        c,
        min_m,
        cap: cap.unwrap_or(0),
        tail,
        done,
    })
}

#[derive(Debug, Clone)]
pub struct FixedCostIter {
    a: Vec<u64>,
    c: u64,
    min_m: usize,
    cap: u64,
    tail: Vec<usize>,
    done: bool,
}

impl FixedCostIter {
    fn tail_cost(&self) -> u64 {
        self.a[1..].iter().zip(&self.tail).map(|(a, &m)| a * m as u64).sum()
    }

    fn advance(&mut self) {
        let mut i = self.tail.len();
        loop {
            if i == 0 {
                self.done = true;
                return;
            }
            i -= 1;
            self.tail[i] += 1;
            if self.tail_cost() <= self.cap {
                return;
            }
            self.tail[i] = self.min_m;
        }
    }
}

impl Iterator for FixedCostIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        while !self.done {
            let residual = self.c - self.tail_cost();
            let current = self.tail.clone();
            self.advance();
            if residual % self.a[0] == 0 {
                let m0 = (residual / self.a[0]) as usize;
                let mut ms = Vec::with_capacity(current.len() + 1);
                ms.push(m0);
                ms.extend(current);
                return Some(ms);
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopDecision {
    pub mean: bool,
    pub variance: bool,
}

pub const DEFAULT_STOP_THRESHOLD: f64 = 0.1;

/// Stops refining a target once the finest level's contribution
/// `var_L / M_L` is at most `threshold` times the total `S^2`, in every
/// output component.
pub fn stopping_check(estimate: &MlmcEstimate, threshold: f64) -> Result<StopDecision> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid("threshold", format!("must lie in (0, 1), got {threshold}")));
    }
    if estimate.level_stats.len() < 2 {
        return Err(invalid("estimate", "stopping needs at least one correction level"));
    }
    let finest = estimate.level_stats.last().unwrap();
    let m = finest.m as f64;
    let small = |var: &[f64], s2: &[f64]| var.iter().zip(s2).all(|(v, s)| v / m <= threshold * s);
    Ok(StopDecision {
        mean: small(&finest.var_y, &estimate.s2_y),
        variance: small(&finest.var_v, &estimate.s2_v),
    })
}
