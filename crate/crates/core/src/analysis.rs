//! Grid norms, log-log slope fits, brute-force variance oracles, rate
//! studies and fixed-cost variance surfaces.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Error, Result};
use crate::ladder_alloc::{allocate_mean, allocate_variance, enumerate_fixed_cost, ContinuousAllocation, CostModel, VarianceModel};
use crate::mlmc::{coupled_pair, mlmc_estimate, FidelityLadder};
use crate::moments::{estimate_single, outer_replicate};
use crate::predictors::{derive_seed, StochasticEvaluator, StreamKey};

pub const DEFAULT_GRID_POINTS: usize = 101;
pub const DEFAULT_CONFIDENCE: f64 = 0.99;

/// Uniformly spaced evaluation points with spacing `dx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    xs: Vec<f64>,
    dx: f64,
}

impl Grid {
    /// `n >= 2` points from `lo` to `hi` inclusive.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InsufficientPoints(n));
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(invalid("domain", format!("[{lo}, {hi}] is not a proper interval")));
        }
        let dx = (hi - lo) / (n - 1) as f64;
        let xs = (0..n).map(|i| if i == n - 1 { hi } else { lo + i as f64 * dx }).collect();
        Ok(Self { xs, dx })
    }

    pub fn unit(n: usize) -> Result<Self> {
        Self::uniform(0.0, 1.0, n)
    }

    pub fn single(x: f64, dx: f64) -> Result<Self> {
        if !(x.is_finite() && dx.is_finite() && dx > 0.0) {
            return Err(invalid("grid", format!("point {x} with spacing {dx}")));
        }
        Ok(Self { xs: vec![x], dx })
    }

    /// Accepts explicit points if consecutive gaps agree to 1e-12 relative.
    pub fn from_points(xs: Vec<f64>) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::InsufficientPoints(xs.len()));
        }
        let dx = (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64;
        if !(dx > 0.0) || !dx.is_finite() {
            return Err(Error::NonUniformGrid("points must be strictly increasing".into()));
        }
        for (i, w) in xs.windows(2).enumerate() {
            let gap = w[1] - w[0];
            if (gap - dx).abs() > 1e-12 * dx.abs().max(w[1].abs()) {
                return Err(Error::NonUniformGrid(format!("gap {gap} after point {i} differs from {dx}")));
            }
        }
        Ok(Self { xs, dx })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Values on a grid, one row per point and one entry per output component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub grid: Grid,
    pub values: Vec<Vec<f64>>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(first) = values.first() {
            if let Some(bad) = values.iter().find(|v| v.len() != first.len()) {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    got: bad.len(),
                });
            }
        }
        Ok(Self { grid, values })
    }

    pub fn scalar(grid: Grid, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, values.into_iter().map(|v| vec![v]).collect())
    }
}

/// `sum_i |g(x_i)| dx` over every grid point, endpoints included, summed over
/// output components.
pub fn l1_norm(g: &GridFunction) -> f64 {
    g.values.iter().flatten().map(|v| v.abs()).sum::<f64>() * g.grid.dx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub confidence: f64,
}

/// Least squares fit of `log y = intercept + slope log t` with a
/// Student-t confidence interval on the slope.
pub fn loglog_slope_fit(ts: &[f64], ys: &[f64], confidence: f64) -> Result<SlopeFit> {
    if ts.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: ts.len(),
            got: ys.len(),
        });
    }
    if ts.len() < 3 {
        return Err(Error::InsufficientPoints(ts.len()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(invalid("confidence", format!("must lie in (0, 1), got {confidence}")));
    }
    for (i, (&t, &y)) in ts.iter().zip(ys).enumerate() {
        if !(y > 0.0) || !y.is_finite() {
            return Err(Error::NonPositiveValue(y, i));
        }
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::NonPositiveValue(t, i));
        }
    }
    let n = ts.len() as f64;
    let lx: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(invalid("ts", "fidelities must not all coincide"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 2.0).map_err(|e| invalid("confidence", e.to_string()))?;
    let half = dist.inverse_cdf(0.5 + confidence / 2.0) * se;
    Ok(SlopeFit {
        slope,
        intercept,
        ci_lower: slope - half,
        ci_upper: slope + half,
        confidence,
    })
}

/// A statistic whose sampling variance the brute-force oracle measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "statistic", rename_all = "snake_case")]
pub enum Statistic {
    Y { t: usize },
    V { t: usize },
    DeltaY { t_coarse: usize, t_fine: usize },
    DeltaV { t_coarse: usize, t_fine: usize },
    MlmcY { ladder: FidelityLadder, ms: Vec<usize> },
    MlmcV { ladder: FidelityLadder, ms: Vec<usize> },
}

impl Statistic {
    pub fn name(&self) -> &'static str {
        match self {
            Statistic::Y { .. } => "y",
            Statistic::V { .. } => "v",
            Statistic::DeltaY { .. } => "delta_y",
            Statistic::DeltaV { .. } => "delta_v",
            Statistic::MlmcY { .. } => "mlmc_y",
            Statistic::MlmcV { .. } => "mlmc_v",
        }
    }

    // first output component of replication `r`
    fn realize<E: StochasticEvaluator + ?Sized>(&self, evaluator: &E, x: &[f64], r: u64, seed: u64) -> Result<f64> {
        Ok(match self {
            Statistic::Y { t } => estimate_single(evaluator, x, *t, StreamKey::replicate(seed, r, 0))?.y[0],
            Statistic::V { t } => estimate_single(evaluator, x, *t, StreamKey::replicate(seed, r, 0))?.v[0],
            Statistic::DeltaY { t_coarse, t_fine } => {
                coupled_pair(evaluator, x, *t_coarse, *t_fine, StreamKey::replicate(seed, r, 1))?.increment().dy[0]
            }
            Statistic::DeltaV { t_coarse, t_fine } => {
                coupled_pair(evaluator, x, *t_coarse, *t_fine, StreamKey::replicate(seed, r, 1))?.increment().dv[0]
            }
            Statistic::MlmcY { ladder, ms } => mlmc_estimate(evaluator, x, ladder, ms, derive_seed(seed, r))?.y_mlmc[0],
            Statistic::MlmcV { ladder, ms } => mlmc_estimate(evaluator, x, ladder, ms, derive_seed(seed, r))?.v_mlmc[0],
        })
    }
}

/// A brute-force estimate with its jackknife standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub value: f64,
    pub std_error: f64,
    pub replications: usize,
}

pub const MIN_ORACLE_REPLICATIONS: usize = 100;

fn check_replications(r: usize) -> Result<()> {
    if r < MIN_ORACLE_REPLICATIONS {
        return Err(invalid(
            "replications",
            format!("need at least {MIN_ORACLE_REPLICATIONS}, got {r}"),
        ));
    }
    Ok(())
}

/// Unbiased sample covariance and its delete-one jackknife standard error,
/// using the closed form of each leave-one-out cross-product sum.
pub fn jackknife_covariance(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = a.len();
    assert!(n >= 3 && n == b.len(), "jackknife needs matching samples of length >= 3");
    let r = n as f64;
    let ma = a.iter().sum::<f64>() / r;
    let mb = b.iter().sum::<f64>() / r;
    let cross: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let loo: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| (cross - (x - ma) * (y - mb) * r / (r - 1.0)) / (r - 2.0))
        .collect();
    let mean_loo = loo.iter().sum::<f64>() / r;
    let spread: f64 = loo.iter().map(|c| (c - mean_loo).powi(2)).sum();
    (cross / (r - 1.0), ((r - 1.0) / r * spread).sqrt())
}

pub fn jackknife_variance(samples: &[f64]) -> (f64, f64) {
    jackknife_covariance(samples, samples)
}

/// Sampling variance of `statistic` over `replications` independent
/// realizations, for the first output component.
pub fn empirical_variance_oracle<E: StochasticEvaluator + ?Sized>(
    evaluator: &E,
    x: &[f64],
    statistic: &Statistic,
    replications: usize,
    seed: u64,
) -> Result<OracleEstimate> {
    check_replications(replications)?;
    let samples = (0..replications as u64)
        .map(|r| statistic.realize(evaluator, x, r, seed))
        .collect::<Result<Vec<f64>>>()?;
    let (value, std_error) = jackknife_variance(&samples);
    Ok(OracleEstimate {
        value,
        std_error,
        replications,
    })
}

/// `Cov[V(t_fine), V(t_coarse)]` over nested draw sequences, for the first
/// output component.
pub fn empirical_overlap_covariance<E: StochasticEvaluator + ?Sized>(
    evaluator: &E,
    x: &[f64],
    t_coarse: usize,
    t_fine: usize,
    replications: usize,
    seed: u64,
) -> Result<OracleEstimate> {
    check_replications(replications)?;
    let mut vc = Vec::with_capacity(replications);
    let mut vf = Vec::with_capacity(replications);
    for r in 0..replications as u64 {
        let p = coupled_pair(evaluator, x, t_coarse, t_fine, StreamKey::replicate(seed, r, 1))?;
        vc.push(p.coarse.v[0]);
        vf.push(p.fine.v[0]);
    }
    let (value, std_error) = jackknife_covariance(&vf, &vc);
    Ok(OracleEstimate {
        value,
        std_error,
        replications,
    })
}

fn check_scalar_input<E: StochasticEvaluator + ?Sized>(evaluator: &E) -> Result<()> {
    if evaluator.input_dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: evaluator.input_dim(),
        });
    }
    Ok(())
}

/// Evaluates `f` at every grid point and returns the L1 norms of the two
/// returned per-component vectors.
fn grid_norms(grid: &Grid, mut f: impl FnMut(f64) -> Result<(Vec<f64>, Vec<f64>)>) -> Result<(f64, f64)> {
    let mut a = Vec::with_capacity(grid.len());
    let mut b = Vec::with_capacity(grid.len());
    for &x in grid.xs() {
        let (u, v) = f(x)?;
        a.push(u);
        b.push(v);
    }
    Ok((
        l1_norm(&GridFunction::new(grid.clone(), a)?),
        l1_norm(&GridFunction::new(grid.clone(), b)?),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub t: usize,
    pub norm_s2_y: f64,
    pub norm_s2_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRates {
    pub seed: u64,
    pub points: Vec<RatePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RateFit {
    Fitted { y: SlopeFit, v: SlopeFit },
    /// Some averaged norm is zero, so no log-log fit exists.
    Degenerate { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub per_seed: Vec<SeedRates>,
    pub averaged: Vec<RatePoint>,
    pub fit: RateFit,
}

/// `||S_Y^2||` and `||S_V^2||` of `outer_replicate(m_outer, t)` across the
/// grid for each `t`, averaged over seeds, with slope fits of the averages.
pub fn rate_study<E: StochasticEvaluator + ?Sized>(
    evaluator: &E,
    grid: &Grid,
    t_list: &[usize],
    m_outer: usize,
    seeds: &[u64],
    confidence: f64,
) -> Result<RateStudy> {
    check_scalar_input(evaluator)?;
    if seeds.is_empty() {
        return Err(invalid("seeds", "at least one seed is required"));
    }
    if t_list.len() < 3 {
        return Err(Error::InsufficientPoints(t_list.len()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut points = Vec::with_capacity(t_list.len());
        for (i, &t) in t_list.iter().enumerate() {
            let s = derive_seed(seed, i as u64);
            let (norm_s2_y, norm_s2_v) = grid_norms(grid, |x| {
                let o = outer_replicate(evaluator, &[x], m_outer, t, s)?;
                Ok((o.s2_y, o.s2_v))
            })?;
            points.push(RatePoint { t, norm_s2_y, norm_s2_v });
        }
        per_seed.push(SeedRates { seed, points });
    }
    let k = seeds.len() as f64;
    let averaged: Vec<RatePoint> = (0..t_list.len())
        .map(|i| RatePoint {
            t: t_list[i],
            norm_s2_y: per_seed.iter().map(|s| s.points[i].norm_s2_y).sum::<f64>() / k,
            norm_s2_v: per_seed.iter().map(|s| s.points[i].norm_s2_v).sum::<f64>() / k,
        })
        .collect();
    let ts: Vec<f64> = t_list.iter().map(|&t| t as f64).collect();
    let ys: Vec<f64> = averaged.iter().map(|p| p.norm_s2_y).collect();
    let vs: Vec<f64> = averaged.iter().map(|p| p.norm_s2_v).collect();
    let fit = match (loglog_slope_fit(&ts, &ys, confidence), loglog_slope_fit(&ts, &vs, confidence)) {
        (Ok(y), Ok(v)) => RateFit::Fitted { y, v },
        (Err(e @ Error::NonPositiveValue(..)), _) | (_, Err(e @ Error::NonPositiveValue(..))) => {
            RateFit::Degenerate { reason: e.to_string() }
        }
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    Ok(RateStudy { per_seed, averaged, fit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub ms: Vec<usize>,
    pub norm_s2_y: f64,
    pub norm_s2_v: f64,
    /// `(||S_Y^2||, ||S_V^2||)` for each seed, in seed order.
    pub per_seed: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSurface {
    pub rows: Vec<SurfaceRow>,
    /// Indices of every row attaining the minimum, in row order.
    pub argmin_y: Vec<usize>,
    pub argmin_v: Vec<usize>,
    pub optimum_mean: ContinuousAllocation,
    pub optimum_variance: ContinuousAllocation,
}

fn argmins(values: impl Iterator<Item = f64>) -> Vec<usize> {
    let values: Vec<f64> = values.collect();
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    (0..values.len()).filter(|&i| values[i] == best).collect()
}

/// Runs `mlmc_estimate` for every allocation of cost exactly `c` and records
/// seed-averaged grid norms. Every allocation reuses the same seeds.
pub fn variance_surface<E: StochasticEvaluator + ?Sized>(
    evaluator: &E,
    grid: &Grid,
    ladder: &FidelityLadder,
    c: u64,
    kind: CostModel,
    min_m: usize,
    seeds: &[u64],
) -> Result<VarianceSurface> {
    check_scalar_input(evaluator)?;
    if seeds.is_empty() {
        return Err(invalid("seeds", "at least one seed is required"));
    }
    let mut rows = Vec::new();
    for ms in enumerate_fixed_cost(ladder, c, kind, min_m)? {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            per_seed.push(grid_norms(grid, |x| {
                let e = mlmc_estimate(evaluator, &[x], ladder, &ms, seed)?;
                Ok((e.s2_y, e.s2_v))
            })?);
        }
        let k = seeds.len() as f64;
        rows.push(SurfaceRow {
            norm_s2_y: per_seed.iter().map(|p| p.0).sum::<f64>() / k,
            norm_s2_v: per_seed.iter().map(|p| p.1).sum::<f64>() / k,
            ms,
            per_seed,
        });
    }
    if rows.is_empty() {
        return Err(Error::Infeasible(format!(
            "no allocation with every M >= {min_m} costs exactly {c} under {kind} pricing"
        )));
    }
    Ok(VarianceSurface {
        argmin_y: argmins(rows.iter().map(|r| r.norm_s2_y)),
        argmin_v: argmins(rows.iter().map(|r| r.norm_s2_v)),
        optimum_mean: allocate_mean(ladder, c as f64, kind)?,
        optimum_variance: allocate_variance(ladder, c as f64, kind, VarianceModel::Closure)?,
        rows,
    })
}
