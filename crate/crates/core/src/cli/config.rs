//! The TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{Grid, DEFAULT_CONFIDENCE, DEFAULT_GRID_POINTS};
use crate::ladder_alloc::{dyadic_ladder, make_geometric_ladder, CostModel, Target, VarianceModel, DEFAULT_STOP_THRESHOLD};
use crate::mlmc::FidelityLadder;
use crate::predictors::{Activation, AnalyticFamily, DropoutMlp, MlpSpec, MomentSet, StochasticEvaluator};

use super::CliError;

/// Environment variable that replaces `seeds` with a single master seed.
pub const SEED_ENV: &str = "MLMC_DROPOUT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluator: Option<EvaluatorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<LadderSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<AllocationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<RateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
}

/// Exactly one of `analytic` and `mlp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analytic: Option<AnalyticFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp: Option<MlpSource>,
}

/// Exactly one of `path` (a weight file) and `random` (fixed random weights).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random: Option<RandomMlp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMlp {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub dropout_layers: Vec<bool>,
    pub p_drop: f64,
    pub weight_seed: u64,
}

/// Either `xs` (explicit uniformly spaced points, optional `dx`) or
/// `points` over `domain`. Defaults to 101 points on [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dx: Option<f64>,
}

/// Exactly one of `ts`, `geometric` and `dyadic_levels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometric: Option<GeometricSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dyadic_levels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometricSpec {
    pub t0: usize,
    pub r: f64,
    pub t_max: usize,
}

/// Explicit `ms`, or `budget` with `target` and `cost_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ms: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Target>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_model: Option<CostModel>,
    /// Level variances for the variance target; the closure when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<MomentSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSpec {
    pub t_list: Vec<usize>,
    pub m_outer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

pub(super) fn to_cli_error(field: &str, e: crate::Error) -> CliError {
    match e {
        crate::Error::Infeasible(_) | crate::Error::BudgetTooSmall { .. } => CliError::Infeasible(format!("{field}: {e}")),
        other => config_err(field, other),
    }
}

fn require<'a, T>(v: &'a Option<T>, field: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| config_err(field, "missing"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string() + &span_hint(text, e.span())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(&path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    /// Replaces `seeds` with the value of [`SEED_ENV`] when it is set.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<(), CliError> {
        if let Some(v) = value {
            let seed = v
                .trim()
                .parse::<u64>()
                .map_err(|e| config_err(SEED_ENV, format!("{v:?} is not an unsigned integer ({e})")))?;
            self.seeds = vec![seed];
        }
        Ok(())
    }

    pub fn seeds(&self) -> Result<&[u64], CliError> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        Ok(&self.seeds)
    }

    pub fn stop_threshold(&self) -> Result<f64, CliError> {
        let t = self.stop_threshold.unwrap_or(DEFAULT_STOP_THRESHOLD);
        if !(t > 0.0 && t < 1.0) {
            return Err(config_err("stop_threshold", format!("must lie in (0, 1), got {t}")));
        }
        Ok(t)
    }

    pub fn evaluator(&self, base: &Path) -> Result<Box<dyn StochasticEvaluator>, CliError> {
        let spec = require(&self.evaluator, "evaluator")?;
        match (&spec.analytic, &spec.mlp) {
            (Some(f), None) => {
                f.validate().map_err(|e| config_err("evaluator.analytic", e))?;
                Ok(Box::new(*f))
            }
            (None, Some(src)) => Ok(Box::new(src.build(base)?)),
            _ => Err(config_err("evaluator", "exactly one of evaluator.analytic and evaluator.mlp must be set")),
        }
    }

    pub fn grid(&self) -> Result<Grid, CliError> {
        let Some(spec) = &self.grid else {
            return Grid::unit(DEFAULT_GRID_POINTS).map_err(|e| config_err("grid", e));
        };
        match (&spec.xs, spec.points, spec.domain) {
            (Some(xs), None, None) => match (xs.len(), spec.dx) {
                (1, dx) => Grid::single(xs[0], dx.unwrap_or(1.0)).map_err(|e| config_err("grid.xs", e)),
                (_, Some(_)) => Err(config_err("grid.dx", "only allowed with a single point")),
                (_, None) => Grid::from_points(xs.clone()).map_err(|e| config_err("grid.xs", e)),
            },
            (None, points, domain) => {
                if spec.dx.is_some() {
                    return Err(config_err("grid.dx", "only allowed with a single explicit point"));
                }
                let [lo, hi] = domain.unwrap_or([0.0, 1.0]);
                Grid::uniform(lo, hi, points.unwrap_or(DEFAULT_GRID_POINTS)).map_err(|e| config_err("grid", e))
            }
            _ => Err(config_err("grid", "xs excludes points and domain")),
        }
    }

    pub fn ladder(&self) -> Result<FidelityLadder, CliError> {
        let spec = require(&self.ladder, "ladder")?;
        let r = match (&spec.ts, &spec.geometric, spec.dyadic_levels) {
            (Some(ts), None, None) => FidelityLadder::new(ts.clone()),
            (None, Some(g), None) => make_geometric_ladder(g.t0, g.r, g.t_max),
            (None, None, Some(l)) => dyadic_ladder(l),
            _ => return Err(config_err("ladder", "exactly one of ts, geometric and dyadic_levels must be set")),
        };
        r.map_err(|e| config_err("ladder", e))
    }

    pub fn allocation(&self) -> Result<&AllocationSpec, CliError> {
        require(&self.allocation, "allocation")
    }

    pub fn rate(&self) -> Result<&RateSpec, CliError> {
        let r = require(&self.rate, "rate")?;
        if r.t_list.len() < 3 {
            return Err(config_err("rate.t_list", "at least 3 fidelities are needed for a slope fit"));
        }
        if let Some(&t) = r.t_list.iter().find(|&&t| t < 2) {
            return Err(config_err("rate.t_list", format!("fidelity {t} < 2")));
        }
        if r.m_outer < 2 {
            return Err(config_err("rate.m_outer", format!("{} < 2", r.m_outer)));
        }
        let c = r.confidence.unwrap_or(DEFAULT_CONFIDENCE);
        if !(c > 0.0 && c < 1.0) {
            return Err(config_err("rate.confidence", format!("must lie in (0, 1), got {c}")));
        }
        Ok(r)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.as_ref().map_or_else(|| PathBuf::from("runs"), |o| o.dir.clone())
    }
}

impl MlpSource {
    fn build(&self, base: &Path) -> Result<DropoutMlp, CliError> {
        match (&self.path, &self.random) {
            (Some(p), None) => {
                let p = if p.is_absolute() { p.clone() } else { base.join(p) };
                DropoutMlp::load(&p).map_err(|e| config_err("evaluator.mlp.path", e))
            }
            (None, Some(r)) => {
                let spec = MlpSpec {
                    layer_widths: r.layer_widths.clone(),
                    activation: r.activation,
                    dropout_layer_flags: r.dropout_layers.clone(),
                    p_drop: r.p_drop,
                };
                DropoutMlp::random(spec, r.weight_seed).map_err(|e| config_err("evaluator.mlp.random", e))
            }
            _ => Err(config_err("evaluator.mlp", "exactly one of path and random must be set")),
        }
    }
}

/// A resolved budget-driven allocation request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetRequest {
    pub budget: f64,
    pub target: Target,
    pub kind: CostModel,
    pub model: VarianceModel,
}

impl AllocationSpec {
    pub fn budget_request(&self) -> Result<BudgetRequest, CliError> {
        let budget = *require(&self.budget, "allocation.budget")?;
        if !(budget.is_finite() && budget > 0.0) {
            return Err(config_err("allocation.budget", format!("must be finite and positive, got {budget}")));
        }
        let model = match self.moments {
            Some(m) => VarianceModel::Moments(m.validate().map(|_| m).map_err(|e| config_err("allocation.moments", e))?),
            None => VarianceModel::Closure,
        };
        Ok(BudgetRequest {
            budget,
            target: *require(&self.target, "allocation.target")?,
            kind: *require(&self.cost_model, "allocation.cost_model")?,
            model,
        })
    }

    pub fn min_m(&self) -> Result<usize, CliError> {
        let m = self.min_m.unwrap_or(2);
        if m < 2 {
            return Err(config_err("allocation.min_m", format!("{m} < 2")));
        }
        Ok(m)
    }

    /// Integer budget for exact-cost enumeration.
    pub fn integer_budget(&self) -> Result<u64, CliError> {
        let b = *require(&self.budget, "allocation.budget")?;
        if !(b > 0.0 && b.fract() == 0.0 && b < 2f64.powi(53)) {
            return Err(config_err("allocation.budget", format!("fixed-cost enumeration needs a positive integer, got {b}")));
        }
        Ok(b as u64)
    }

    /// Explicit `ms`, or the rounded optimum of the budget request.
    pub fn resolve(&self, ladder: &FidelityLadder) -> Result<Vec<usize>, CliError> {
        match (&self.ms, &self.budget) {
            (Some(ms), None) => {
                if ms.len() != ladder.len() {
                    return Err(config_err(
                        "allocation.ms",
                        format!("{} entries for a ladder of {} levels", ms.len(), ladder.len()),
                    ));
                }
                if let Some(&m) = ms.iter().find(|&&m| m < 2) {
                    return Err(config_err("allocation.ms", format!("sample count {m} < 2")));
                }
                Ok(ms.clone())
            }
            (None, Some(_)) => {
                let req = self.budget_request()?;
                let cont = crate::ladder_alloc::allocate(ladder, req.budget, req.kind, req.target, req.model)
                    .map_err(|e| to_cli_error("allocation", e))?;
                let r = crate::ladder_alloc::round_allocation(&cont, ladder, req.budget, req.kind)
                    .map_err(|e| to_cli_error("allocation", e))?;
                Ok(r.ms)
            }
            _ => Err(config_err("allocation", "exactly one of ms and budget must be set")),
        }
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(s) => {
            let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
