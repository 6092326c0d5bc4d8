use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{l1_norm, rate_study, variance_surface, GridFunction, RateFit, DEFAULT_CONFIDENCE};
use crate::ladder_alloc::{allocate, cost, round_allocation, stopping_check, CostModel, StopDecision, VarianceModel};
use crate::mlmc::{
    mean_level_weights, mlmc_estimate, theoretical_mlmc_variances, variance_level_weights, MlmcEstimate,
};
use crate::predictors::{CountingEvaluator, MomentSet};

use super::config::to_cli_error;
use super::{elapsed, Artifacts, CliError, ResultEnvelope, RunConfig, RunContext, ARTIFACT_VERSION, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostCounters {
    pub evals_coupled: u64,
    pub evals_uncoupled_equivalent: u64,
    pub evals_performed: u64,
    /// Tally of an instrumented wrapper around the evaluator.
    pub evals_counted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub seed: u64,
    pub x: f64,
    pub estimate: MlmcEstimate,
    pub stop: Option<StopDecision>,
}

fn envelope(
    command: &str,
    config: &RunConfig,
    estimates: Vec<PointEstimate>,
    summary: serde_json::Value,
    cost: CostCounters,
    wall_clock_seconds: Option<f64>,
) -> Vec<u8> {
    let env = ResultEnvelope {
        artifact_version: ARTIFACT_VERSION.to_string(),
        schema_version: SCHEMA_VERSION,
        command: command.to_string(),
        config: config.clone(),
        estimates,
        summary,
        cost,
        wall_clock_seconds,
    };
    json_bytes(&env)
}

/// Shortest round-trip float text, with an exponent for very small or large
/// magnitudes.
struct F(f64);

impl std::fmt::Display for F {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("outputs always serialize");
    s.push('\n');
    s.into_bytes()
}

fn check_finite(e: &MlmcEstimate, seed: u64, x: f64) -> Result<(), CliError> {
    if e.is_finite() {
        Ok(())
    } else {
        Err(CliError::NonFinite(format!("estimate at x = {x} with seed {seed} is not finite")))
    }
}

/// `estimates.csv` and `result.json`.
pub fn cmd_estimate(config: &RunConfig, ctx: &RunContext) -> Result<Artifacts, CliError> {
    let start = Instant::now();
    let seeds = config.seeds()?;
    let evaluator = CountingEvaluator::new(config.evaluator(&ctx.base_dir)?);
    let grid = config.grid()?;
    let ladder = config.ladder()?;
    let ms = config.allocation()?.resolve(&ladder)?;
    let threshold = config.stop_threshold()?;

    let mut header = String::from("seed,x,component,y_mlmc,v_mlmc,s2_y,s2_v");
    for l in 0..ladder.len() {
        write!(header, ",level{l}_mean_y,level{l}_var_y,level{l}_mean_v,level{l}_var_v,level{l}_m").unwrap();
    }
    let mut csv = header + "\n";
    let mut estimates = Vec::with_capacity(seeds.len() * grid.len());
    let mut counters = CostCounters::default();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut s2y = Vec::with_capacity(grid.len());
        let mut s2v = Vec::with_capacity(grid.len());
        for &x in grid.xs() {
            let e = mlmc_estimate(&evaluator, &[x], &ladder, &ms, seed).map_err(|e| to_cli_error("evaluator", e))?;
            check_finite(&e, seed, x)?;
            for c in 0..e.output_dim() {
                write!(csv, "{seed},{},{c},{},{},{},{}", F(x), F(e.y_mlmc[c]), F(e.v_mlmc[c]), F(e.s2_y[c]), F(e.s2_v[c])).unwrap();
                for l in &e.level_stats {
                    write!(csv, ",{},{},{},{},{}", F(l.mean_y[c]), F(l.var_y[c]), F(l.mean_v[c]), F(l.var_v[c]), l.m).unwrap();
                }
                csv.push('\n');
            }
            counters.evals_coupled += e.evals_coupled;
            counters.evals_uncoupled_equivalent += e.evals_uncoupled_equivalent;
            counters.evals_performed += e.evals_performed;
            s2y.push(e.s2_y.clone());
            s2v.push(e.s2_v.clone());
            let stop = if ladder.levels() > 0 { Some(stopping_check(&e, threshold).map_err(|e| to_cli_error("stop_threshold", e))?) } else { None };
            estimates.push(PointEstimate { seed, x, estimate: e, stop });
        }
        let ny = l1_norm(&GridFunction::new(grid.clone(), s2y).map_err(|e| to_cli_error("grid", e))?);
        let nv = l1_norm(&GridFunction::new(grid.clone(), s2v).map_err(|e| to_cli_error("grid", e))?);
        per_seed.push(json!({ "seed": seed, "norm_s2_y": ny, "norm_s2_v": nv }));
    }
    counters.evals_counted = evaluator.count();
    let k = seeds.len() as f64;
    let mean_of = |key: &str| per_seed.iter().map(|s| s[key].as_f64().unwrap()).sum::<f64>() / k;
    let summary = json!({
        "ladder": ladder.ts(),
        "allocation": ms,
        "norm_s2_y": mean_of("norm_s2_y"),
        "norm_s2_v": mean_of("norm_s2_v"),
        "per_seed": per_seed,
        "stop_threshold": threshold,
    });

    let mut out = Artifacts::default();
    out.push("estimates.csv", csv);
    out.push("result.json", envelope("estimate", config, estimates, summary, counters, elapsed(ctx, start)));
    Ok(out)
}

/// `rate.csv`, `slopes.csv` and `result.json`.
pub fn cmd_rate_study(config: &RunConfig, ctx: &RunContext) -> Result<Artifacts, CliError> {
    let start = Instant::now();
    let seeds = config.seeds()?;
    let rate = config.rate()?;
    let evaluator = CountingEvaluator::new(config.evaluator(&ctx.base_dir)?);
    let grid = config.grid()?;
    let confidence = rate.confidence.unwrap_or(DEFAULT_CONFIDENCE);
    let study = rate_study(&evaluator, &grid, &rate.t_list, rate.m_outer, seeds, confidence)
        .map_err(|e| to_cli_error("rate", e))?;
    for p in study.per_seed.iter().flat_map(|s| &s.points) {
        if !(p.norm_s2_y.is_finite() && p.norm_s2_v.is_finite()) {
            return Err(CliError::NonFinite(format!("norms at t = {} are not finite", p.t)));
        }
    }

    let mut csv = String::from("seed,t,norm_s2_y,norm_s2_v\n");
    for s in &study.per_seed {
        for p in &s.points {
            writeln!(csv, "{},{},{},{}", s.seed, p.t, F(p.norm_s2_y), F(p.norm_s2_v)).unwrap();
        }
    }
    for p in &study.averaged {
        writeln!(csv, "mean,{},{},{}", p.t, F(p.norm_s2_y), F(p.norm_s2_v)).unwrap();
    }
    let mut slopes = String::from("target,slope,ci_lower,ci_upper,confidence\n");
    if let RateFit::Fitted { y, v } = &study.fit {
        for (name, f) in [("s2_y", y), ("s2_v", v)] {
            writeln!(slopes, "{name},{},{},{},{}", F(f.slope), F(f.ci_lower), F(f.ci_upper), F(f.confidence)).unwrap();
        }
    }
    let performed: u64 = seeds.len() as u64 * grid.len() as u64 * rate.t_list.iter().map(|&t| (t * rate.m_outer) as u64).sum::<u64>();
    let counters = CostCounters {
        evals_coupled: performed,
        evals_uncoupled_equivalent: performed,
        evals_performed: performed,
        evals_counted: evaluator.count(),
    };
    let summary = json!({ "averaged": study.averaged, "fit": study.fit });

    let mut out = Artifacts::default();
    out.push("rate.csv", csv);
    out.push("slopes.csv", slopes);
    out.push("result.json", envelope("rate-study", config, Vec::new(), summary, counters, elapsed(ctx, start)));
    Ok(out)
}

/// `allocation.json`.
pub fn cmd_allocate(config: &RunConfig, ctx: &RunContext) -> Result<Artifacts, CliError> {
    let start = Instant::now();
    let ladder = config.ladder()?;
    let req = config.allocation()?.budget_request()?;
    let cont = allocate(&ladder, req.budget, req.kind, req.target, req.model).map_err(|e| to_cli_error("allocation", e))?;
    let rounded = round_allocation(&cont, &ladder, req.budget, req.kind).map_err(|e| to_cli_error("allocation", e))?;
    // closure predictions are reported per unit mu2
    let (moments, normalized) = match req.model {
        VarianceModel::Moments(m) => (m, false),
        VarianceModel::Closure => (MomentSet::closure(0.0, 1.0).expect("valid closure"), true),
    };
    let predict = |ms: &[f64]| -> Result<serde_json::Value, CliError> {
        let (ey, ev) = theoretical_mlmc_variances(&moments, &ladder, ms).map_err(|e| to_cli_error("allocation", e))?;
        Ok(json!({ "e_s2_y": ey, "e_s2_v": ev }))
    };
    let rounded_f: Vec<f64> = rounded.ms.iter().map(|&m| m as f64).collect();
    let price = |kind| cost(&ladder, &rounded.ms, kind).map_err(|e| to_cli_error("allocation", e));
    let doc = json!({
        "artifact_version": ARTIFACT_VERSION,
        "schema_version": SCHEMA_VERSION,
        "ladder": ladder.ts(),
        "budget": req.budget,
        "target": req.target,
        "cost_model": req.kind,
        "continuous": cont.ms,
        "continuous_cost": cont.cost(&ladder),
        "rounded": rounded.ms,
        "rounded_cost": {
            "coupled": price(CostModel::Coupled)?,
            "uncoupled": price(CostModel::Uncoupled)?,
        },
        "moments": moments,
        "moments_normalized": normalized,
        "predicted": {
            "continuous": predict(&cont.ms)?,
            "rounded": predict(&rounded_f)?,
        },
        "config": config,
        "wall_clock_seconds": elapsed(ctx, start),
    });
    let mut out = Artifacts::default();
    out.push("allocation.json", json_bytes(&doc));
    Ok(out)
}

/// `surface.csv` and `result.json`.
pub fn cmd_fixed_cost(config: &RunConfig, ctx: &RunContext) -> Result<Artifacts, CliError> {
    let start = Instant::now();
    let seeds = config.seeds()?;
    let evaluator = CountingEvaluator::new(config.evaluator(&ctx.base_dir)?);
    let grid = config.grid()?;
    let ladder = config.ladder()?;
    let spec = config.allocation()?;
    let budget = spec.integer_budget()?;
    let kind = spec.cost_model.ok_or_else(|| CliError::Config("allocation.cost_model: missing".into()))?;
    let min_m = spec.min_m()?;
    let surface = variance_surface(&evaluator, &grid, &ladder, budget, kind, min_m, seeds)
        .map_err(|e| to_cli_error("allocation", e))?;

    let mut csv = String::from("kind");
    for l in 0..ladder.len() {
        write!(csv, ",m{l}").unwrap();
    }
    csv.push_str(",norm_s2_y,norm_s2_v\n");
    let row = |csv: &mut String, kind: &str, ms: &[String], y: String, v: String| {
        writeln!(csv, "{kind},{},{y},{v}", ms.join(",")).unwrap();
    };
    let ints = |ms: &[usize]| ms.iter().map(|m| m.to_string()).collect::<Vec<_>>();
    let mut counters = CostCounters::default();
    for r in &surface.rows {
        if !(r.norm_s2_y.is_finite() && r.norm_s2_v.is_finite()) {
            return Err(CliError::NonFinite(format!("surface norms at {:?} are not finite", r.ms)));
        }
        row(&mut csv, "row", &ints(&r.ms), F(r.norm_s2_y).to_string(), F(r.norm_s2_v).to_string());
        let runs = (seeds.len() * grid.len()) as u64;
        counters.evals_coupled += runs * cost(&ladder, &r.ms, CostModel::Coupled).unwrap();
        counters.evals_uncoupled_equivalent += runs * cost(&ladder, &r.ms, CostModel::Uncoupled).unwrap();
    }
    counters.evals_performed = counters.evals_uncoupled_equivalent;
    counters.evals_counted = evaluator.count();
    for (label, idx) in [("argmin_y", &surface.argmin_y), ("argmin_v", &surface.argmin_v)] {
        for &i in idx {
            let r = &surface.rows[i];
            row(&mut csv, label, &ints(&r.ms), F(r.norm_s2_y).to_string(), F(r.norm_s2_v).to_string());
        }
    }
    for (label, opt) in [("optimum_mean", &surface.optimum_mean), ("optimum_variance", &surface.optimum_variance)] {
        let ms: Vec<String> = opt.ms.iter().map(|&m| F(m).to_string()).collect();
        row(&mut csv, label, &ms, String::new(), String::new());
    }
    let summary = json!({
        "ladder": ladder.ts(),
        "budget": budget,
        "cost_model": kind,
        "min_m": min_m,
        "rows": surface.rows.len(),
        "argmin_y": surface.argmin_y.iter().map(|&i| &surface.rows[i].ms).collect::<Vec<_>>(),
        "argmin_v": surface.argmin_v.iter().map(|&i| &surface.rows[i].ms).collect::<Vec<_>>(),
        "optimum_mean": surface.optimum_mean.ms,
        "optimum_variance": surface.optimum_variance.ms,
    });
    let mut out = Artifacts::default();
    out.push("surface.csv", csv);
    out.push("result.json", envelope("fixed-cost", config, Vec::new(), summary, counters, elapsed(ctx, start)));
    Ok(out)
}

/// `ladder.json`.
pub fn cmd_ladder(config: &RunConfig, ctx: &RunContext) -> Result<Artifacts, CliError> {
    let start = Instant::now();
    let ladder = config.ladder()?;
    let unit = MomentSet::closure(0.0, 1.0).expect("valid closure");
    let doc = json!({
        "artifact_version": ARTIFACT_VERSION,
        "schema_version": SCHEMA_VERSION,
        "ts": ladder.ts(),
        "levels": ladder.levels(),
        "mean_level_variances": mean_level_weights(&ladder),
        "closure_variance_level_variances": variance_level_weights(&unit, &ladder),
        "cost_weights": {
            "coupled": CostModel::Coupled.weights(&ladder),
            "uncoupled": CostModel::Uncoupled.weights(&ladder),
        },
        "config": config,
        "wall_clock_seconds": elapsed(ctx, start),
    });
    let mut out = Artifacts::default();
    out.push("ladder.json", json_bytes(&doc));
    Ok(out)
}
