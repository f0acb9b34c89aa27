//! Power-law fits of perplexity against compute or size, compute-optimal
//! frontiers over observed checkpoints, and isoFLOP slices.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariate {
    /// Cumulative training FLOPs.
    Flops,
    /// Total parameter count.
    Params,
}

impl Covariate {
    pub fn of(&self, r: &EvalRecord) -> f64 {
        match self {
            Covariate::Flops => r.train_flops,
            Covariate::Params => r.params as f64,
        }
    }
}

/// `ppl(x) = e + a * x^-alpha`; `e` is absent for the two-parameter form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub family: String,
    pub covariate: Covariate,
    pub a: f64,
    pub alpha: f64,
    pub e: Option<f64>,
    /// RMS of `ln y - ln predicted`.
    pub rms_residual: f64,
}

impl PowerLawFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.e.unwrap_or(0.0) + self.a * x.powf(-self.alpha)
    }
}

/// Ordinary least squares of `y = b0 + b1 * x`.
fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let b1 = sxy / sxx;
    (my - b1 * mx, b1)
}

fn rms_log_residual(xs: &[f64], ys: &[f64], a: f64, alpha: f64, e: f64) -> f64 {
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let r = y.ln() - (e + a * x.powf(-alpha)).ln();
            r * r
        })
        .sum();
    (sse / xs.len() as f64).sqrt()
}

/// Log-linear fit of `y - e = a * x^-alpha` for a fixed `e`.
fn fit_fixed_e(lx: &[f64], xs: &[f64], ys: &[f64], e: f64) -> (f64, f64, f64) {
    let ly: Vec<f64> = ys.iter().map(|y| (y - e).ln()).collect();
    let (b0, b1) = ols(lx, &ly);
    let (a, alpha) = (b0.exp(), -b1);
    (a, alpha, rms_log_residual(xs, ys, a, alpha, e))
}

const E_GRID: usize = 200;
const E_REFINE_ITERS: usize = 200;

/// Fits a power law to `(x, y)` pairs. The three-parameter form searches the
/// irreducible term over `[0, min y)`: a uniform grid, then golden-section
/// refinement around the best grid cell.
pub fn fit_points(family: &str, covariate: Covariate, xs: &[f64], ys: &[f64], with_irreducible: bool) -> Result<PowerLawFit> {
    if xs.len() != ys.len() {
        return Err(Error::Input("covariate and target lengths differ".into()));
    }
    if xs.iter().chain(ys).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Input("power-law fits need positive finite values".into()));
    }
    let mut distinct: Vec<f64> = xs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Degenerate(format!("{family}: need at least 3 distinct covariate values, got {}", distinct.len())));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let (a, alpha, e, rms) = if with_irreducible {
        let y_min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = y_min * (1.0 - 1e-9);
        let objective = |e: f64| fit_fixed_e(&lx, xs, ys, e).2;
        let step = hi / E_GRID as f64;
        let best = (0..E_GRID)
            .map(|i| i as f64 * step)
            .min_by(|p, q| objective(*p).total_cmp(&objective(*q)))
            .expect("non-empty grid");
        let (mut lo, mut up) = ((best - step).max(0.0), (best + step).min(hi));
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..E_REFINE_ITERS {
            let m1 = up - g * (up - lo);
            let m2 = lo + g * (up - lo);
            if objective(m1) <= objective(m2) {
                up = m2;
            } else {
                lo = m1;
            }
        }
        let mid = 0.5 * (lo + up);
        let e = if objective(mid) <= objective(best) { mid } else { best };
        let (a, alpha, rms) = fit_fixed_e(&lx, xs, ys, e);
        (a, alpha, Some(e), rms)
    } else {
        let (a, alpha, rms) = fit_fixed_e(&lx, xs, ys, 0.0);
        (a, alpha, None, rms)
    };
    Ok(PowerLawFit { family: family.to_string(), covariate, a, alpha, e, rms_residual: rms })
}

/// Fits perplexity against `covariate` over `records`.
pub fn fit_power_law(family: &str, records: &[EvalRecord], covariate: Covariate, with_irreducible: bool) -> Result<PowerLawFit> {
    let xs: Vec<f64> = records.iter().map(|r| covariate.of(r)).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.ppl).collect();
    fit_points(family, covariate, &xs, &ys, with_irreducible)
}

/// How records are grouped into fitted families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// Full model tag, e.g. `dec-1B`.
    Model,
    /// Architecture prefix of the tag, e.g. `dec`.
    Arch,
}

pub fn group_records(records: &[EvalRecord], grouping: Grouping) -> BTreeMap<String, Vec<EvalRecord>> {
    let mut out: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        let key = match grouping {
            Grouping::Model => r.model.clone(),
            Grouping::Arch => r.model.split('-').next().unwrap_or(&r.model).to_string(),
        };
        out.entry(key).or_default().push(r.clone());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    /// Training FLOPs of the record that set this budget.
    pub budget: f64,
    pub model: String,
    pub ppl: f64,
    pub params: u64,
    pub step: u64,
}

pub const FRONTIER_HEADER: &str = "budget,model,ppl,params,step";

/// Lower-left envelope: at every observed budget, the lowest perplexity among
/// records that cost no more. Earlier (cheaper) records win ties.
pub fn pareto_frontier(records: &[EvalRecord]) -> Result<Vec<FrontierPoint>> {
    if records.is_empty() {
        return Err(Error::Input("frontier needs at least one record".into()));
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.train_flops.total_cmp(&b.train_flops).then(a.ppl.total_cmp(&b.ppl)));
    let mut out: Vec<FrontierPoint> = Vec::new();
    let mut best: Option<&EvalRecord> = None;
    let mut i = 0;
    while i < sorted.len() {
        let budget = sorted[i].train_flops;
        while i < sorted.len() && sorted[i].train_flops == budget {
            if best.is_none_or(|b| sorted[i].ppl < b.ppl) {
                best = Some(sorted[i]);
            }
            i += 1;
        }
        let b = best.expect("at least one record seen");
        out.push(FrontierPoint { budget, model: b.model.clone(), ppl: b.ppl, params: b.params, step: b.step });
    }
    Ok(out)
}

/// Perplexity-versus-compute fit of one model size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeCurve {
    pub model: String,
    pub params: f64,
    pub fit: PowerLawFit,
    /// Observed training-FLOPs range the fit was made on.
    pub flops_min: f64,
    pub flops_max: f64,
}

impl SizeCurve {
    /// Fits one size's checkpoints (the three-parameter form when asked).
    pub fn from_records(records: &[EvalRecord], with_irreducible: bool) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::Input("no records for size curve".into()))?;
        let fit = fit_power_law(&first.model, records, Covariate::Flops, with_irreducible)?;
        let flops = records.iter().map(|r| r.train_flops);
        Ok(Self {
            model: first.model.clone(),
            params: first.params as f64,
            fit,
            flops_min: flops.clone().fold(f64::INFINITY, f64::min),
            flops_max: flops.fold(0.0, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoflopPoint {
    pub model: String,
    pub params: f64,
    pub ppl: f64,
    /// Budget lies outside the flops this size was observed at.
    pub extrapolated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoflopSlice {
    pub family: String,
    pub budget: f64,
    /// Sorted by size.
    pub points: Vec<IsoflopPoint>,
    /// Index of the lowest predicted perplexity.
    pub argmin: usize,
    /// Parabolic interpolation of the optimum in log-size through the
    /// minimum and its neighbours; the argmin size at the edges.
    pub optimal_params: f64,
    /// Only one size available.
    pub degenerate: bool,
    pub extrapolated: bool,
}

fn parabola_vertex(x: [f64; 3], y: [f64; 3]) -> Option<f64> {
    let d = (x[0] - x[1]) * (x[0] - x[2]) * (x[1] - x[2]);
    let a = (x[2] * (y[1] - y[0]) + x[1] * (y[0] - y[2]) + x[0] * (y[2] - y[1])) / d;
    let b = (x[2] * x[2] * (y[0] - y[1]) + x[1] * x[1] * (y[2] - y[0]) + x[0] * x[0] * (y[1] - y[2])) / d;
    (a > 0.0).then(|| -b / (2.0 * a))
}

/// Predicted perplexity of every size at each fixed budget, with the
/// compute-optimal size marked.
pub fn isoflop_slice(family: &str, curves: &[SizeCurve], budgets: &[f64]) -> Result<Vec<IsoflopSlice>> {
    if curves.is_empty() {
        return Err(Error::Input(format!("{family}: no size curves")));
    }
    let mut curves: Vec<&SizeCurve> = curves.iter().collect();
    curves.sort_by(|a, b| a.params.total_cmp(&b.params));
    let mut out = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let points: Vec<IsoflopPoint> = curves
            .iter()
            .map(|c| IsoflopPoint {
                model: c.model.clone(),
                params: c.params,
                ppl: c.fit.predict(budget),
                extrapolated: budget < c.flops_min || budget > c.flops_max,
            })
            .collect();
        let argmin = (0..points.len()).min_by(|&i, &j| points[i].ppl.total_cmp(&points[j].ppl)).expect("non-empty");
        let optimal_params = if argmin > 0 && argmin + 1 < points.len() {
            let x = [argmin - 1, argmin, argmin + 1].map(|i| points[i].params.ln());
            let y = [argmin - 1, argmin, argmin + 1].map(|i| points[i].ppl);
            parabola_vertex(x, y).map_or(points[argmin].params, f64::exp)
        } else {
            points[argmin].params
        };
        let degenerate = points.len() < 2;
        if degenerate {
            log::warn!("{family}: a single size cannot locate a compute optimum");
        }
        let extrapolated = points.iter().any(|p| p.extrapolated);
        out.push(IsoflopSlice { family: family.to_string(), budget, points, argmin, optimal_params, degenerate, extrapolated });
    }
    Ok(out)
}

pub fn write_fits(path: &Path, fits: &[PowerLawFit]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(fits)? + "\n")?;
    Ok(())
}

pub fn read_fits(path: &Path) -> Result<Vec<PowerLawFit>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_frontier(path: &Path, points: &[FrontierPoint]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(FRONTIER_HEADER.split(','))?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
