//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever runs forward passes on the [`Eager`] executor,
//! so it shares no code with the backward rules it checks.

use crate::error::Result;
use crate::numerics::{Eager, Graph, Grads, Ops, Params, Tensor, Var};

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged by absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// A scalar-valued function of a parameter set, written once for both executors.
pub trait ScalarFn {
    fn eval<O: Ops>(&self, ops: &mut O, params: &Params) -> Result<O::V>;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Analytic parameter gradients from one recorded backward pass.
pub fn analytic_grads<F: ScalarFn>(f: &F, params: &Params) -> Result<Grads> {
    let mut g = Graph::new();
    let loss = f.eval(&mut g, params)?;
    g.backward(&loss)?;
    let mut grads = Grads::zeros_like(params);
    g.accumulate_param_grads(&mut grads);
    Ok(grads)
}

fn eval_eager<F: ScalarFn>(f: &F, params: &Params) -> Result<f64> {
    let mut e = Eager::new();
    let v = f.eval(&mut e, params)?;
    Ok(v.data()[0])
}

/// Compares analytic gradients against central differences with step `h`.
/// `stride` > 1 checks every `stride`-th entry of each tensor.
pub fn check_params<F: ScalarFn>(f: &F, params: &Params, h: f64, stride: usize) -> Result<GradCheckReport> {
    let grads = analytic_grads(f, params)?;
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for id in params.ids() {
        let n = params.get(id).numel();
        for i in (0..n).step_by(stride.max(1)) {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval_eager(f, &work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval_eager(f, &work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(grads.get(id)[i], numeric);
            report.checked += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Gradient check for free inputs of a graph-built scalar function.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let run = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(&out).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(&out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| g.grad(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
        .collect();

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for (k, (x, grad)) in inputs.iter().zip(&analytic).enumerate() {
        for (i, (&orig, &a)) in x.data().iter().zip(grad).enumerate() {
            work[k].data_mut()[i] = orig + h;
            let plus = run(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = run(&work)?;
            work[k].data_mut()[i] = orig;
            let err = rel_err(a, (plus - minus) / (2.0 * h));
            report.checked += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = format!("input{k}");
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
