//! Central finite-difference gradient checks for graph-built functions.

use super::{Graph, ModelParams, Tensor, Var};
use crate::Result;

/// Worst-case agreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub n_checked: usize,
}

/// Relative error with the denominator floored at `1e-3`, so gradients that are
/// numerically zero are compared in absolute terms.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compares reverse-mode gradients of a scalar function of `inputs` against
/// central differences with step `h`.
///
/// `make_graph` must return a fresh graph in the same state each call (for
/// example a train graph with a fixed seed, so dropout masks repeat).
pub fn check(
    inputs: &[Tensor<f64>],
    make_graph: impl Fn() -> Graph<f64>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    h: f64,
) -> Result<GradReport> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = make_graph();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = make_graph();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut rep = GradReport { max_rel_err: 0.0, max_abs_err: 0.0, n_checked: 0 };
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].numel()];
        let analytic = grads.wrt(v).unwrap_or(&zeros).to_vec();
        for j in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[j];
            xs[k].data_mut()[j] = x0 + h;
            let fp = eval(&xs)?;
            xs[k].data_mut()[j] = x0 - h;
            let fm = eval(&xs)?;
            xs[k].data_mut()[j] = x0;
            let num = (fp - fm) / (2.0 * h);
            rep.max_rel_err = rep.max_rel_err.max(rel_err(analytic[j], num));
            rep.max_abs_err = rep.max_abs_err.max((analytic[j] - num).abs());
            rep.n_checked += 1;
        }
    }
    Ok(rep)
}

/// Like [`check`], but differentiates with respect to the trainable segments of
/// `params`, probing at most `max_per_segment` evenly spaced entries of each.
pub fn check_params(
    params: &ModelParams<f64>,
    make_graph: impl Fn() -> Graph<f64>,
    build: impl Fn(&mut Graph<f64>, &ModelParams<f64>) -> Result<Var>,
    h: f64,
    max_per_segment: usize,
) -> Result<GradReport> {
    let eval = |p: &ModelParams<f64>| -> Result<f64> {
        let mut g = make_graph();
        let out = build(&mut g, p)?;
        Ok(g.value(out).item())
    };
    let mut g = make_graph();
    let out = build(&mut g, params)?;
    let grads = g.backward(out)?;
    let mut rep = GradReport { max_rel_err: 0.0, max_abs_err: 0.0, n_checked: 0 };
    let mut p = params.clone();
    let names: Vec<String> = params.iter().filter(|(_, s)| s.trainable).map(|(n, _)| n.clone()).collect();
    for name in names {
        let n = params.get(&name)?.numel();
        let stride = n.div_ceil(max_per_segment.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let analytic = grads.param(&name).map_or(0.0, |t| t.data()[j]);
            let x0 = params.get(&name)?.data()[j];
            p.get_mut(&name)?.data_mut()[j] = x0 + h;
            let fp = eval(&p)?;
            p.get_mut(&name)?.data_mut()[j] = x0 - h;
            let fm = eval(&p)?;
            p.get_mut(&name)?.data_mut()[j] = x0;
            let num = (fp - fm) / (2.0 * h);
            rep.max_rel_err = rep.max_rel_err.max(rel_err(analytic, num));
            rep.max_abs_err = rep.max_abs_err.max((analytic - num).abs());
            rep.n_checked += 1;
        }
    }
    Ok(rep)
}
