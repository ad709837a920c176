//! Central finite-difference comparison against accumulated parameter
//! gradients. Only forward evaluations are used on the numeric side.

use crate::{Param, Parameters};

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Relative error with an absolute floor so that near-zero pairs compare sanely.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Probe up to `per_param` coordinates of every parameter.
///
/// `loss` evaluates the scalar objective at the current parameter values.
/// The model's `grad` buffers must already hold the analytic gradient of that
/// objective.
pub fn check_parameters<M: Parameters<f64>>(
    model: &mut M,
    loss: &mut dyn FnMut(&M) -> f64,
    per_param: usize,
    step: f64,
    floor: f64,
) -> Vec<GradCheckEntry> {
    let mut targets: Vec<(usize, String, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut pi = 0;
    model.visit(&mut |p: &Param<f64>| {
        let picks = spread_indices(p.len(), per_param, pi);
        let grads = picks.iter().map(|&i| p.grad[i]).collect();
        targets.push((pi, p.name.clone(), picks, grads));
        pi += 1;
    });
    let mut out = Vec::new();
    for (pidx, name, picks, grads) in targets {
        for (&i, &analytic) in picks.iter().zip(&grads) {
            let plus = perturbed(model, loss, pidx, i, step);
            let minus = perturbed(model, loss, pidx, i, -step);
            let numeric = (plus - minus) / (2.0 * step);
            out.push(GradCheckEntry {
                param: name.clone(),
                index: i,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric, floor),
            });
        }
    }
    out
}

fn perturbed<M: Parameters<f64>>(
    model: &mut M,
    loss: &mut dyn FnMut(&M) -> f64,
    pidx: usize,
    i: usize,
    delta: f64,
) -> f64 {
    nudge(model, pidx, i, delta);
    let v = loss(model);
    nudge(model, pidx, i, -delta);
    v
}

fn nudge<M: Parameters<f64>>(model: &mut M, pidx: usize, i: usize, delta: f64) {
    let mut k = 0;
    model.visit_mut(&mut |p: &mut Param<f64>| {
        if k == pidx {
            p.value[i] += delta;
        }
        k += 1;
    });
}

/// Deterministic spread of `count` indices over `0..len`, offset by `salt`.
fn spread_indices(len: usize, count: usize, salt: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let stride = len as f64 / count as f64;
    (0..count)
        .map(|j| ((j as f64 * stride) as usize + salt * 7) % len)
        .collect()
}
