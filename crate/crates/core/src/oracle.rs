//! Independent f64 reference implementations backing the test suites.
//!
//! Compiled only for tests (or with the `oracle` feature). Nothing here
//! touches the tape: these are direct evaluations used as finite-difference
//! and value oracles against the production f32 paths.

use crate::depth::DepthMap;
use crate::hdn::ContextSet;

/// f64 median (mean of the two central values for even lengths).
pub fn median_f64(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Direct f64 evaluation of the hierarchical normalization loss.
///
/// `frozen_medians`: per-context prediction medians to hold constant (the
/// detached-median convention); pass `None` to compute them from `pred`.
pub fn hdn_loss_f64(
    pred: &[f32],
    gt: &DepthMap,
    ctxs: &ContextSet,
    frozen_medians: Option<&[f64]>,
    mad_floor: f64,
) -> f64 {
    let m = ctxs.n_valid as f64;
    let mut loss = 0.0f64;
    for (cid, ctx) in ctxs.contexts.iter().enumerate() {
        let pv: Vec<f64> = ctx.indices.iter().map(|&i| pred[i] as f64).collect();
        let gv: Vec<f64> = ctx.indices.iter().map(|&i| gt.values[i] as f64).collect();
        let pmed = match frozen_medians {
            Some(meds) => meds[cid],
            None => median_f64(&pv),
        };
        let gmed = median_f64(&gv);
        let pmad = pv.iter().map(|v| (v - pmed).abs()).sum::<f64>() / pv.len() as f64;
        let gmad = gv.iter().map(|v| (v - gmed).abs()).sum::<f64>() / gv.len() as f64;
        let pden = pmad.max(mad_floor);
        let gden = gmad.max(mad_floor);
        for (k, &i) in ctx.indices.iter().enumerate() {
            let w = 1.0 / (m * ctxs.membership[i].len() as f64);
            let npred = (pv[k] - pmed) / pden;
            let ngt = (gv[k] - gmed) / gden;
            loss += w * (ngt - npred).abs();
        }
    }
    loss
}

/// Central-difference gradient of an f64-valued function of f32 inputs.
/// The quotient divides by the realized f32 step, not the nominal eps.
pub fn central_diff_grad(f: impl Fn(&[f32]) -> f64, x: &[f32], eps: f32) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        let xp = orig + eps;
        let xm = orig - eps;
        probe[i] = xp;
        let fp = f(&probe);
        probe[i] = xm;
        let fm = f(&probe);
        probe[i] = orig;
        grad.push((fp - fm) / (xp as f64 - xm as f64));
    }
    grad
}

/// `max_i |analytic_i - reference_i| / max(1, |analytic_i|)`.
pub fn max_rel_error(analytic: &[f32], reference: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(a, r)| (*a as f64 - r).abs() / (*a as f64).abs().max(1.0))
        .fold(0.0, f64::max)
}
