//! Hierarchical depth-normalization loss.
//!
//! Pixels are grouped into multi-scale contexts built from the ground truth
//! only (spatial grids, depth-range bins, depth-quantile bins). Within each
//! context, both maps are normalized by the context median and the mean
//! absolute deviation from it; the loss is the per-pixel absolute difference
//! of the two normalized maps, averaged over each pixel's contexts and over
//! all effective pixels. Per-context normalization cancels global positive
//! affine transforms of either map.
//!
//! The median is treated as a constant during backpropagation; gradient
//! flows through the centered values and through the MAD denominator.

use std::sync::Arc;

use crate::autodiff::{median, Tensor};
use crate::depth::DepthMap;
use crate::error::{Error, Result};

/// How a context's pixel set was selected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextStrategy {
    Grid,
    DepthRange,
    DepthQuantile,
}

/// One pixel grouping with its provenance tag.
#[derive(Clone, Debug)]
pub struct Context {
    pub indices: Arc<Vec<usize>>,
    pub strategy: ContextStrategy,
    /// Grid split count per side, or bin count for the depth strategies.
    pub scale: usize,
}

/// All contexts for one ground-truth map plus the per-pixel membership map.
#[derive(Clone, Debug)]
pub struct ContextSet {
    pub contexts: Vec<Context>,
    /// For each flat pixel index, the ids of contexts containing it
    /// (empty for invalid pixels).
    pub membership: Vec<Vec<u32>>,
    /// Number of effective (valid) pixels.
    pub n_valid: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct HdnConfig {
    /// Grid splits per side, one entry per scale level.
    pub grid_levels: Vec<usize>,
    pub range_bins: usize,
    pub quantile_bins: usize,
    pub min_context_size: usize,
    pub mad_floor: f32,
}

impl Default for HdnConfig {
    fn default() -> Self {
        HdnConfig {
            grid_levels: vec![1, 2, 4],
            range_bins: 4,
            quantile_bins: 4,
            min_context_size: 16,
            mad_floor: 1e-6,
        }
    }
}

impl HdnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_levels.is_empty() || self.grid_levels.iter().any(|&k| k == 0) {
            return Err(Error::config(format!(
                "grid_levels must be non-empty positive counts, got {:?}",
                self.grid_levels
            )));
        }
        if self.range_bins == 0 || self.quantile_bins == 0 || self.min_context_size == 0 {
            return Err(Error::config(
                "range_bins, quantile_bins and min_context_size must be >= 1",
            ));
        }
        if !(self.mad_floor > 0.0) {
            return Err(Error::config(format!(
                "mad_floor must be positive, got {}",
                self.mad_floor
            )));
        }
        Ok(())
    }
}

/// Build the multi-scale contexts for a ground-truth map.
pub fn build_contexts(gt: &DepthMap, cfg: &HdnConfig) -> Result<ContextSet> {
    cfg.validate()?;
    let valid = gt.valid_indices();
    if valid.is_empty() {
        return Err(Error::data("cannot build contexts: no valid pixels"));
    }
    if valid.len() < cfg.min_context_size {
        return Err(Error::data(format!(
            "cannot build contexts: {} valid pixels < min_context_size {}",
            valid.len(),
            cfg.min_context_size
        )));
    }

    let mut contexts: Vec<Context> = Vec::new();

    // spatial grids, one partition per level
    for &k in &cfg.grid_levels {
        let cell_h = gt.height.div_ceil(k);
        let cell_w = gt.width.div_ceil(k);
        let mut cells: Vec<Vec<usize>> = vec![Vec::new(); k * k];
        for &i in &valid {
            let (y, x) = (i / gt.width, i % gt.width);
            let cell = (y / cell_h).min(k - 1) * k + (x / cell_w).min(k - 1);
            cells[cell].push(i);
        }
        push_partition(&mut contexts, cells, ContextStrategy::Grid, k, cfg);
    }

    // depth-range bins: equal-width intervals over [min, max] of valid gt
    {
        let bins = cfg.range_bins;
        let lo = valid.iter().map(|&i| gt.values[i]).fold(f32::INFINITY, f32::min);
        let hi = valid
            .iter()
            .map(|&i| gt.values[i])
            .fold(f32::NEG_INFINITY, f32::max);
        let width = (hi - lo) / bins as f32;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); bins];
        for &i in &valid {
            let b = if width > 0.0 {
                (((gt.values[i] - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            groups[b].push(i);
        }
        push_partition(&mut contexts, groups, ContextStrategy::DepthRange, bins, cfg);
    }

    // depth-quantile bins: equal-count groups by rank
    {
        let bins = cfg.quantile_bins;
        let mut order = valid.clone();
        order.sort_by(|&a, &b| gt.values[a].total_cmp(&gt.values[b]).then(a.cmp(&b)));
        let n = order.len();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); bins];
        for (rank, &i) in order.iter().enumerate() {
            let b = (rank * bins / n).min(bins - 1);
            groups[b].push(i);
        }
        push_partition(&mut contexts, groups, ContextStrategy::DepthQuantile, bins, cfg);
    }

    let mut membership = vec![Vec::new(); gt.numel()];
    for (cid, ctx) in contexts.iter().enumerate() {
        for &i in ctx.indices.iter() {
            membership[i].push(cid as u32);
        }
    }

    Ok(ContextSet {
        contexts,
        membership,
        n_valid: valid.len(),
        height: gt.height,
        width: gt.width,
    })
}

/// Append one partition's groups, merging undersized groups into the nearest
/// kept group so every context has at least `min_context_size` pixels.
fn push_partition(
    out: &mut Vec<Context>,
    groups: Vec<Vec<usize>>,
    strategy: ContextStrategy,
    scale: usize,
    cfg: &HdnConfig,
) {
    let keep: Vec<usize> = groups
        .iter()
        .enumerate()
        .filter_map(|(i, g)| (g.len() >= cfg.min_context_size).then_some(i))
        .collect();

    if keep.is_empty() {
        // degenerate partition: everything collapses into one context
        let mut all: Vec<usize> = groups.into_iter().flatten().collect();
        all.sort_unstable();
        if !all.is_empty() {
            out.push(Context {
                indices: Arc::new(all),
                strategy,
                scale,
            });
        }
        return;
    }

    let mut merged: Vec<Vec<usize>> = keep.iter().map(|&i| groups[i].clone()).collect();
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() || keep.contains(&i) {
            continue;
        }
        // nearest kept group by index distance, ties towards lower index
        let nearest = keep
            .iter()
            .enumerate()
            .min_by_key(|(_, &k)| (k.abs_diff(i), k))
            .map(|(pos, _)| pos)
            .unwrap();
        merged[nearest].extend_from_slice(g);
    }
    for mut g in merged {
        g.sort_unstable();
        out.push(Context {
            indices: Arc::new(g),
            strategy,
            scale,
        });
    }
}

/// Differentiable per-context normalization: (d - median) / max(MAD, floor),
/// MAD being the mean absolute deviation from the median. The median itself
/// is detached (no gradient flows through the order statistic).
pub fn normalize_context(d: &Tensor, mad_floor: f32) -> Result<Tensor> {
    if d.numel() == 0 {
        return Err(Error::shape("normalize_context: empty context"));
    }
    let med = d.median_detached()?;
    let centered = d.add_scalar(-med)?;
    let mad = centered.abs()?.mean_all()?;
    let denom = mad.clamp_min(mad_floor)?;
    centered.div_bcast(&denom)
}

/// Host-side normalization of a plain slice (used for the ground-truth side
/// and by tests).
pub fn normalize_slice(vals: &[f32], mad_floor: f32) -> Result<Vec<f32>> {
    let med = median(vals)?;
    let mad = vals.iter().map(|v| (v - med).abs()).sum::<f32>() / vals.len() as f32;
    let denom = mad.max(mad_floor);
    Ok(vals.iter().map(|v| (v - med) / denom).collect())
}

/// Per-context medians of a prediction buffer (the statistics frozen during
/// backpropagation and by the finite-difference oracle).
pub fn context_medians(pred: &[f32], ctxs: &ContextSet) -> Result<Vec<f32>> {
    ctxs.contexts
        .iter()
        .map(|c| {
            let vals: Vec<f32> = c.indices.iter().map(|&i| pred[i]).collect();
            median(&vals)
        })
        .collect()
}

/// The loss, differentiable w.r.t. `pred`.
///
/// Context membership comes from the ground truth; normalization statistics
/// are computed separately on each map over the shared pixel sets. `pred`
/// must be a tensor with one value per pixel of `gt`.
pub fn hdn_loss(pred: &Tensor, gt: &DepthMap, ctxs: &ContextSet) -> Result<Tensor> {
    validate_loss_inputs(pred, gt, ctxs)?;
    let meds = context_medians(&pred.data(), ctxs)?;
    hdn_loss_frozen(pred, gt, ctxs, &meds)
}

fn validate_loss_inputs(pred: &Tensor, gt: &DepthMap, ctxs: &ContextSet) -> Result<()> {
    if pred.numel() != gt.numel() {
        return Err(Error::shape(format!(
            "hdn_loss: prediction has {} values but ground truth is {}x{}",
            pred.numel(),
            gt.height,
            gt.width
        )));
    }
    if ctxs.height != gt.height || ctxs.width != gt.width {
        return Err(Error::shape(format!(
            "hdn_loss: context set built for {}x{}, ground truth is {}x{}",
            ctxs.height, ctxs.width, gt.height, gt.width
        )));
    }
    if ctxs.contexts.is_empty() {
        return Err(Error::data("hdn_loss: empty context set"));
    }
    Ok(())
}

/// [`hdn_loss`] with explicitly supplied per-context prediction medians.
///
/// `hdn_loss` computes the medians from the current forward values; passing
/// the base-point medians here makes a finite-difference probe consistent
/// with the detached-median gradient convention.
pub fn hdn_loss_frozen(
    pred: &Tensor,
    gt: &DepthMap,
    ctxs: &ContextSet,
    pred_medians: &[f32],
) -> Result<Tensor> {
    validate_loss_inputs(pred, gt, ctxs)?;
    if pred_medians.len() != ctxs.contexts.len() {
        return Err(Error::shape(format!(
            "hdn_loss: {} medians for {} contexts",
            pred_medians.len(),
            ctxs.contexts.len()
        )));
    }
    let mad_floor = 1e-6f32;
    let flat = pred.reshape(&[pred.numel()])?;
    let tape = pred.tape().clone();
    let m = ctxs.n_valid as f32;

    let mut loss: Option<Tensor> = None;
    for (cid, ctx) in ctxs.contexts.iter().enumerate() {
        // prediction side: centered by the (frozen) median, divided by its
        // own differentiable MAD
        let gathered = flat.gather(ctx.indices.clone())?;
        let centered = gathered.add_scalar(-pred_medians[cid])?;
        let mad = centered.abs()?.mean_all()?;
        let denom = mad.clamp_min(mad_floor)?;
        let n_pred = centered.div_bcast(&denom)?;

        // ground-truth side is a constant
        let gt_vals: Vec<f32> = ctx.indices.iter().map(|&i| gt.values[i]).collect();
        let n_gt = normalize_slice(&gt_vals, mad_floor)?;
        let n_gt = tape.constant_from(&n_gt, &[n_gt.len()])?;

        // weight each pixel by 1 / (M * |U_i|)
        let weights: Vec<f32> = ctx
            .indices
            .iter()
            .map(|&i| 1.0 / (m * ctxs.membership[i].len() as f32))
            .collect();
        let w = tape.constant_from(&weights, &[weights.len()])?;

        let term = n_gt.sub(&n_pred)?.abs()?.mul(&w)?.sum_all()?;
        loss = Some(match loss {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(loss.expect("non-empty context set"))
}
