//! Progressive linear blending refinement.
//!
//! The schedule coefficient decreases linearly from epsilon at t = 0 to
//! exactly 0 at t = T-1. Training samples blend the clean latent with the
//! coarse latent; inference runs the loop backwards, re-anchoring every
//! intermediate state to the original coarse latent rather than to the
//! previous state. No noise is injected anywhere: the whole process is
//! deterministic.

use crate::error::{Error, Result};

/// Multi-channel low-resolution array produced by a codec encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Latent {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::shape(format!(
                "latent [{channels}, {height}, {width}] implies {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        Ok(Latent {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Latent {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    fn same_shape(&self, other: &Latent, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: latent shapes differ, {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Blending schedule: `alpha_bar[t] = epsilon / (T-1) * (T-t-1)`.
/// Coefficients are kept in f64; the endpoints are epsilon and 0 exactly.
#[derive(Clone, Debug)]
pub struct PlbrSchedule {
    pub steps: usize,
    pub epsilon: f64,
    pub alpha_bar: Vec<f64>,
}

/// Build the schedule. `steps >= 2`; `epsilon` must lie strictly inside
/// (0, 1) — close to 1 is fine, exactly 1 is not.
pub fn make_schedule(steps: usize, epsilon: f64) -> Result<PlbrSchedule> {
    if steps < 2 {
        return Err(Error::config(format!(
            "schedule needs at least 2 steps, got {steps}"
        )));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::config(format!(
            "epsilon must be a positive constant strictly inside (0, 1) — \
             close to 1 is allowed, 1 itself is not (got {epsilon})"
        )));
    }
    let t_minus_1 = (steps - 1) as f64;
    let alpha_bar = (0..steps)
        .map(|t| match t {
            0 => epsilon,
            t if t == steps - 1 => 0.0,
            t => epsilon / t_minus_1 * (t_minus_1 - t as f64),
        })
        .collect();
    Ok(PlbrSchedule {
        steps,
        epsilon,
        alpha_bar,
    })
}

impl PlbrSchedule {
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::config(format!(
                "timestep {t} out of range for schedule of length {}",
                self.steps
            ))
        })
    }
}

/// Training-time forward blend: `z_t = alpha_bar[t] * z0 + (1 - alpha_bar[t]) * zc`.
pub fn forward_blend(z0: &Latent, zc: &Latent, t: usize, sched: &PlbrSchedule) -> Result<Latent> {
    z0.same_shape(zc, "forward_blend")?;
    let a = sched.alpha(t)?;
    blend(z0, zc, a)
}

/// Inference-time update: `z_{t_next} = alpha_bar[t_next] * z_pred + (1 - alpha_bar[t_next]) * zc`.
///
/// The anchor is always the original coarse latent `zc`, never a previous
/// intermediate state: given the same (z_pred, zc, t_next) the output is
/// bit-identical no matter what happened earlier in the loop.
pub fn reverse_step(
    z_pred: &Latent,
    zc: &Latent,
    t_next: usize,
    sched: &PlbrSchedule,
) -> Result<Latent> {
    z_pred.same_shape(zc, "reverse_step")?;
    if t_next > sched.steps - 2 {
        return Err(Error::config(format!(
            "reverse_step target {t_next} out of range 0..={}",
            sched.steps - 2
        )));
    }
    let a = sched.alpha(t_next)?;
    blend(z_pred, zc, a)
}

fn blend(a_side: &Latent, b_side: &Latent, alpha: f64) -> Result<Latent> {
    // anchor + alpha * (value - anchor): equals the anchor exactly at
    // alpha = 0 and equals both sides exactly when they coincide
    let a32 = alpha as f32;
    let values = a_side
        .values
        .iter()
        .zip(&b_side.values)
        .map(|(a, b)| b + a32 * (a - b))
        .collect();
    Latent::new(a_side.channels, a_side.height, a_side.width, values)
}

/// A model predicting the clean latent from the conditioning latent, the
/// current blended state and the timestep.
pub trait LatentPredictor {
    fn predict_latent(&self, zx: &Latent, zt: &Latent, t: usize) -> Result<Latent>;
}

impl<F> LatentPredictor for F
where
    F: Fn(&Latent, &Latent, usize) -> Result<Latent>,
{
    fn predict_latent(&self, zx: &Latent, zt: &Latent, t: usize) -> Result<Latent> {
        self(zx, zt, t)
    }
}

/// Run the full refinement loop.
///
/// Starts from `z_{T-1} = zc` and walks t = T-1 down to 1; each step
/// predicts the clean latent and, while t > 1, blends that prediction with
/// the original coarse latent to form the next state. The returned value is
/// the raw final prediction — it is never blended back with `zc`. Exactly
/// T-1 predictor calls are made.
pub fn refine(
    zc: &Latent,
    zx: &Latent,
    model: &dyn LatentPredictor,
    sched: &PlbrSchedule,
) -> Result<Latent> {
    refine_traced(zc, zx, model, sched, |_, _| {}).map(|(out, _)| out)
}

/// Like [`refine`], but invokes `observe(t, prediction)` after every model
/// call (useful for exporting the coarse-to-fine progression) and returns
/// the number of predictor calls alongside the result.
pub fn refine_traced(
    zc: &Latent,
    zx: &Latent,
    model: &dyn LatentPredictor,
    sched: &PlbrSchedule,
    mut observe: impl FnMut(usize, &Latent),
) -> Result<(Latent, usize)> {
    let mut zt = zc.clone();
    let mut calls = 0usize;
    let mut prediction = None;
    for t in (1..sched.steps).rev() {
        let pred = model.predict_latent(zx, &zt, t)?;
        pred.same_shape(zc, "refine")?;
        calls += 1;
        observe(t, &pred);
        if t > 1 {
            zt = reverse_step(&pred, zc, t - 1, sched)?;
        }
        prediction = Some(pred);
    }
    let out = prediction.expect("schedule has at least 2 steps");
    Ok((out, calls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use std::cell::Cell;

    fn scalar_latent(v: f32) -> Latent {
        Latent::new(1, 1, 1, vec![v]).unwrap()
    }

    fn rand_latent(c: usize, h: usize, w: usize, stream: u64) -> Latent {
        let mut rng = seeded_rng(99, stream);
        let values = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Latent::new(c, h, w, values).unwrap()
    }

    #[test]
    fn schedule_matches_hand_evaluation() {
        let s = make_schedule(6, 0.8).unwrap();
        let expected = [0.8f64, 0.64, 0.48, 0.32, 0.16, 0.0];
        for (a, e) in s.alpha_bar.iter().zip(expected) {
            assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
        assert_eq!(s.alpha_bar[0], 0.8);
        assert_eq!(s.alpha_bar[5], 0.0);
    }

    #[test]
    fn schedule_two_steps_hits_endpoints() {
        let s = make_schedule(2, 0.5).unwrap();
        assert_eq!(s.alpha_bar, vec![0.5, 0.0]);
    }

    #[test]
    fn schedule_rejects_epsilon_one() {
        let err = make_schedule(6, 1.0).unwrap_err().to_string();
        assert!(err.contains("(0, 1)"), "{err}");
        assert!(make_schedule(6, 0.0).is_err());
        assert!(make_schedule(1, 0.8).is_err());
    }

    #[test]
    fn blend_identity_when_latents_equal() {
        let s = make_schedule(6, 0.8).unwrap();
        let z = rand_latent(2, 3, 3, 1);
        for t in 0..6 {
            let out = forward_blend(&z, &z, t, &s).unwrap();
            assert_eq!(out, z);
        }
    }

    #[test]
    fn blend_last_step_returns_coarse_exactly() {
        let s = make_schedule(6, 0.8).unwrap();
        let z0 = rand_latent(2, 3, 3, 2);
        let zc = rand_latent(2, 3, 3, 3);
        let out = forward_blend(&z0, &zc, 5, &s).unwrap();
        assert_eq!(out, zc);
    }

    #[test]
    fn blend_scalar_case() {
        let s = make_schedule(6, 0.8).unwrap();
        let out = forward_blend(&scalar_latent(1.0), &scalar_latent(0.0), 2, &s).unwrap();
        assert!((out.values[0] - 0.48).abs() < 1e-7);
    }

    #[test]
    fn blend_rejects_mismatched_shapes_and_bad_t() {
        let s = make_schedule(6, 0.8).unwrap();
        let z0 = rand_latent(2, 3, 3, 4);
        let zc = rand_latent(2, 3, 4, 5);
        assert!(forward_blend(&z0, &zc, 0, &s).is_err());
        assert!(forward_blend(&z0, &z0, 6, &s).is_err());
    }

    #[test]
    fn reverse_step_fixed_point_and_endpoints() {
        let s = make_schedule(6, 0.8).unwrap();
        let zc = rand_latent(1, 2, 2, 6);
        let out = reverse_step(&zc, &zc, 3, &s).unwrap();
        assert_eq!(out, zc);

        let one = scalar_latent(1.0);
        let zero = scalar_latent(0.0);
        let at0 = reverse_step(&one, &zero, 0, &s).unwrap();
        assert!((at0.values[0] - 0.8).abs() < 1e-7);
        let at3 = reverse_step(&one, &zero, 3, &s).unwrap();
        assert!((at3.values[0] - 0.32).abs() < 1e-7);
        assert!(reverse_step(&one, &zero, 5, &s).is_err());
    }

    #[test]
    fn refine_with_oracle_returning_clean_recovers_it() {
        let s = make_schedule(6, 0.8).unwrap();
        let z0 = rand_latent(2, 4, 4, 7);
        let zc = rand_latent(2, 4, 4, 8);
        let zx = rand_latent(2, 4, 4, 9);
        let oracle = |_: &Latent, _: &Latent, _: usize| Ok(z0.clone());
        let out = refine(&zc, &zx, &oracle, &s).unwrap();
        for (o, e) in out.values.iter().zip(&z0.values) {
            assert!((o - e).abs() <= 1e-6);
        }
    }

    #[test]
    fn refine_with_oracle_returning_coarse_stays_coarse() {
        let s = make_schedule(4, 0.8).unwrap();
        let zc = rand_latent(1, 3, 3, 10);
        let zx = rand_latent(1, 3, 3, 11);
        let oracle = |_: &Latent, _: &Latent, _: usize| Ok(zc.clone());
        let out = refine(&zc, &zx, &oracle, &s).unwrap();
        assert_eq!(out, zc);
    }

    #[test]
    fn refine_returns_raw_final_prediction_not_a_blend() {
        // constant-m oracle: every intermediate blend feeds the next input,
        // but the returned value is the last prediction itself
        let s = make_schedule(6, 0.8).unwrap();
        let zc = scalar_latent(0.0);
        let zx = scalar_latent(0.0);
        let m = 0.7f32;
        let oracle = move |_: &Latent, _: &Latent, _: usize| Ok(scalar_latent(m));
        let out = refine(&zc, &zx, &oracle, &s).unwrap();
        assert!((out.values[0] - m).abs() < 1e-7);
    }

    #[test]
    fn refine_makes_exactly_t_minus_1_calls() {
        for steps in [2usize, 3, 6, 10] {
            let s = make_schedule(steps, 0.8).unwrap();
            let zc = rand_latent(1, 2, 2, 12);
            let zx = rand_latent(1, 2, 2, 13);
            let count = Cell::new(0usize);
            let stub = |_: &Latent, zt: &Latent, _: usize| {
                count.set(count.get() + 1);
                Ok(zt.clone())
            };
            let (_, calls) = refine_traced(&zc, &zx, &stub, &s, |_, _| {}).unwrap();
            assert_eq!(calls, steps - 1);
            assert_eq!(count.get(), steps - 1);
        }
    }

    proptest! {
        #[test]
        fn schedule_endpoints_exact(steps in 2usize..40, eps in 0.01f64..0.99) {
            let s = make_schedule(steps, eps).unwrap();
            prop_assert_eq!(s.alpha_bar[0], eps);
            prop_assert_eq!(s.alpha_bar[steps - 1], 0.0);
            // strictly decreasing with uniform step
            let step = eps / (steps - 1) as f64;
            for w in s.alpha_bar.windows(2) {
                prop_assert!(w[0] > w[1]);
                prop_assert!(((w[0] - w[1]) - step).abs() < 1e-12);
            }
            for &a in &s.alpha_bar {
                prop_assert!((0.0..=eps).contains(&a));
            }
        }

        #[test]
        fn blend_stays_within_per_coordinate_envelope(
            t in 0usize..6,
            seed in 0u64..1000,
        ) {
            let s = make_schedule(6, 0.8).unwrap();
            let z0 = rand_latent(2, 3, 3, seed);
            let zc = rand_latent(2, 3, 3, seed.wrapping_add(5000));
            let zt = forward_blend(&z0, &zc, t, &s).unwrap();
            for ((a, b), v) in z0.values.iter().zip(&zc.values).zip(&zt.values) {
                let (lo, hi) = (a.min(*b), a.max(*b));
                prop_assert!(*v >= lo - 1e-6 && *v <= hi + 1e-6);
            }
        }
    }
}
