//! Adaptive-moment optimizer with decoupled weight decay, and the
//! plateau-based learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::ParamSet;

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

/// Relative improvement below which an epoch counts as flat.
pub const PLATEAU_REL_THRESHOLD: f32 = 1e-4;

pub struct Adam {
    pub lr: f32,
    weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f32, weight_decay: f32) -> Self {
        let m = params
            .ids()
            .map(|id| vec![0.0; params.value(id).numel()])
            .collect();
        let v = params
            .ids()
            .map(|id| vec![0.0; params.value(id).numel()])
            .collect();
        Adam {
            lr,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    /// One update. `grads` is indexed like the param set; `None` entries
    /// (parameters unreached by backward) are skipped.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f32>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::config(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (idx, id) in params.ids().enumerate().map(|(i, id)| (i, id)).collect::<Vec<_>>() {
            let Some(g) = &grads[idx] else { continue };
            let p = params.value_mut(id);
            if g.len() != p.numel() {
                return Err(Error::shape(format!(
                    "gradient length {} does not match parameter {:?}",
                    g.len(),
                    p.shape
                )));
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..g.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let update = mhat / (vhat.sqrt() + ADAM_EPS) + self.weight_decay * p.data[i];
                p.data[i] -= self.lr * update;
            }
        }
        Ok(())
    }
}

/// Incremental plateau tracker: multiplies the learning rate by `factor`
/// after `patience` consecutive epochs without relative improvement of the
/// best validation loss. The counter resets on improvement and on trigger.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub lr: f32,
    factor: f32,
    patience: usize,
    best: Option<f32>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f32, factor: f32, patience: usize) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::config(format!(
                "plateau factor must be in (0, 1), got {factor}"
            )));
        }
        if patience == 0 {
            return Err(Error::config("plateau patience must be >= 1"));
        }
        Ok(PlateauScheduler {
            lr,
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        })
    }

    /// Observe one epoch's validation loss; returns the (possibly reduced)
    /// learning rate to use next.
    pub fn observe(&mut self, val_loss: f32) -> f32 {
        match self.best {
            None => {
                self.best = Some(val_loss);
            }
            Some(best) if val_loss < best - best.abs() * PLATEAU_REL_THRESHOLD => {
                self.best = Some(val_loss);
                self.bad_epochs = 0;
            }
            Some(_) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr *= self.factor;
                    self.bad_epochs = 0;
                }
            }
        }
        self.lr
    }
}

/// Pure form of the schedule: fold a full validation-loss history into the
/// resulting learning rate.
pub fn plateau_schedule(history: &[f32], lr: f32, factor: f32, patience: usize) -> Result<f32> {
    let mut sched = PlateauScheduler::new(lr, factor, patience)?;
    let mut out = lr;
    for &v in history {
        out = sched.observe(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{seeded_rng, Value};
    use crate::nn::{ParamBuilder, StepCtx};

    #[test]
    fn strictly_decreasing_history_keeps_lr() {
        let hist: Vec<f32> = (0..10).map(|i| 1.0 - i as f32 * 0.05).collect();
        let lr = plateau_schedule(&hist, 5e-5, 0.6, 5).unwrap();
        assert_eq!(lr, 5e-5);
    }

    #[test]
    fn five_flat_epochs_trigger_one_reduction() {
        // initial observation plus five flat epochs
        let hist = vec![1.0; 6];
        let lr = plateau_schedule(&hist, 5e-5, 0.6, 5).unwrap();
        assert!((lr - 3e-5).abs() < 1e-9, "{lr}");
    }

    #[test]
    fn two_triggers_compound_the_factor() {
        let hist = vec![1.0; 11];
        let lr = plateau_schedule(&hist, 1e-4, 0.5, 5).unwrap();
        assert!((lr - 2.5e-5).abs() < 1e-9, "{lr}");
    }

    #[test]
    fn lr_never_increases_and_is_lr0_times_factor_power() {
        let mut sched = PlateauScheduler::new(1e-3, 0.5, 2).unwrap();
        let mut prev = 1e-3f32;
        let losses = [1.0, 0.9, 0.9, 0.9, 0.85, 0.85, 0.85, 0.2, 0.9, 0.9];
        for &l in &losses {
            let lr = sched.observe(l);
            assert!(lr <= prev);
            let ratio = (1e-3 / lr) as f64;
            let n = ratio.log2().round();
            assert!((ratio - 2f64.powf(n)).abs() < 1e-9);
            prev = lr;
        }
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut rng = seeded_rng(31, 0);
        let mut pb = ParamBuilder::new(&mut rng);
        let w = pb.trunc_normal("w", &[8], 1.0);
        let mut params = pb.finish();
        let mut opt = Adam::new(&params, 0.05, 0.0);
        let loss_of = |params: &ParamSet| -> f32 {
            params.value(w).data.iter().map(|x| x * x).sum::<f32>()
        };
        let start = loss_of(&params);
        for _ in 0..50 {
            let ctx = StepCtx::new(&params, true);
            let t = ctx.param(w);
            let loss = t.mul(&t).unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            let per_param = ctx.collect_grads(&grads);
            opt.step(&mut params, &per_param).unwrap();
        }
        assert!(loss_of(&params) < 0.05 * start);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_unused_weights() {
        let mut pb_rng = seeded_rng(32, 0);
        let mut pb = ParamBuilder::new(&mut pb_rng);
        let w = pb.set.add("w", Value::full(&[4], 1.0));
        let mut params = pb.finish();
        let mut opt = Adam::new(&params, 0.1, 0.5);
        opt.step(&mut params, &[Some(vec![0.0; 4])]).unwrap();
        for v in &params.value(w).data {
            assert!((v - 0.95).abs() < 1e-6, "{v}");
        }
    }
}
