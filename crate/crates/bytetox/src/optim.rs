//! Adam optimizer and the two learning-rate schedules: inverse square root of
//! the step (clamped below the warmup step) for pretraining, fixed constant
//! for finetuning.

use serde::{Deserialize, Serialize};

use crate::elem::Elem;
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// lr(step) = 1 / sqrt(max(step, warmup))
    InverseSqrt { warmup: u64 },
    Constant { lr: f64 },
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::InverseSqrt { warmup } => 1.0 / ((step.max(warmup).max(1)) as f64).sqrt(),
            LrSchedule::Constant { lr } => lr,
        }
    }
}

/// Plain Adam with bias correction. State vectors follow the parameter store's
/// slot order, so updates are deterministic.
pub struct Adam<F: Elem> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
}

impl<F: Elem> Adam<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: store.iter().map(|p| vec![F::zero(); p.data.len()]).collect(),
            v: store.iter().map(|p| vec![F::zero(); p.data.len()]).collect(),
            t: 0,
        }
    }

    /// Apply one update. `grads` is indexed by parameter slot; missing slots
    /// (parameters not touched this step) are skipped.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Vec<F>>], lr: f64) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::from_f64(lr);
        let eps = F::from_f64(self.eps);
        for (slot, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let data = store.entry_data_mut(slot);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_sqrt_clamps_below_warmup() {
        let s = LrSchedule::InverseSqrt { warmup: 1000 };
        assert_eq!(s.lr(0), s.lr(1000));
        assert_eq!(s.lr(999), 1.0 / 1000f64.sqrt());
        assert!((s.lr(4000) - 1.0 / 4000f64.sqrt()).abs() < 1e-15);
        assert!(s.lr(4000) < s.lr(1000));
    }

    #[test]
    fn constant_schedule_is_constant() {
        let s = LrSchedule::Constant { lr: 1e-3 };
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(1_000_000), 1e-3);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x - 3)^2 elementwise
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("x", vec![0.0, 10.0], 1, 2);
        let mut opt = Adam::new(&store);
        for _ in 0..2000 {
            let x = store.get("x").unwrap().data.clone();
            let g: Vec<f64> = x.iter().map(|&xi| 2.0 * (xi - 3.0)).collect();
            opt.step(&mut store, &[Some(g)], 0.05);
        }
        let x = &store.get("x").unwrap().data;
        assert!((x[0] - 3.0).abs() < 1e-3 && (x[1] - 3.0).abs() < 1e-3, "{x:?}");
    }
}
