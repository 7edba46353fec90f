use serde::{Deserialize, Serialize};

use super::params::ParamStore;

/// Adaptive-moment optimiser state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: ParamStore,
    second: ParamStore,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first: ParamStore::new(),
            second: ParamStore::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Moves `params` along `+grad` (gradient ascent). Parameters missing from
    /// `grad`, or rejected by `trainable`, are left untouched.
    pub fn ascend(&mut self, params: &mut ParamStore, grad: &ParamStore, trainable: impl Fn(&str) -> bool) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, value) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let Some(g) = grad.get(name) else { continue };
            if !self.first.contains(name) {
                self.first.insert(name, g.map(|_| 0.0));
                self.second.insert(name, g.map(|_| 0.0));
            }
            let m = self.first.get_mut(name).unwrap();
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.second.get_mut(name).unwrap();
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let m = self.first.get(name).unwrap();
            let v = self.second.get(name).unwrap();
            for ((p, mi), vi) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *p += self.learning_rate * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
    }
}
