use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, Float, ParamGrads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Float> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = |_| -> Vec<Vec<T>> {
            params
                .iter()
                .map(|(_, _, t)| vec![T::zero(); t.numel()])
                .collect()
        };
        Adam {
            cfg,
            m: zeros(()),
            v: zeros(()),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`. Arrays without a gradient are left
    /// untouched (their moments do not decay).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} arrays, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t, eps): (T, T, T) = (lit(b1), lit(b2), lit(self.cfg.eps));
        let (one_b1, one_b2): (T, T) = (lit(1.0 - b1), lit(1.0 - b2));
        let step: T = lit(lr / c1);
        let inv_c2: T = lit(1.0 / c2);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1t * m[i] + one_b1 * g[i];
                v[i] = b2t * v[i] + one_b2 * g[i] * g[i];
                p[i] -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_steps_match_hand_formula() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::scalar(0.5)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let (b1, b2, eps, lr) = (0.9f64, 0.98f64, 1e-9f64, 1e-3f64);
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.5f64);
        for (t, g) in [0.3f64, -1.2, 0.05].into_iter().enumerate() {
            let mut grads = ParamGrads::new(1);
            grads.set(id, vec![g]);
            adam.step(&mut store, &grads, lr).unwrap();
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            w -= lr * mhat / (vhat.sqrt() + eps);
            assert!((store.get(id).data()[0] - w).abs() < 1e-10);
        }
    }
}
