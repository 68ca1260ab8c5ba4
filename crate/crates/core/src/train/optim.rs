use crate::autodiff::{Gradients, ParamStore};
use crate::scalar::Scalar;

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left alone, including their decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let decay = store.param(id).decay && self.weight_decay != 0.0;
            let shrink = T::lit(1.0 - lr * self.weight_decay);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.get_mut(id).data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + ob1 * g[j];
                v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                if decay {
                    w[j] *= shrink;
                }
                w[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Linear decay from `base` at step 0 to zero at `total` steps, no warmup.
pub fn linear_decay_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    base * (1.0 - step as f64 / total as f64).max(0.0)
}
