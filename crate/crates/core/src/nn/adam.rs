use serde::{Deserialize, Serialize};

use super::{Gradients, ParamSet, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. State slots are created lazily per tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Advance the shared step counter; call once before the updates of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, value: &mut [T], grad: &[T]) {
        assert_eq!(value.len(), grad.len());
        assert!(self.t > 0, "begin_step must precede update");
        while self.m.len() <= slot {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[slot].is_empty() {
            self.m[slot] = vec![T::zero(); value.len()];
            self.v[slot] = vec![T::zero(); value.len()];
        }
        let b1 = T::from_f64_lossy(self.cfg.beta1);
        let b2 = T::from_f64_lossy(self.cfg.beta2);
        let one = T::one();
        let c1 = one - b1.powi(self.t);
        let c2 = one - b2.powi(self.t);
        let step = T::from_f64_lossy(self.cfg.lr) / c1;
        let eps = T::from_f64_lossy(self.cfg.eps);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            value[i] -= step * m[i] / ((v[i] / c2).sqrt() + eps);
        }
    }

    /// One step over every tensor of `params` that received a gradient.
    pub fn step_params(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) {
        self.begin_step();
        for i in 0..params.len() {
            if let Some(g) = grads.param(params.key(i)) {
                let g: &Tensor<T> = g;
                self.update(i, params.tensor_mut(i).data_mut(), g.data());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::<f64>::new(AdamConfig::with_lr(0.01));
        let mut x = vec![1.0, -2.0, 0.5];
        adam.begin_step();
        adam.update(0, &mut x, &[3.0, -0.1, 0.0]);
        assert!((x[0] - 0.99).abs() < 1e-9);
        assert!((x[1] + 1.99).abs() < 1e-9);
        assert_eq!(x[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut adam = Adam::<f64>::new(AdamConfig::with_lr(0.05));
        let mut x = vec![3.0];
        for _ in 0..2000 {
            let g = 2.0 * (x[0] - 1.0);
            adam.begin_step();
            adam.update(0, &mut x, &[g]);
        }
        assert!((x[0] - 1.0).abs() < 1e-3);
    }
}
