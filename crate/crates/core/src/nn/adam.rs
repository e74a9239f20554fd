use super::Module;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the module's visitation order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update from the gradient slots of `module`. A tensor without a
    /// gradient slot contributes a zero gradient.
    pub fn update<M: Module<T> + ?Sized>(&mut self, module: &mut M) {
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(c.lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);

        let first = &mut self.first;
        let second = &mut self.second;
        let mut i = 0;
        module.visit_params_mut("", &mut |_, p| {
            if first.len() <= i {
                first.push(vec![T::zero(); p.len()]);
                second.push(vec![T::zero(); p.len()]);
            }
            let grad = p
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); p.len()]);
            let (m, v) = (&mut first[i], &mut second[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
            i += 1;
        });
    }
}
