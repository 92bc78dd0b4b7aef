use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{Grads, Module, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment accumulators, aligned with parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new<M: Module<T> + ?Sized>(config: AdamConfig, module: &M) -> Self {
        let m = module.zero_grads();
        let v = m.clone();
        Adam { config, state: AdamState { step: 0, m, v } }
    }

    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &Grads<T>) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = T::lit(1.0 - beta1.powi(t));
        let bc2 = T::lit(1.0 - beta2.powi(t));
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (lr, eps) = (T::lit(lr), T::lit(eps));
        let one = T::one();
        let mut params = Vec::new();
        module.params_mut("", &mut params);
        assert_eq!(params.len(), grads.len(), "gradient buffer does not match parameters");
        for (((_, p), g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.state.m.iter_mut().zip(self.state.v.iter_mut()))
        {
            ndarray::Zip::from(&mut p.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, Linear, Sequential};
    use ndarray::Array3;
    use rand::SeedableRng;

    #[test]
    fn first_step_moves_each_parameter_by_lr() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = Sequential::<f64>::new(vec![Layer::Linear(Linear::new(3, 1, &mut rng))]);
        let before = net.clone();
        let mut opt = Adam::new(AdamConfig::with_lr(0.01), &net);
        let x = Array3::from_elem((2, 3, 1), 1.0);
        let (y, c) = net.forward(&x, true);
        let mut g = net.zero_grads();
        net.backward(c, Array3::ones(y.dim()), Some(&mut g));
        opt.step(&mut net, &g);
        // With bias correction the first update is lr * sign(g).
        let (mut a, mut b) = (Vec::new(), Vec::new());
        before.params("", &mut a);
        net.params("", &mut b);
        for ((_, p0), (_, p1)) in a.iter().zip(&b) {
            for (x0, x1) in p0.value.iter().zip(p1.value.iter()) {
                assert!(((x0 - x1).abs() - 0.01).abs() < 1e-6);
            }
        }
    }
}
