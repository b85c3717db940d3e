//! AdamW with decoupled weight decay.

use crate::autograd::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// One update of `theta` in place. `step` counts from 1; `m` and `v` start
/// at zero. The decay `theta -= lr * wd * theta` is applied before, and
/// independently of, the bias-corrected adaptive step.
pub fn adamw_step<T: Scalar>(theta: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], step: u64, lr: f64, cfg: &AdamWConfig) {
    assert!(step >= 1, "AdamW steps count from 1");
    assert!(theta.len() == grad.len() && grad.len() == m.len() && m.len() == v.len());
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powf(step as f64));
    let c2 = T::lit(1.0 - cfg.beta2.powf(step as f64));
    let (lr_t, eps) = (T::lit(lr), T::lit(cfg.eps));
    let decay = T::lit(lr * cfg.weight_decay);
    for i in 0..theta.len() {
        let g = grad[i];
        theta[i] -= decay * theta[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer state for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.params().iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies the accumulated `grad` of every parameter.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            adamw_step(p.value.data_mut(), p.grad.data(), m, v, self.step, lr, &self.config);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut theta = vec![0.3f64, -1.2, 4.0];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        for step in 1..=5 {
            adamw_step(&mut theta, &[0.0; 3], &mut m, &mut v, step, 1e-2, &no_decay());
        }
        assert_eq!(theta, [0.3, -1.2, 4.0]);
    }

    #[test]
    fn constant_gradient_moves_by_the_learning_rate() {
        // With g constant, m_t = (1 - b1^t) g and v_t = (1 - b2^t) g^2, so the
        // corrected step is lr * |g| / (|g| + eps).
        let (lr, g) = (1e-3, 0.37);
        let want = lr * g / (g + 1e-8);
        let mut theta = [2.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        for step in 1..=200 {
            let before = theta[0];
            adamw_step(&mut theta, &[g], &mut m, &mut v, step, lr, &no_decay());
            let moved = before - theta[0];
            assert!((moved - want).abs() <= 0.01 * want, "step {step}: {moved}");
        }
    }

    #[test]
    fn single_step_matches_the_decoupled_formula() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut theta = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_step(&mut theta, &[1.0], &mut m, &mut v, 1, 0.1, &cfg);
        // Decay 1 - 0.1 * 0.1, then m_hat = v_hat = 1.
        let want = 0.99 - 0.1 / (1.0 + 1e-8);
        assert!((theta[0] - want).abs() <= 1e-12, "{}", theta[0]);
    }

    #[test]
    fn store_optimizer_updates_every_parameter() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add_param("a", Tensor::full(&[2], 1.0)).unwrap();
        let b = store.add_param("b", Tensor::full(&[3], -1.0)).unwrap();
        store.param_mut(a).grad.fill(0.5);
        store.param_mut(b).grad.fill(-2.0);
        let mut opt = AdamW::new(&store, no_decay());
        opt.update(&mut store, 0.1);
        assert_eq!(opt.step, 1);
        assert!(store.value(a).data().iter().all(|&x| (x - 0.9).abs() < 1e-7));
        assert!(store.value(b).data().iter().all(|&x| (x + 0.9).abs() < 1e-7));
    }
}
