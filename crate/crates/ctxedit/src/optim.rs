//! Adam with decoupled weight decay (decay defaults to zero here).

use std::collections::BTreeMap;

use crate::numerics::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over the given named parameters. Parameters without an
    /// accumulated gradient are skipped; gradients are cleared afterwards.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, tensor) in params.iter_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let n = grad.len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data = tensor.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
            tensor.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x - 3)^2
        let mut x = Tensor::scalar(0.0).with_grad();
        let mut opt = AdamW::new(0.1);
        for _ in 0..400 {
            let g = 2.0 * (x.data()[0] - 3.0);
            x.accumulate_grad(&[g]);
            let mut params = vec![("x".to_string(), &mut x)];
            opt.step(&mut params);
        }
        assert!((x.data()[0] - 3.0).abs() < 1e-3, "got {}", x.data()[0]);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut x = Tensor::scalar(1.0);
        x.set_requires_grad(false);
        let mut opt = AdamW::new(0.1);
        let mut params = vec![("x".to_string(), &mut x)];
        opt.step(&mut params);
        assert_eq!(x.data()[0], 1.0);
    }
}
