//! Adam with bias correction and decoupled weight decay.

use super::Tensor;

struct Slot {
    param: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Decay applies only to weight matrices, never to biases, batch-norm
    /// affine parameters, or the adjacency.
    decay: bool,
}

/// Optimizer state over a fixed set of parameters. The step counter advances
/// by exactly one per `step` call.
pub struct Adam {
    slots: Vec<Slot>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
}

impl Adam {
    /// `params` pairs each tensor with its weight-decay flag.
    pub fn new(params: Vec<(Tensor, bool)>, lr: f64, weight_decay: f64) -> Self {
        let slots = params
            .into_iter()
            .map(|(param, decay)| {
                let n = param.numel();
                Slot {
                    param,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    decay,
                }
            })
            .collect();
        Adam {
            slots,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
        }
    }

    /// One update from the gradients currently stored on the parameters.
    /// Parameters without a populated grad still receive weight decay.
    pub fn step(&mut self) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for slot in &mut self.slots {
            let (m, v) = (&mut slot.m, &mut slot.v);
            let (beta1, beta2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            slot.param.with_data_and_grad(|data, grad| {
                for i in 0..data.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    data[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
            if slot.decay && self.weight_decay != 0.0 {
                let factor = self.lr * self.weight_decay;
                let mut d = slot.param.inner.borrow_mut();
                for p in d.data.iter_mut() {
                    *p -= factor * *p;
                }
            }
        }
    }

    pub fn zero_grad(&self) {
        for slot in &self.slots {
            slot.param.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_moments_is_noop() {
        let p = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap().requires_grad();
        let mut opt = Adam::new(vec![(p.clone(), false)], 1e-3, 0.0);
        p.accumulate_grad(&[0.0, 0.0, 0.0]);
        opt.step();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn single_step_magnitude_is_lr_sign() {
        // with constant gradient g and fresh moments, bias correction makes
        // the first update exactly lr * sign(g) up to eps
        let p = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap().requires_grad();
        let mut opt = Adam::new(vec![(p.clone(), false)], 1e-3, 0.0);
        p.accumulate_grad(&[0.2, -3.0]);
        opt.step();
        let got = p.to_vec();
        assert!((got[0] - (0.5 - 1e-3)).abs() < 1e-6, "{got:?}");
        assert!((got[1] - (-0.5 + 1e-3)).abs() < 1e-6, "{got:?}");
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let p = Tensor::new(vec![1], vec![2.0]).unwrap().requires_grad();
        let mut opt = Adam::new(vec![(p.clone(), true)], 0.1, 0.01);
        p.accumulate_grad(&[0.0]);
        opt.step();
        // w <- w - lr*d*w
        assert!((p.to_vec()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn step_counter_increases() {
        let p = Tensor::new(vec![1], vec![0.0]).unwrap().requires_grad();
        let mut opt = Adam::new(vec![(p.clone(), false)], 1e-3, 0.0);
        assert_eq!(opt.step_count, 0);
        opt.step();
        opt.step();
        assert_eq!(opt.step_count, 2);
    }
}
