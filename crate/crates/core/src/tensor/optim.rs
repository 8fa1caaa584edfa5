//! Adam and plain SGD over parameter tensors.

use std::collections::HashMap;

use super::{Element, Tensor};

/// Adam with the usual defaults (beta1=0.9, beta2=0.999, eps=1e-8).
///
/// Moment buffers are keyed by tensor id and created lazily; a parameter
/// with no accumulated gradient is treated as having a zero gradient, so
/// its moments decay and the update is exactly zero.
pub struct Adam<E: Element> {
    pub lr: E,
    beta1: E,
    beta2: E,
    eps: E,
    t: u64,
    slots: HashMap<u64, (Vec<E>, Vec<E>)>,
}

impl<E: Element> Adam<E> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: E::from_f64(lr),
            beta1: E::from_f64(0.9),
            beta2: E::from_f64(0.999),
            eps: E::from_f64(1e-8),
            t: 0,
            slots: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &[Tensor<E>]) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = E::one() - self.beta1.powi(t);
        let bc2 = E::one() - self.beta2.powi(t);
        for p in params {
            let n = p.len();
            let (m, v) = self
                .slots
                .entry(p.id())
                .or_insert_with(|| (vec![E::zero(); n], vec![E::zero(); n]));
            let grad = p.grad();
            let zero = vec![E::zero(); n];
            let g = grad.as_deref().unwrap_or(&zero);
            let mut data = Vec::with_capacity(n);
            {
                let d = p.data();
                for i in 0..n {
                    m[i] = self.beta1 * m[i] + (E::one() - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (E::one() - self.beta2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    data.push(d[i] - self.lr * mhat / (vhat.sqrt() + self.eps));
                }
            }
            p.set_data(&data);
        }
    }
}

/// Plain stochastic gradient descent.
pub struct Sgd<E: Element> {
    pub lr: E,
}

impl<E: Element> Sgd<E> {
    pub fn new(lr: f64) -> Self {
        Sgd {
            lr: E::from_f64(lr),
        }
    }

    pub fn step(&self, params: &[Tensor<E>]) {
        for p in params {
            if let Some(g) = p.grad() {
                let mut data = p.to_vec();
                for (d, gi) in data.iter_mut().zip(&g) {
                    *d = *d - self.lr * *gi;
                }
                p.set_data(&data);
            }
        }
    }
}

/// Zero the gradient accumulators of every listed parameter.
pub fn zero_grads<E: Element>(params: &[Tensor<E>]) {
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let p = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 0.5]);
        let mut opt = Adam::new(0.1);
        let before = p.to_vec();
        for _ in 0..5 {
            opt.step(&[p.clone()]);
        }
        assert_eq!(p.to_vec(), before);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction, the first update is lr * g/|g| (up to eps).
        let p = Tensor::<f64>::param(&[1], vec![0.0]);
        p.accumulate_grad(&[0.5]);
        let mut opt = Adam::new(0.01);
        opt.step(&[p.clone()]);
        assert!((p.to_vec()[0] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn sgd_steps_along_negative_gradient() {
        let p = Tensor::<f64>::param(&[2], vec![1.0, 1.0]);
        p.accumulate_grad(&[0.5, -0.25]);
        Sgd::new(0.1).step(&[p.clone()]);
        assert_eq!(p.to_vec(), vec![0.95, 1.025]);
    }
}
