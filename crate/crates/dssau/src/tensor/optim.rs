//! First-order parameter updates.

use super::{Scalar, Tensor};

/// Adam with bias correction, constant learning rate.
///
/// Moment buffers are keyed by parameter position, so the same parameter
/// slice must be passed to every step in the same order.
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            _marker: std::marker::PhantomData,
        }
    }

    /// Apply one update from the gradients accumulated on `params` and clear
    /// them. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &[Tensor<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed between steps");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (pi, p) in params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let mut data = p.data_mut();
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for i in 0..data.len() {
                let g = grad[i].to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let upd = data[i].to_f64() - self.lr * mhat / (vhat.sqrt() + self.eps);
                data[i] = T::from_f64(upd);
            }
            drop(data);
            p.zero_grad();
        }
    }
}
