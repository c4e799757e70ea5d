//! Adam without weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()];
        let g = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &[&g]).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-7);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::new(vec![1], vec![3.0]).unwrap()];
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g = p[0].map(|x| 2.0 * (x - 0.5));
            opt.step(&mut p, &[&g]).unwrap();
        }
        assert!((p[0].data()[0] - 0.5).abs() < 1e-3);
    }
}
