//! Adam with bias correction.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(DEFAULT_LR)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers, one per parameter.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Applies one update to `params` in place. `grads[i]` must be present and
    /// shaped like `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return shape_err(format!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return shape_err("parameter list changed between Adam steps");
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or_else(|| Error::MissingGradient(format!("#{i}")))?;
            if g.shape() != p.shape() || self.m[i].len() != p.len() {
                return shape_err(format!("gradient #{i} shape {:?} vs parameter {:?}", g.shape(), p.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].expect("checked above").data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
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
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params.clone();
        let g = Tensor::zeros([3]);
        let mut adam = Adam::default();
        for _ in 0..5 {
            adam.step(&mut params, &[Some(&g)]).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn first_step_closed_form() {
        // m̂ = g, v̂ = g² on step 1, so the update is lr * g / (|g| + eps).
        let mut params = vec![Tensor::zeros([4])];
        let g = Tensor::ones([4]);
        let mut adam = Adam::new(1e-4);
        adam.step(&mut params, &[Some(&g)]).unwrap();
        let expected = -1e-4 / (1.0 + 1e-8);
        for &w in params[0].data() {
            assert!((w - expected).abs() < 1e-18, "{w} vs {expected}");
        }
    }

    #[test]
    fn quadratic_bowl_norm_decreases() {
        let mut params = vec![Tensor::new([3], vec![3.0, -2.0, 1.0]).unwrap()];
        let mut adam = Adam::new(1e-3);
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let norm: f64 = params[0].data().iter().map(|w| w * w).sum::<f64>().sqrt();
            assert!(norm < last);
            last = norm;
            let g = params[0].map(|w| 2.0 * w);
            adam.step(&mut params, &[Some(&g)]).unwrap();
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = vec![Tensor::zeros([2])];
        let err = Adam::default().step(&mut params, &[None]).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(_)));
    }

    #[test]
    fn moment_shapes_follow_params() {
        let mut params = vec![Tensor::zeros([2, 3]), Tensor::zeros([5])];
        let gs = [Tensor::ones([2, 3]), Tensor::ones([5])];
        let mut adam = Adam::default();
        adam.step(&mut params, &[Some(&gs[0]), Some(&gs[1])]).unwrap();
        let (m, v) = adam.moments();
        assert_eq!(m.iter().map(Vec::len).collect::<Vec<_>>(), vec![6, 5]);
        assert_eq!(v.iter().map(Vec::len).collect::<Vec<_>>(), vec![6, 5]);
    }
}
