//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, config: AdamConfig) -> Self {
        let first: Vec<Tensor<T>> = shapes.into_iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        Adam {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    /// Applies one update to every parameter and increments the step counter.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: T) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::dim(
                "adam_step",
                format!(
                    "{} parameters, {} gradients, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let eps = T::lit(self.config.eps);
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![Tensor::<f64>::from_vec(vec![0.5, -1.25])];
        let before = params.clone();
        let mut adam = Adam::new(params.iter().map(|p| p.shape()), AdamConfig::default());
        adam.step(&mut params, &[Tensor::zeros(vec![2])], 0.1).unwrap();
        assert_eq!(params, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps).
        for g in [3.0, -0.02, 1e-3] {
            let mut params = vec![Tensor::<f64>::scalar(1.0)];
            let mut adam = Adam::new(params.iter().map(|p| p.shape()), AdamConfig::default());
            adam.step(&mut params, &[Tensor::scalar(g)], 0.01).unwrap();
            let want = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((params[0].data()[0] - want).abs() < 1e-15);
            assert!((params[0].data()[0] - (1.0 - 0.01 * g.signum())).abs() < 1e-6);
        }
    }

    #[test]
    fn two_steps_decrease_quadratic() {
        let f = |x: f64| x * x;
        let mut params = vec![Tensor::<f64>::scalar(1.0)];
        let mut adam = Adam::new(params.iter().map(|p| p.shape()), AdamConfig::default());
        let mut values = vec![f(1.0)];
        for _ in 0..2 {
            let x = params[0].data()[0];
            adam.step(&mut params, &[Tensor::scalar(2.0 * x)], 0.1).unwrap();
            values.push(f(params[0].data()[0]));
        }
        assert!(values[1] < values[0] && values[2] < values[1], "{values:?}");
    }

    #[test]
    fn rejects_mismatched_buffers() {
        let mut params = vec![Tensor::<f32>::zeros(vec![2])];
        let mut adam = Adam::new([&[3usize][..]], AdamConfig::default());
        assert!(adam.step(&mut params, &[Tensor::zeros(vec![2])], 0.1).is_err());
    }
}
