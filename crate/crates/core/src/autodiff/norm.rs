//! Batch normalisation over the channel axis of `[B,C,...]` inputs.

use super::graph::{Graph, Var};
use super::ops::axis_split;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Which statistics standardise the input.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Per-channel statistics of the current batch.
    Batch,
    /// Stored running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics observed in a training-mode pass. `var` is the
/// unbiased estimate used for running-average updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> Graph<T> {
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("batch_norm", format!("input rank {} < 2", shape.len())));
        }
        let (batch, channels, inner) = axis_split(&shape, 1);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [channels] {
                return Err(Error::dim(
                    "batch_norm",
                    format!("{name} shape {:?} for {channels} channels", self.shape(v)),
                ));
            }
        }
        let n = batch * inner;
        let src = self.value(x).data();
        let (mean, invstd, observed) = match stats {
            NormStats::Batch => {
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for b in 0..batch {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        *m = *m + src[(b * channels + ch) * inner..][..inner].iter().copied().sum::<T>();
                    }
                }
                let nf = T::of(n);
                mean.iter_mut().for_each(|m| *m = *m / nf);
                for b in 0..batch {
                    for (ch, v) in var.iter_mut().enumerate() {
                        let m = mean[ch];
                        *v = *v
                            + src[(b * channels + ch) * inner..][..inner]
                                .iter()
                                .map(|&s| (s - m) * (s - m))
                                .sum::<T>();
                    }
                }
                let biased: Vec<T> = var.iter().map(|&v| v / nf).collect();
                let unbiased = if n > 1 {
                    var.iter().map(|&v| v / T::of(n - 1)).collect()
                } else {
                    biased.clone()
                };
                let invstd: Vec<T> = biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean.clone(), invstd, Some(BatchStats { mean, var: unbiased }))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::dim("batch_norm", "running statistics length"));
                }
                let invstd = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean.to_vec(), invstd, None)
            }
        };
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Vec::with_capacity(src.len());
        for b in 0..batch {
            for ch in 0..channels {
                let (m, s, ga, be) = (mean[ch], invstd[ch], gv[ch], bv[ch]);
                out.extend(
                    src[(b * channels + ch) * inner..][..inner]
                        .iter()
                        .map(|&v| ga * (v - m) * s + be),
                );
            }
        }
        let training = observed.is_some();
        let var = self.push(
            Tensor::from_parts(shape, out),
            &[x, gamma, beta],
            Box::new(move |c| {
                let g = c.grad.data();
                let xs = c.inputs[0].data();
                let ga = c.inputs[1].data();
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                let mut sum_dxhat_xhat = vec![T::zero(); channels];
                for b in 0..batch {
                    for ch in 0..channels {
                        let off = (b * channels + ch) * inner;
                        for i in off..off + inner {
                            let xhat = (xs[i] - mean[ch]) * invstd[ch];
                            dgamma[ch] = dgamma[ch] + g[i] * xhat;
                            dbeta[ch] = dbeta[ch] + g[i];
                        }
                    }
                }
                for ch in 0..channels {
                    sum_dxhat_xhat[ch] = dgamma[ch] * ga[ch];
                }
                let dx = c.needs[0].then(|| {
                    let mut dx = Vec::with_capacity(xs.len());
                    let nf = T::of(n);
                    for b in 0..batch {
                        for ch in 0..channels {
                            let off = (b * channels + ch) * inner;
                            let scale = ga[ch] * invstd[ch];
                            if training {
                                let sum_dxhat = dbeta[ch] * ga[ch];
                                for i in off..off + inner {
                                    let xhat = (xs[i] - mean[ch]) * invstd[ch];
                                    let dxhat = g[i] * ga[ch];
                                    dx.push(
                                        invstd[ch] / nf
                                            * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat[ch]),
                                    );
                                }
                            } else {
                                dx.extend(g[off..off + inner].iter().map(|&v| v * scale));
                            }
                        }
                    }
                    Tensor::from_parts(c.inputs[0].shape().to_vec(), dx)
                });
                vec![
                    dx,
                    c.needs[1].then(|| Tensor::from_parts(vec![channels], dgamma)),
                    c.needs[2].then(|| Tensor::from_parts(vec![channels], dbeta)),
                ]
            }),
        );
        Ok((var, observed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_standardises_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(vec![4, 3, 5, 5], -3.0, 7.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::ones(vec![3]));
        let beta = g.constant(Tensor::zeros(vec![3]));
        let (y, stats) = g.batch_norm(xv, gamma, beta, NormStats::Batch, 1e-5).unwrap();
        assert!(stats.is_some());
        let y = g.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y[(b * 3 + ch) * 25..][..25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn single_item_batch_normalises_over_space() {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::<f64>::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gamma = g.constant(Tensor::ones(vec![1]));
        let beta = g.constant(Tensor::zeros(vec![1]));
        let (y, _) = g.batch_norm(xv, gamma, beta, NormStats::Batch, 1e-5).unwrap();
        assert!(g.value(y).data().iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn eval_mode_with_unit_stats_is_affine() {
        let mut g = Graph::new();
        let x = Tensor::<f64>::new(vec![2, 1, 3], vec![-1.0, 0.0, 0.5, 2.0, 3.0, -4.0]).unwrap();
        let xv = g.constant(x.clone());
        let gamma = g.constant(Tensor::full(vec![1], 2.0));
        let beta = g.constant(Tensor::full(vec![1], 1.0));
        let (mean, var) = ([0.0], [1.0]);
        let (y, stats) = g
            .batch_norm(xv, gamma, beta, NormStats::Running { mean: &mean, var: &var }, 0.0)
            .unwrap();
        assert!(stats.is_none());
        for (o, i) in g.value(y).data().iter().zip(x.data()) {
            assert!((o - (2.0 * i + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_shapes_are_checked() {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::<f64>::zeros(vec![2, 3, 2]));
        let gamma = g.constant(Tensor::ones(vec![2]));
        let beta = g.constant(Tensor::zeros(vec![3]));
        assert!(g.batch_norm(xv, gamma, beta, NormStats::Batch, 1e-5).is_err());
    }
}
